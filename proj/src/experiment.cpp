#include "hbtrace/experiment.hpp"

#include <fmt/format.h>

#include <atomic>
#include <mutex>
#include <random>
#include <thread>

#include "hbtrace/errors.hpp"

namespace hbt {

uint64_t seed_for(const ExperimentConfig& cfg, uint64_t iteration) {
  switch (cfg.seed_policy) {
    case SeedPolicy::Fixed:
      return cfg.base_seed;
    case SeedPolicy::Sequential:
      return cfg.base_seed + iteration;
    case SeedPolicy::Random:
      return std::random_device{}();
  }
  return cfg.base_seed;
}

IterationOutcome run_once(RunLibrary& library, const ExperimentConfig& cfg, uint64_t seed,
                          uint64_t iteration) {
  sim::SimRun run = sim::run_simulation(cfg.system, seed, cfg.faults, &library, iteration);
  IterationOutcome out;
  out.seed = seed;
  out.warnings = std::move(run.warnings);
  out.result = library.finalize_execution(run.follow, std::move(run.trace));
  return out;
}

namespace {

// The fully-followed cursor, if any; AmbiguousFollow on two of them.
const FollowCursor* fully_followed(const FollowSet& follow) {
  const FollowCursor* found = nullptr;
  for (const FollowCursor& c : follow.cursors()) {
    if (!c.following() || !c.exhausted()) continue;
    if (found)
      raise(Errc::AmbiguousFollow, fmt::format("runs {} and {} were both fully followed",
                                               found->run_id(), c.run_id()));
    found = &c;
  }
  return found;
}

}  // namespace

LoopSummary run_loop(RunLibrary& library, const ExperimentConfig& cfg) {
  uint64_t novel = 0;

  if (cfg.jobs <= 1) {
    for (uint64_t i = 0; i < cfg.iterations; ++i) {
      IterationOutcome out = run_once(library, cfg, seed_for(cfg, i), i);
      if (out.result.novel()) ++novel;
    }
    return summarize(library, cfg.iterations, novel);
  }

  // Workers follow a frozen snapshot; the live library only mutates under
  // the merge lock. Duplicate discoveries collapse by run id.
  RunLibrary snapshot = library.snapshot();
  std::atomic<uint64_t> next{0};
  std::mutex merge;
  std::vector<std::exception_ptr> errors(cfg.jobs);
  std::vector<std::thread> workers;
  for (uint32_t w = 0; w < cfg.jobs; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (;;) {
          uint64_t i = next.fetch_add(1);
          if (i >= cfg.iterations) return;
          sim::SimRun run =
              sim::run_simulation(cfg.system, seed_for(cfg, i), cfg.faults, &snapshot, i);
          const FollowCursor* followed = fully_followed(run.follow);
          std::lock_guard<std::mutex> lock(merge);
          if (followed) {
            library.merge_followed(followed->run_id());
          } else if (library.merge_run(std::move(run.trace)).novel()) {
            ++novel;
          }
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (std::thread& t : workers) t.join();
  for (std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  return summarize(library, cfg.iterations, novel);
}

uint64_t coverage_k(const std::vector<ReportRow>& rows, double fraction) {
  for (size_t i = 0; i < rows.size(); ++i)
    if (rows[i].cumulative_fraction >= fraction) return i + 1;
  return rows.size();
}

LoopSummary summarize(const RunLibrary& library, uint64_t iterations, uint64_t novel) {
  LoopSummary s;
  s.iterations = iterations;
  s.novel = novel;
  s.distinct = library.size();
  auto rows = library.distribution_report();
  s.coverage99_k = coverage_k(rows, 0.99);
  if (!rows.empty()) {
    s.top1_fraction =
        static_cast<double>(rows[0].count) / static_cast<double>(library.iterations());
    s.top_run = rows[0].run_id;
  }
  return s;
}

}  // namespace hbt
