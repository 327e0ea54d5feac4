#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hbtrace/fault.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/sim/sim.hpp"

namespace hbt {

enum class SeedPolicy : uint8_t { Fixed, Sequential, Random };

struct ExperimentConfig {
  sim::SimConfig system;
  uint64_t iterations = 1;
  SeedPolicy seed_policy = SeedPolicy::Sequential;
  uint64_t base_seed = 0;
  std::vector<FaultRule> faults;
  uint32_t jobs = 1;
};

struct IterationOutcome {
  FinalizeResult result;
  uint64_t seed = 0;
  std::vector<std::string> warnings;
};

struct LoopSummary {
  uint64_t iterations = 0;
  uint64_t novel = 0;
  size_t distinct = 0;
  uint64_t coverage99_k = 0;  // ranked runs needed to reach 99% of iterations
  double top1_fraction = 0.0;
  std::string top_run;
};

// One tracing iteration end to end: simulate, follow, decide novelty.
IterationOutcome run_once(RunLibrary& library, const ExperimentConfig& cfg, uint64_t seed,
                          uint64_t iteration);

// N iterations with per-iteration seeds; `jobs` > 1 runs iterations on worker
// threads following a frozen snapshot of the library, merging results under
// a single writer.
LoopSummary run_loop(RunLibrary& library, const ExperimentConfig& cfg);

uint64_t seed_for(const ExperimentConfig& cfg, uint64_t iteration);

// Rows needed to reach the coverage fraction (rows are sorted by count).
uint64_t coverage_k(const std::vector<ReportRow>& rows, double fraction);

LoopSummary summarize(const RunLibrary& library, uint64_t iterations, uint64_t novel);

}  // namespace hbt
