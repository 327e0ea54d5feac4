// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Run directly or through ctest.

#include <fmt/format.h>

#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "hbtrace/causality.hpp"
#include "hbtrace/errors.hpp"
#include "hbtrace/experiment.hpp"
#include "hbtrace/fault.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/sim/sim.hpp"
#include "hbtrace/stream_tracker.hpp"
#include "hbtrace/trace_io.hpp"

using namespace hbt;

namespace {

struct CriterionFailed {
  std::string what;
};

void require(bool ok, std::string what) {
  if (!ok) throw CriterionFailed{std::move(what)};
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence: run-library deduplication of every enumerable
//    schedule must count exactly the classes that explicit partial-order
//    graph comparison counts.

// Key-level graph equality, written from first principles: same per-thread
// (syscall, phase, outcome) sequences and the same cross edge set. No
// canonical strings, no hashing.
bool graphs_equal(const Trace& a, const Trace& b) {
  if (a.process_count() != b.process_count()) return false;
  for (uint32_t p = 0; p < a.process_count(); ++p) {
    if (a.thread_count(p) != b.thread_count(p)) return false;
    for (uint32_t t = 0; t < a.thread_count(p); ++t) {
      const auto& la = a.log(p, t);
      const auto& lb = b.log(p, t);
      if (la.size() != lb.size()) return false;
      for (size_t i = 0; i < la.size(); ++i) {
        if (la[i].syscall != lb[i].syscall || la[i].phase != lb[i].phase) return false;
        bool oa = la[i].outcome.has_value(), ob = lb[i].outcome.has_value();
        if (oa != ob) return false;
        if (oa && la[i].outcome->err != lb[i].outcome->err) return false;
      }
    }
  }
  return a.edges() == b.edges();
}

std::string check_oracle_equivalence() {
  std::string detail;
  for (const char* name : {"pair", "s1c2"}) {
    auto en = sim::enumerate_all_schedules(sim::preset(name), 64, 2000000);

    // Grouping A: explicit graph comparison against representatives.
    std::vector<const Trace*> classes;
    for (const Trace& t : en.distinct_traces) {
      bool known = false;
      for (const Trace* rep : classes)
        if (graphs_equal(*rep, t)) {
          known = true;
          break;
        }
      if (!known) classes.push_back(&t);
    }

    // Grouping B: run-library dedup over the same schedules.
    RunLibrary lib;
    for (const Trace& t : en.distinct_traces) {
      FollowSet follow(lib);
      t.for_each_event([&](const Event& ev) { follow.step(ev); });
      lib.finalize_execution(follow, Trace(t));
    }

    require(lib.size() == classes.size(),
            fmt::format("{}: library dedup found {} runs, graph comparison {}", name,
                        lib.size(), classes.size()));
    detail += fmt::format("{}: {} schedules -> {} distinct runs; ", name, en.schedules,
                          classes.size());
  }
  return detail;
}

// ---------------------------------------------------------------------------
// 2. Follow/fingerprint agreement over every enumerated schedule.

std::string check_follow_fingerprint_agreement() {
  uint64_t replays = 0;
  for (const char* name : {"pair", "s1c2"}) {
    auto en = sim::enumerate_all_schedules(sim::preset(name), 64, 2000000);
    RunLibrary lib;
    for (const Trace& t : en.distinct_traces) {
      FollowSet seed(lib);
      t.for_each_event([&](const Event& ev) { seed.step(ev); });
      lib.finalize_execution(seed, Trace(t));
    }
    for (const Trace& t : en.distinct_traces) {
      Trace replay(t);
      FollowSet follow(lib);
      replay.for_each_event([&](const Event& ev) { follow.step(ev); });
      // Per-cursor: fully followed iff the fingerprints are equal.
      for (const FollowCursor& c : follow.cursors()) {
        bool followed = c.following() && c.exhausted();
        bool same = c.run_id() == replay.run_id();
        require(followed == same,
                fmt::format("{}: cursor for {} followed={} but fingerprint-equal={}", name,
                            c.run_id().substr(0, 12), followed, same));
      }
      FinalizeResult res = lib.finalize_execution(follow, std::move(replay));
      require(!res.novel(), fmt::format("{}: a replayed schedule came out novel", name));
      require(res.run_id == t.run_id(), "followed run id mismatch");
      ++replays;
    }
  }
  return fmt::format("{} replays, follow == fingerprint on every cursor, zero ambiguity",
                     replays);
}

// ---------------------------------------------------------------------------
// 3. Happens-before soundness.

void check_pairing_and_data_edges(const Trace& t) {
  CausalGraph g(t);

  // (a) Every successful paired connect-Exit sits causally after the
  // matching accept-Entry.
  t.for_each_event([&](const Event& ev) {
    if (ev.syscall != Syscall::Connect || ev.phase != Phase::Exit) return;
    if (!ev.outcome->success()) return;
    require(!ev.parents.empty(), "paired connect-Exit lacks its accept parent");
    for (const EventCoord& par : ev.parents) {
      const Event& pe = t.at(par);
      require(pe.syscall == Syscall::Accept && pe.phase == Phase::Entry,
              "connect-Exit parent is not an accept-Entry");
      require(g.happens_before(par, ev.coord), "een(accept) !< eex(connect)");
    }
  });

  // (b) Re-derive byte ranges from the digests and check every intersecting
  // write is an ancestor of the read that consumed it.
  struct Half {
    std::vector<std::pair<std::pair<uint64_t, uint64_t>, EventCoord>> writes;
    uint64_t wcur = 0, rcur = 0;
  };
  std::map<std::pair<uint64_t, uint32_t>, Half> halves;  // (stream, writer proc)
  std::map<uint64_t, std::set<uint32_t>> parties;
  t.for_each_event([&](const Event& ev) {
    if (ev.phase != Phase::Exit || !ev.args.stream || !ev.outcome->success()) return;
    parties[*ev.args.stream].insert(ev.coord.process);
    if (ev.syscall == Syscall::Write) {
      Half& h = halves[{*ev.args.stream, ev.coord.process}];
      uint64_t n = ev.args.bytes.value_or(0);
      h.writes.push_back({{h.wcur, h.wcur + n}, ev.coord});
      h.wcur += n;
    }
  });
  t.for_each_event([&](const Event& ev) {
    if (ev.phase != Phase::Exit || ev.syscall != Syscall::Read) return;
    if (!ev.args.stream || !ev.outcome->success()) return;
    uint64_t n = ev.args.bytes.value_or(0);
    if (n == 0) return;
    for (uint32_t writer : parties[*ev.args.stream]) {
      if (writer == ev.coord.process) continue;
      Half& h = halves[{*ev.args.stream, writer}];
      uint64_t lo = h.rcur, hi = lo + n;
      for (const auto& [range, coord] : h.writes) {
        if (range.second > lo && range.first < hi && range.first != range.second)
          require(g.happens_before(coord, ev.coord),
                  fmt::format("write {} not an ancestor of read {}", coord.str(),
                              ev.coord.str()));
      }
      h.rcur = hi;
    }
  });
}

std::string check_happens_before_soundness() {
  uint64_t traces = 0;
  for (const char* name : {"pair", "s1c2"}) {
    auto en = sim::enumerate_all_schedules(sim::preset(name), 64, 2000000);
    for (const Trace& t : en.distinct_traces) {
      check_pairing_and_data_edges(t);
      ++traces;
    }
  }
  for (const char* name : {"1cl", "2cl", "2cl-mc", "4cl", "2cl-wt"}) {
    for (uint64_t seed = 0; seed < 40; ++seed) {
      auto run = sim::run_simulation(sim::preset(name), seed);
      check_pairing_and_data_edges(run.trace);
      ++traces;
    }
  }

  // (c) happens_before vs the brute-force transitive closure.
  std::mt19937_64 rng(20260809);
  for (int i = 0; i < 1000; ++i) {
    Trace t = testing::random_trace(rng, 64);
    t.finalize();
    testing::ClosureOracle oracle(t);
    CausalGraph g(t);
    std::vector<EventCoord> coords;
    t.for_each_event([&](const Event& ev) { coords.push_back(ev.coord); });
    for (const EventCoord& a : coords)
      for (const EventCoord& b : coords)
        require(g.happens_before(a, b) == (a != b && oracle.path(a, b)),
                "closure disagreement on a random trace");
  }
  return fmt::format("{} generated traces checked, 1000 random traces vs closure oracle",
                     traces);
}

// ---------------------------------------------------------------------------
// 4. Byte conservation under randomized chunkings.

std::string check_byte_conservation() {
  std::mt19937_64 rng(7777);
  uint64_t iterations = 10000;
  for (uint64_t iter = 0; iter < iterations; ++iter) {
    StreamTracker tracker([](EventCoord, EventCoord) {});
    tracker.on_socket(0, 3);
    tracker.on_bind(0, 3, Endpoint::loopback(6379));
    tracker.on_listen(0, 3);
    tracker.on_socket(1, 3);
    StreamId id = tracker.on_connect_exit(1, 3, Endpoint::loopback(50100),
                                          Endpoint::loopback(6379), EventCoord{1, 0, 0},
                                          EventCoord{1, 0, 1});
    tracker.on_accept_exit(0, 3, 4, Endpoint::loopback(50100), std::nullopt,
                           EventCoord{0, 0, 0}, EventCoord{0, 0, 1});

    uint64_t total = 1 + rng() % 4000;
    std::map<EventCoord, std::pair<uint64_t, uint64_t>> ranges;
    uint64_t written = 0, consumed = 0;
    uint32_t windex = 2;
    while (consumed < total) {
      bool can_write = written < total;
      bool can_read = consumed < written;
      bool do_write = can_write && (!can_read || (rng() % 2 == 0));
      if (do_write) {
        uint64_t n = std::min<uint64_t>(1 + rng() % 300, total - written);
        EventCoord coord{1, 0, windex};
        windex += 2;
        WriteRecord rec = tracker.on_write_exit(id, Dir::ClientToServer, coord, n);
        require(rec.begin == written && rec.end == written + n, "write range misplaced");
        ranges[coord] = {rec.begin, rec.end};
        written += n;
      } else {
        uint64_t n = std::min<uint64_t>(1 + rng() % 400, written - consumed);
        EventCoord coord{0, 0, windex};
        windex += 2;
        auto parents = tracker.on_read_exit(id, Dir::ClientToServer, coord, n);
        // Union of the mapped writes covers the consumed interval exactly.
        uint64_t lo = UINT64_MAX, hi = 0, span = 0;
        for (const EventCoord& p : parents) {
          auto [b, e] = ranges.at(p);
          lo = std::min(lo, b);
          hi = std::max(hi, e);
          span += e - b;
        }
        require(!parents.empty() && lo <= consumed && hi >= consumed + n && span == hi - lo,
                "mapped write ranges do not cover the read interval");
        consumed += n;
        require(consumed <= written, "cumulative reads overtook cumulative writes");
      }
    }
    require(consumed == written && written == total, "quiescence totals diverge");
  }
  return fmt::format("{} randomized chunkings, coverage exact at every step", iterations);
}

// ---------------------------------------------------------------------------
// 5. Distribution shape of repeated runs.

std::string check_distribution_shape() {
  ExperimentConfig base;
  base.system = sim::preset("2cl");
  base.iterations = 2000;
  base.seed_policy = SeedPolicy::Sequential;
  RunLibrary lib2cl;
  LoopSummary s2cl = run_loop(lib2cl, base);

  auto rows = lib2cl.distribution_report();
  for (size_t i = 1; i < rows.size(); ++i)
    require(rows[i].count <= rows[i - 1].count, "rank-ordered counts not non-increasing");
  require(s2cl.top1_fraction >= 0.10,
          fmt::format("2cl top-1 covers {:.3f} < 10%", s2cl.top1_fraction));
  require(s2cl.coverage99_k <= 500,
          fmt::format("2cl 99% coverage needs {} runs (> 500)", s2cl.coverage99_k));

  ExperimentConfig wt = base;
  wt.system = sim::preset("2cl-wt");
  RunLibrary libwt;
  LoopSummary swt = run_loop(libwt, wt);
  require(swt.coverage99_k > s2cl.coverage99_k,
          fmt::format("2cl-wt K99 {} not wider than 2cl K99 {}", swt.coverage99_k,
                      s2cl.coverage99_k));
  return fmt::format("2cl: top1 {:.2f}, K99 {}; 2cl-wt: K99 {} (wider)", s2cl.top1_fraction,
                     s2cl.coverage99_k, swt.coverage99_k);
}

// ---------------------------------------------------------------------------
// 6. Fault injection fidelity.

sim::SimConfig hundred_byte_config(uint32_t server_think) {
  // One client sending exactly one 100-byte frame (4-byte length prefix +
  // 96-byte body: "S k " + 92 value bytes).
  sim::SimConfig cfg;
  cfg.name = "wt-micro";
  sim::KvServerSpec server;
  server.listen = Endpoint::loopback(7100);
  server.connections = 1;
  server.messages_per_connection = 1;
  server.respond = false;
  server.close_children = false;
  server.close_listener = false;
  server.prebound = true;
  server.think = server_think;
  cfg.processes.emplace_back(server);
  sim::KvClientSpec client;
  client.server = server.listen;
  client.commands = {sim::KvCommand{true, "k", 92}};
  client.read_response = false;
  client.close_socket = false;
  client.prebound_socket = true;
  cfg.processes.emplace_back(client);
  return cfg;
}

std::string check_fault_fidelity() {
  // (a) ECONNREFUSED on one client's connect.
  RunLibrary none;
  auto refuse = parse_fault_spec(
      R"([{"target": {"process": 1, "syscall": "connect", "phase": "entry", "occurrence": 1},
           "action": {"errno": "ECONNREFUSED"}}])",
      none);
  auto run = sim::run_simulation(sim::preset("2cl"), 17, refuse);
  bool saw_exit = false;
  run.trace.for_each_event([&](const Event& ev) {
    if (ev.coord.process == 1 && ev.syscall == Syscall::Connect && ev.phase == Phase::Exit) {
      require(!ev.outcome->success() && ev.outcome->err == 111,
              "refused connect-Exit does not carry ECONNREFUSED");
      saw_exit = true;
    }
    if (ev.coord.process == 1)
      require(!ev.args.stream.has_value(), "refused client still touched a stream");
    for (const EventCoord& par : ev.parents)
      require(par.process != 1 && ev.coord.process != 1,
              "an edge touches the refused client");
  });
  require(saw_exit, "no connect-Exit observed for the refused client");

  // (b) Indefinite pause on the server before accept.
  auto pause = parse_fault_spec(
      R"([{"target": {"process": 0, "syscall": "accept", "phase": "entry", "occurrence": 1},
           "action": {"pause": "indefinite"}}])",
      none);
  auto blocked = sim::run_simulation(sim::preset("2cl"), 23, pause);
  require(blocked.trace.finalized(), "blocked run did not finalize");
  blocked.trace.for_each_event([&](const Event& ev) {
    require(!ev.args.stream.has_value(), "a stream formed despite the paused server");
    require(!(ev.syscall == Syscall::Accept && ev.phase == Phase::Exit),
            "an accept completed despite the indefinite pause");
  });
  for (uint32_t p : {1u, 2u}) {
    const Event& last = blocked.trace.log(p, 0).back();
    require(last.syscall == Syscall::Connect && last.phase == Phase::Entry,
            "client not left blocked inside connect");
  }

  // (c) Write truncation at factor 1/2 on a 100-byte write.
  auto half = parse_fault_spec(
      R"([{"target": {"process": 1, "syscall": "write", "phase": "entry", "occurrence": 1},
           "action": {"truncate": {"factor": 0.5}}}])",
      none);
  std::optional<uint64_t> spanning_seed;
  for (uint64_t seed = 0; seed < 200 && !spanning_seed; ++seed) {
    auto faulted = sim::run_simulation(hundred_byte_config(40), seed, half);
    // The first write requests 100 bytes and its Exit reports exactly 50.
    std::optional<uint64_t> first_entry, first_exit;
    for (const Event& ev : faulted.trace.log(1, 0)) {
      if (ev.syscall != Syscall::Write) continue;
      if (ev.phase == Phase::Entry && !first_entry) first_entry = ev.args.bytes.value_or(0);
      if (ev.phase == Phase::Exit && !first_exit) first_exit = ev.args.bytes.value_or(0);
    }
    require(first_entry == 100, "request frame is not 100 bytes");
    require(first_exit == 50, "truncated write did not report width 50");
    for (const Event& ev : faulted.trace.log(0, 0)) {
      if (ev.syscall == Syscall::Read && ev.phase == Phase::Exit && ev.outcome->success() &&
          ev.parents.size() >= 2)
        spanning_seed = seed;
    }
  }
  require(spanning_seed.has_value(), "no schedule produced a read spanning both writes");
  auto baseline = sim::run_simulation(hundred_byte_config(40), *spanning_seed);
  for (const Event& ev : baseline.trace.log(0, 0))
    if (ev.syscall == Syscall::Read && ev.phase == Phase::Exit && ev.outcome->success() &&
        ev.args.bytes.value_or(0) > 0)
      require(ev.parents.size() == 1, "baseline read did not map to exactly one write");
  return fmt::format("refusal, indefinite pause, and truncation all structurally exact "
                     "(spanning seed {})",
                     *spanning_seed);
}

// ---------------------------------------------------------------------------
// 7. Determinism, 100 repeated trials.

std::string check_determinism() {
  for (const char* name : {"2cl", "2cl-wt"}) {
    auto reference = serialize(sim::run_simulation(sim::preset(name), 99).trace);
    for (int trial = 1; trial < 100; ++trial) {
      auto again = serialize(sim::run_simulation(sim::preset(name), 99).trace);
      require(again == reference,
              fmt::format("{} trial {} produced different bytes", name, trial));
    }
  }
  return "2 configs x 100 trials, byte-identical serialized traces";
}

struct Criterion {
  const char* name;
  std::function<std::string()> check;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {"1 oracle-equivalence", check_oracle_equivalence},
      {"2 follow-fingerprint-agreement", check_follow_fingerprint_agreement},
      {"3 happens-before-soundness", check_happens_before_soundness},
      {"4 byte-conservation", check_byte_conservation},
      {"5 distribution-shape", check_distribution_shape},
      {"6 fault-injection-fidelity", check_fault_fidelity},
      {"7 determinism", check_determinism},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    try {
      std::string detail = c.check();
      std::printf("[PASS] %s: %s\n", c.name, detail.c_str());
    } catch (const CriterionFailed& f) {
      std::printf("[FAIL] %s: %s\n", c.name, f.what.c_str());
      ++failures;
    } catch (const std::exception& e) {
      std::printf("[FAIL] %s: unexpected error: %s\n", c.name, e.what());
      ++failures;
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
