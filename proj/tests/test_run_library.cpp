#include <doctest.h>

#include <filesystem>

#include "hbtrace/causality.hpp"
#include "hbtrace/errors.hpp"
#include "hbtrace/experiment.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/sim/sim.hpp"

using namespace hbt;
namespace fs = std::filesystem;

namespace {

Trace make_run(std::initializer_list<std::pair<int, Syscall>> ops, int fail_at = -1) {
  // ops: (thread-owner process, syscall); every op becomes an E/X pair.
  Trace t;
  int i = 0;
  for (auto [p, sc] : ops) {
    t.append_event(p, 0, sc, Phase::Entry, std::nullopt, {});
    OutcomeClass out;
    if (i == fail_at) out.err = 111;
    t.append_event(p, 0, sc, Phase::Exit, out, {});
    ++i;
  }
  t.finalize();
  return t;
}

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           fs::path("hbt-test-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_CASE("following tolerates cross-thread interleaving") {
  Trace run = make_run({{0, Syscall::Connect}, {1, Syscall::Accept}});
  RunLibrary lib;
  FollowSet seed_set{};
  lib.finalize_execution(seed_set, Trace(run));

  FollowSet follow(lib);
  // Thread 1 slips its accept-Entry between thread 0's connect pair; the
  // cursor keeps following because per-thread order is what counts.
  const auto& log0 = run.log(0, 0);
  const auto& log1 = run.log(1, 0);
  follow.step(log0[0]);
  follow.step(log1[0]);
  follow.step(log0[1]);
  follow.step(log1[1]);
  REQUIRE(follow.cursors().size() == 1);
  CHECK(follow.cursors()[0].following());
  CHECK(follow.cursors()[0].exhausted());
}

TEST_CASE("an outcome mismatch diverges the cursor") {
  Trace ok = make_run({{0, Syscall::Connect}});
  Trace failed = make_run({{0, Syscall::Connect}}, 0);
  RunLibrary lib;
  lib.finalize_execution(FollowSet{}, Trace(ok));
  FollowSet follow(lib);
  failed.for_each_event([&](const Event& ev) { follow.step(ev); });
  CHECK_FALSE(follow.cursors()[0].following());
}

TEST_CASE("a parent-set mismatch diverges the cursor") {
  Trace with_edge = make_run({{0, Syscall::Accept}, {1, Syscall::Connect}});
  Trace no_edge(with_edge);
  // Only one of the two carries the pairing edge.
  {
    Trace rebuilt;
    with_edge.for_each_event([&](const Event& ev) {
      rebuilt.append_event(ev.coord.process, ev.coord.thread, ev.syscall, ev.phase, ev.outcome,
                           ev.args);
    });
    rebuilt.add_parent(EventCoord{1, 0, 1}, EventCoord{0, 0, 0});
    rebuilt.finalize();
    with_edge = std::move(rebuilt);
  }
  RunLibrary lib;
  lib.finalize_execution(FollowSet{}, Trace(with_edge));
  FollowSet follow(lib);
  no_edge.for_each_event([&](const Event& ev) { follow.step(ev); });
  CHECK_FALSE(follow.cursors()[0].following());
}

TEST_CASE("finalize: replay follows, prefixes and extensions are novel") {
  Trace run = make_run({{0, Syscall::Socket}, {0, Syscall::Close}});
  RunLibrary lib;
  auto first = lib.finalize_execution(FollowSet{}, Trace(run));
  CHECK(first.novel());  // first-ever execution, empty library

  // Identical replay: followed, not re-stored.
  FollowSet follow(lib);
  run.for_each_event([&](const Event& ev) { follow.step(ev); });
  auto replay = lib.finalize_execution(follow, Trace(run));
  CHECK_FALSE(replay.novel());
  CHECK(replay.run_id == run.run_id());
  CHECK(lib.size() == 1);
  CHECK(lib.count_of(run.run_id()) == 2);

  // A strict prefix (crashed early) is its own, novel run.
  Trace prefix = make_run({{0, Syscall::Socket}});
  FollowSet follow2(lib);
  prefix.for_each_event([&](const Event& ev) { follow2.step(ev); });
  auto res = lib.finalize_execution(follow2, Trace(prefix));
  CHECK(res.novel());
  CHECK(lib.size() == 2);
}

TEST_CASE("two fully-followed runs signal a fingerprint bug") {
  Trace run = make_run({{0, Syscall::Socket}});
  RunLibrary lib;
  lib.finalize_execution(FollowSet{}, Trace(run));
  // Hand-build an ambiguous cursor set: the same stored run twice, as a
  // corrupted library would produce it.
  FollowSet both(std::vector<FollowCursor>{FollowCursor("bogus-copy", lib.find(run.run_id())),
                                           FollowCursor(run.run_id(), lib.find(run.run_id()))});
  run.for_each_event([&](const Event& ev) { both.step(ev); });
  try {
    lib.finalize_execution(both, Trace(run));
    FAIL("expected AmbiguousFollow");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::AmbiguousFollow);
  }
}

TEST_CASE("a followed cursor disagreeing with the fingerprint is an internal error") {
  Trace a = make_run({{0, Syscall::Socket}});
  Trace b = make_run({{0, Syscall::Socket}, {0, Syscall::Close}});
  RunLibrary lib;
  lib.finalize_execution(FollowSet{}, Trace(a));
  FollowSet follow(lib);
  a.for_each_event([&](const Event& ev) { follow.step(ev); });
  // The cursor claims `a` was followed, but the finished trace is `b`.
  try {
    lib.finalize_execution(follow, Trace(b));
    FAIL("expected AmbiguousFollow");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::AmbiguousFollow);
  }
}

TEST_CASE("distribution report: counts, order, cumulative fractions") {
  Trace a = make_run({{0, Syscall::Socket}});
  Trace b = make_run({{0, Syscall::Socket}, {0, Syscall::Close}});
  RunLibrary lib;
  lib.merge_run(Trace(a));
  lib.merge_run(Trace(a));
  lib.merge_run(Trace(a));
  lib.merge_run(Trace(b));
  auto rows = lib.distribution_report();
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].run_id == a.run_id());
  CHECK(rows[0].count == 3);
  CHECK(rows[0].cumulative_fraction == doctest::Approx(0.75));
  CHECK(rows[1].count == 1);
  CHECK(rows[1].cumulative_fraction == doctest::Approx(1.0));
}

TEST_CASE("a single run over N iterations reports (N, 1.0)") {
  Trace a = make_run({{0, Syscall::Socket}});
  RunLibrary lib;
  for (int i = 0; i < 5; ++i) lib.merge_run(Trace(a));
  auto rows = lib.distribution_report();
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].count == 5);
  CHECK(rows[0].cumulative_fraction == doctest::Approx(1.0));
}

TEST_CASE("an empty library cannot report") {
  RunLibrary lib;
  CHECK_THROWS_AS(lib.distribution_report(), Error);
}

TEST_CASE("persistence: novel runs land on disk and reload with their counts") {
  TmpDir dir;
  Trace a = make_run({{0, Syscall::Socket}});
  Trace b = make_run({{0, Syscall::Socket}, {0, Syscall::Close}});
  {
    RunLibrary lib = RunLibrary::open(dir.path);
    lib.merge_run(Trace(a));
    lib.merge_run(Trace(a));
    lib.merge_run(Trace(b));
  }
  CHECK(fs::exists(dir.path / (a.run_id() + ".trace")));
  CHECK(fs::exists(dir.path / "index.txt"));

  RunLibrary back = RunLibrary::open(dir.path);
  CHECK(back.size() == 2);
  CHECK(back.count_of(a.run_id()) == 2);
  CHECK(back.count_of(b.run_id()) == 1);
  CHECK(back.iterations() == 3);
  CHECK(*back.find(a.run_id()) == a);
}

TEST_CASE("rerunning the same loop over a persisted library adds no runs") {
  TmpDir dir;
  ExperimentConfig cfg;
  cfg.system = sim::preset("2cl");
  cfg.iterations = 40;
  {
    RunLibrary lib = RunLibrary::open(dir.path);
    run_loop(lib, cfg);
  }
  size_t first_size;
  {
    RunLibrary lib = RunLibrary::open(dir.path);
    first_size = lib.size();
    LoopSummary again = run_loop(lib, cfg);
    CHECK(again.novel == 0);  // every schedule is already known
    CHECK(lib.size() == first_size);
    CHECK(lib.iterations() == 80);
  }
}

TEST_CASE("parallel workers produce the same library as one worker") {
  ExperimentConfig cfg;
  cfg.system = sim::preset("2cl");
  cfg.iterations = 120;

  RunLibrary serial;
  run_loop(serial, cfg);

  ExperimentConfig par = cfg;
  par.jobs = 4;
  RunLibrary parallel;
  run_loop(parallel, par);

  CHECK(serial.size() == parallel.size());
  CHECK(serial.iterations() == parallel.iterations());
  serial.for_each_run([&](const std::string& id, const Trace&) {
    CHECK(parallel.count_of(id) == serial.count_of(id));
  });
}
