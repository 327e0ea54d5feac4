#include <doctest.h>
#include <fmt/format.h>

#include <cerrno>
#include <random>

#include "hbtrace/errors.hpp"
#include "hbtrace/fault.hpp"
#include "hbtrace/sim/sim.hpp"

using namespace hbt;

namespace {

RunLibrary library_with_2cl_run(std::string* id_out) {
  RunLibrary lib;
  auto run = sim::run_simulation(sim::preset("2cl"), 1);
  if (id_out) *id_out = run.trace.run_id();
  lib.merge_run(std::move(run.trace));
  return lib;
}

Event synthetic(uint32_t process, Syscall sc, Phase ph, uint32_t index = 0) {
  Event ev;
  ev.coord = EventCoord{process, 0, index};
  ev.syscall = sc;
  ev.phase = ph;
  if (ph == Phase::Exit) ev.outcome = OutcomeClass{};
  return ev;
}

}  // namespace

TEST_CASE("parsing: coordinate rule with errno against a loaded run") {
  std::string id;
  RunLibrary lib = library_with_2cl_run(&id);
  // Event 2 on the first client's thread is its connect-Entry.
  std::string doc = fmt::format(
      R"([{{"target": {{"run": "{}", "process": 1, "thread": 0, "event": 2}},
           "action": {{"errno": "ECONNREFUSED"}}}}])",
      id);
  auto rules = parse_fault_spec(doc, lib);
  REQUIRE(rules.size() == 1);
  const auto& coord = std::get<CoordTarget>(rules[0].target);
  CHECK(coord.run_id == id);
  CHECK(coord.coord == EventCoord{1, 0, 2});
  CHECK(std::get<ErrnoAction>(rules[0].action).code == ECONNREFUSED);
}

TEST_CASE("parsing: pause rules, indefinite and finite") {
  RunLibrary lib;
  auto rules = parse_fault_spec(
      R"([{"target": {"process": 0, "syscall": "write", "phase": "entry", "occurrence": 3},
           "action": {"pause_ms": 100}},
          {"target": {"process": 0, "syscall": "accept", "phase": "entry", "occurrence": 1},
           "action": {"pause": "indefinite"}}])",
      lib);
  REQUIRE(rules.size() == 2);
  CHECK(std::get<PauseAction>(rules[0].action).ms == 100);
  CHECK_FALSE(std::get<PauseAction>(rules[1].action).ms.has_value());
  CHECK(std::get<PredTarget>(rules[1].target).occurrence == 1);
}

TEST_CASE("parsing: errno on bind has no recipe") {
  RunLibrary lib;
  try {
    parse_fault_spec(
        R"([{"target": {"process": 0, "syscall": "bind", "phase": "entry", "occurrence": 1},
             "action": {"errno": "EIO"}}])",
        lib);
    FAIL("expected UnsupportedSyscallForErrno");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnsupportedSyscallForErrno);
  }
}

TEST_CASE("parsing: unknown runs and malformed rules are rejected") {
  RunLibrary lib;
  CHECK_THROWS_AS(parse_fault_spec(
                      R"([{"target": {"run": "nope", "process": 0, "thread": 0, "event": 0},
                           "action": {"errno": "EIO"}}])",
                      lib),
                  Error);
  try {
    parse_fault_spec(R"([{"target": {"process": 0}, "action": {"errno": "EIO"}}])", lib);
    FAIL("expected MalformedRule");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MalformedRule);
  }
  CHECK_THROWS_AS(parse_fault_spec("not json", lib), Error);
  CHECK_THROWS_AS(parse_fault_spec(R"([{"target": {"process": 0, "syscall": "write",
                    "phase": "entry", "occurrence": 1}, "action": {}}])",
                                   lib),
                  Error);
  // Truncation factors beyond 1/2 are out of contract.
  CHECK_THROWS_AS(parse_fault_spec(R"([{"target": {"process": 0, "syscall": "write",
                    "phase": "entry", "occurrence": 1}, "action": {"truncate": {"factor": 0.9}}}])",
                                   lib),
                  Error);
}

TEST_CASE("truncation arithmetic: halving, floor of one byte, bounded fractions") {
  std::mt19937_64 rng(1);
  TruncateAction half;
  half.factor = 0.5;
  CHECK(truncated_count(half, 100, rng) == 50);
  CHECK(truncated_count(half, 1, rng) == 1);
  CHECK(truncated_count(half, 0, rng) == 0);
  CHECK(truncated_count(half, 3, rng) == 1);

  TruncateAction random;
  random.random = true;
  for (int i = 0; i < 2000; ++i) {
    uint64_t n = truncated_count(random, 1000, rng);
    CHECK(n >= 1);
    CHECK(n <= 500);  // fraction capped at 1/2
  }
}

TEST_CASE("predicate occurrence counting fires on exactly the nth event") {
  RunLibrary lib;
  auto rules = parse_fault_spec(
      R"([{"target": {"process": 0, "syscall": "write", "phase": "entry", "occurrence": 3},
           "action": {"pause_ms": 5}}])",
      lib);
  FaultEngine engine(rules, 7);
  FaultEngine::Context ctx;
  CHECK_FALSE(engine.match(ctx, synthetic(0, Syscall::Write, Phase::Entry, 0)));
  CHECK_FALSE(engine.match(ctx, synthetic(0, Syscall::Write, Phase::Entry, 2)));
  auto hit = engine.match(ctx, synthetic(0, Syscall::Write, Phase::Entry, 4));
  REQUIRE(hit.has_value());
  CHECK(std::get<ResolvedPause>(*hit).ms == 5);
  // Wrong process or phase never counts.
  CHECK_FALSE(engine.match(ctx, synthetic(1, Syscall::Write, Phase::Entry, 0)));
  CHECK_FALSE(engine.match(ctx, synthetic(0, Syscall::Write, Phase::Exit, 1)));
}

TEST_CASE("coordinate rules require a following run and fire at most once") {
  std::string id;
  RunLibrary lib = library_with_2cl_run(&id);
  std::string doc = fmt::format(
      R"([{{"target": {{"run": "{}", "process": 1, "thread": 0, "event": 0}},
           "action": {{"pause_ms": 1}}}}])",
      id);
  auto rules = parse_fault_spec(doc, lib);

  SUBCASE("fires while following, once") {
    FaultEngine engine(rules, 0);
    FollowSet follow(lib);
    FaultEngine::Context ctx{&follow, nullptr};
    Event ev = synthetic(1, Syscall::Socket, Phase::Entry, 0);
    CHECK(engine.match(ctx, ev).has_value());
    CHECK_FALSE(engine.match(ctx, ev).has_value());  // at-most-once
  }

  SUBCASE("a diverged run stops matching") {
    FaultEngine engine(rules, 0);
    FollowSet follow(lib);
    // Diverge the cursor with an event the stored run never had.
    follow.step(synthetic(0, Syscall::Close, Phase::Entry, 0));
    REQUIRE_FALSE(follow.cursors()[0].following());
    FaultEngine::Context ctx{&follow, nullptr};
    CHECK_FALSE(engine.match(ctx, synthetic(1, Syscall::Socket, Phase::Entry, 0)).has_value());
  }
}

TEST_CASE("rules are ordered: the first match wins, one action per event") {
  RunLibrary lib;
  auto rules = parse_fault_spec(
      R"([{"target": {"process": 0, "syscall": "write", "phase": "entry", "occurrence": 1},
           "action": {"pause_ms": 1}},
          {"target": {"process": 0, "syscall": "write", "phase": "entry", "occurrence": "any"},
           "action": {"errno": "EPIPE"}}])",
      lib);
  FaultEngine engine(rules, 0);
  FaultEngine::Context ctx;
  auto first = engine.match(ctx, synthetic(0, Syscall::Write, Phase::Entry, 0));
  REQUIRE(first.has_value());
  CHECK(std::holds_alternative<ResolvedPause>(*first));
  auto second = engine.match(ctx, synthetic(0, Syscall::Write, Phase::Entry, 2));
  REQUIRE(second.has_value());
  CHECK(std::holds_alternative<ResolvedErrno>(*second));
}

TEST_CASE("partitions activate on the trigger, drop crossing sends, and heal") {
  RunLibrary lib;
  auto rules = parse_fault_spec(
      R"([{"target": {"process": 0, "syscall": "read", "phase": "exit", "occurrence": 1},
           "action": {"partition": {"groups": [[0], [1]], "errno": "ECONNRESET",
                      "heal": {"process": 0, "syscall": "read", "phase": "exit",
                               "occurrence": 2}}}}])",
      lib);
  FaultEngine engine(rules, 0);

  // A paired stream between processes 0 and 1 so crossing can be resolved.
  StreamTracker tracker([](EventCoord, EventCoord) {}, {});
  tracker.on_socket(0, 3);
  tracker.on_bind(0, 3, Endpoint::parse("127.0.0.1:6379"));
  tracker.on_listen(0, 3);
  tracker.on_connect_exit(1, 3, Endpoint::parse("127.0.0.1:50100"),
                          Endpoint::parse("127.0.0.1:6379"), EventCoord{1, 0, 0},
                          EventCoord{1, 0, 1});
  tracker.on_accept_exit(0, 3, 4, Endpoint::parse("127.0.0.1:50100"), std::nullopt,
                         EventCoord{0, 0, 0}, EventCoord{0, 0, 1});
  FaultEngine::Context ctx{nullptr, &tracker};

  Event write1 = synthetic(1, Syscall::Write, Phase::Entry, 2);
  write1.args.fd = 3;
  CHECK_FALSE(engine.match(ctx, write1).has_value());  // not yet triggered

  CHECK_FALSE(engine.match(ctx, synthetic(0, Syscall::Read, Phase::Exit, 3)).has_value());
  auto dropped = engine.match(ctx, write1);
  REQUIRE(dropped.has_value());
  CHECK(std::get<ResolvedErrno>(*dropped).code == ECONNRESET);

  // Healing removes the rules; sends flow again.
  CHECK_FALSE(engine.match(ctx, synthetic(0, Syscall::Read, Phase::Exit, 5)).has_value());
  CHECK_FALSE(engine.match(ctx, write1).has_value());
}

TEST_CASE("errno names map to codes and unknown names are malformed") {
  CHECK(errno_from_name("ECONNREFUSED") == ECONNREFUSED);
  CHECK(errno_from_name("ETIMEDOUT") == ETIMEDOUT);
  CHECK(errno_from_name("104") == 104);
  CHECK_THROWS_AS(errno_from_name("EWHATEVER"), Error);
  CHECK_THROWS_AS(errno_from_name("-3"), Error);
}
