#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "hbtrace/event.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/stream_tracker.hpp"

namespace hbt {

// "After thread T does x" addressing into a loaded run. Matches only while
// that run's cursor is still Following.
struct CoordTarget {
  std::string run_id;
  EventCoord coord;
};

// (process, syscall, phase, occurrence ordinal). occurrence is 1-based;
// nullopt matches every occurrence (used for blanket rules like the
// congestion presets).
struct PredTarget {
  uint32_t process = 0;
  Syscall syscall = Syscall::Write;
  Phase phase = Phase::Entry;
  std::optional<uint32_t> occurrence = 1;
};

using FaultTarget = std::variant<CoordTarget, PredTarget>;

struct PauseAction {
  std::optional<uint64_t> ms;  // nullopt = indefinite
};

// Explicit error: at Entry the operative argument is invalidated so the real
// call cannot succeed; at the paired Exit the result becomes -code. Only
// connect, read, write and accept carry mutation recipes.
struct ErrnoAction {
  int code = 0;
};

// Write-count mutation. Factor and the random fraction both live in
// (0, 1/2]; a mutated count never drops below 1 byte.
struct TruncateAction {
  std::optional<double> factor;  // fixed
  bool random = false;
  double probability = 1.0;  // chance a matching write is truncated at all
};

// Composite: after the trigger fires, sends crossing the two process groups
// fail with `code` until the heal target fires (if given). Expanded from the
// spec file's "partition" action.
struct PartitionAction {
  std::vector<uint32_t> group_a;
  std::vector<uint32_t> group_b;
  int code = 0;
  std::optional<FaultTarget> heal;
};

using FaultAction = std::variant<PauseAction, ErrnoAction, TruncateAction, PartitionAction>;

struct FaultRule {
  FaultTarget target;
  FaultAction action;
};

// Parses the JSON fault document (see docs/fault-specs.md). Coordinate
// targets are validated against the library; errno/truncate actions against
// the per-syscall recipe table.
std::vector<FaultRule> parse_fault_spec(const std::string& text, const RunLibrary& library);

int errno_from_name(const std::string& name);  // Errc::MalformedRule if unknown
const char* errno_name(int code);
bool errno_supported_syscall(Syscall sc);

// What the event source is told to do right now.
struct ResolvedPause {
  std::optional<uint64_t> ms;
};
struct ResolvedErrno {
  int code = 0;
};
struct ResolvedTruncate {
  uint64_t count = 0;  // the mutated write count
};
using ResolvedAction = std::variant<ResolvedPause, ResolvedErrno, ResolvedTruncate>;

uint64_t truncated_count(const TruncateAction& rule, uint64_t requested, std::mt19937_64& rng);

// Per-execution matcher. Invoked once per observed event, between event
// observation and process resumption; returns the first matching rule's
// action. Coordinate rules fire at most once.
class FaultEngine {
 public:
  FaultEngine(std::vector<FaultRule> rules, uint64_t seed);

  struct Context {
    const FollowSet* follow = nullptr;
    const StreamTracker* tracker = nullptr;
  };

  std::optional<ResolvedAction> match(const Context& ctx, const Event& ev);

  bool any_rules() const { return !slots_.empty(); }

 private:
  struct Slot {
    FaultRule rule;
    bool fired = false;
    bool partition_active = false;
  };

  bool target_matches(const FaultTarget& target, const Context& ctx, const Event& ev);
  std::optional<uint32_t> peer_process(const Context& ctx, const Event& ev) const;

  std::vector<Slot> slots_;
  std::mt19937_64 rng_;
  std::map<std::tuple<uint32_t, Syscall, Phase>, uint32_t> occurrences_;
};

}  // namespace hbt
