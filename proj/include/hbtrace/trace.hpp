#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hbtrace/event.hpp"

namespace hbt {

struct TraceMeta {
  uint64_t seed = 0;
  std::string config;
  uint64_t iteration = 0;
  // Logical milliseconds for simulated runs (derived from scheduler steps so
  // identical inputs serialize identically); wall-clock for live runs.
  uint64_t wall_ms = 0;

  bool operator==(const TraceMeta&) const = default;
};

// Per-thread ordered event logs plus cross-thread communication edges.
// Mutable while open; finalize() computes the run id and freezes it.
class Trace {
 public:
  Trace() = default;
  explicit Trace(TraceMeta meta) : meta_(std::move(meta)) {}

  // Appends at the next index for that thread and returns the coordinate.
  // An Exit requires the thread's previous event to be the matching Entry
  // (Errc::MismatchedPhase otherwise).
  EventCoord append_event(uint32_t process, uint32_t thread, Syscall sc, Phase ph,
                          std::optional<OutcomeClass> outcome, ArgsDigest args);

  // Records a cross-thread causal edge. Rejects same-thread pairs, unknown
  // coordinates, and edges that would create a cycle.
  void add_parent(EventCoord child, EventCoord parent);

  // Ensures the (process, thread) slot exists even if it never logs an event.
  void declare_thread(uint32_t process, uint32_t thread);

  // Computes run_id from the canonical fingerprint and freezes the trace.
  void finalize();

  bool finalized() const { return finalized_; }
  const std::string& run_id() const;

  uint32_t process_count() const { return static_cast<uint32_t>(logs_.size()); }
  uint32_t thread_count(uint32_t process) const;
  const std::vector<Event>& log(uint32_t process, uint32_t thread) const;
  bool contains(EventCoord c) const;
  const Event& at(EventCoord c) const;  // Errc::UnknownCoord if absent
  uint64_t event_count() const { return events_; }

  // Derived (parent, child) pairs, sorted. Exactly the union of all events'
  // parent sets.
  std::vector<std::pair<EventCoord, EventCoord>> edges() const;

  TraceMeta& meta() { return meta_; }
  const TraceMeta& meta() const { return meta_; }

  bool operator==(const Trace& o) const;

  // Visits events in (process, thread, index) order.
  template <class F>
  void for_each_event(F&& fn) const {
    for (const auto& proc : logs_)
      for (const auto& log : proc)
        for (const Event& ev : log) fn(ev);
  }

 private:
  const Event* find(EventCoord c) const;
  Event* find(EventCoord c);
  // True if `from` can reach `to` walking backwards from `to` over parents
  // and in-thread predecessors.
  bool reaches(EventCoord from, EventCoord to) const;
  void require_open() const;

  std::vector<std::vector<std::vector<Event>>> logs_;  // [process][thread]
  TraceMeta meta_;
  std::string run_id_;
  uint64_t events_ = 0;
  bool finalized_ = false;
};

}  // namespace hbt
