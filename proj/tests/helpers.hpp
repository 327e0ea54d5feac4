#pragma once

#include <map>
#include <random>
#include <set>
#include <vector>

#include "hbtrace/errors.hpp"
#include "hbtrace/trace.hpp"

namespace hbt::testing {

// Brute-force reachability over the same relation a trace encodes: in-thread
// successor chains plus parent edges. Deliberately independent of
// CausalGraph; this is the oracle its bitsets are checked against.
class ClosureOracle {
 public:
  explicit ClosureOracle(const Trace& trace) {
    trace.for_each_event([&](const Event& ev) {
      size_t id = index_.size();
      index_.emplace(ev.coord, id);
      coords_.push_back(ev.coord);
    });
    size_t n = coords_.size();
    reach_.assign(n, std::vector<bool>(n, false));
    trace.for_each_event([&](const Event& ev) {
      size_t to = index_.at(ev.coord);
      if (ev.coord.index > 0)
        reach_[index_.at(EventCoord{ev.coord.process, ev.coord.thread, ev.coord.index - 1})][to] =
            true;
      for (const EventCoord& p : ev.parents) reach_[index_.at(p)][to] = true;
    });
    // Floyd-Warshall transitive closure.
    for (size_t k = 0; k < n; ++k)
      for (size_t i = 0; i < n; ++i) {
        if (!reach_[i][k]) continue;
        for (size_t j = 0; j < n; ++j)
          if (reach_[k][j]) reach_[i][j] = true;
      }
  }

  bool path(EventCoord a, EventCoord b) const { return reach_[index_.at(a)][index_.at(b)]; }

 private:
  std::map<EventCoord, size_t> index_;
  std::vector<EventCoord> coords_;
  std::vector<std::vector<bool>> reach_;
};

// Random traces for property tests: a few threads of paired entry/exit
// events plus random acyclic cross-thread edges. Cycle rejections are
// cross-checked against the oracle by the caller when wanted.
inline Trace random_trace(std::mt19937_64& rng, uint32_t max_events = 64) {
  auto pick = [&](uint64_t n) { return static_cast<uint32_t>(rng() % n); };
  Trace t;
  uint32_t procs = 1 + pick(3);
  std::vector<std::vector<uint32_t>> threads(procs);
  uint32_t budget = 4 + pick(max_events - 3);

  struct Slot {
    uint32_t p, th;
  };
  std::vector<Slot> slots;
  for (uint32_t p = 0; p < procs; ++p) {
    uint32_t nt = 1 + pick(2);
    for (uint32_t th = 0; th < nt; ++th) slots.push_back({p, th});
  }
  static const Syscall kinds[] = {Syscall::Socket, Syscall::Connect, Syscall::Read,
                                  Syscall::Write,  Syscall::Accept,  Syscall::Close};
  std::vector<EventCoord> all;
  while (all.size() + 2 <= budget) {
    const Slot& s = slots[pick(slots.size())];
    Syscall sc = kinds[pick(6)];
    ArgsDigest args;
    args.fd = static_cast<int32_t>(pick(8));
    all.push_back(t.append_event(s.p, s.th, sc, Phase::Entry, std::nullopt, args));
    OutcomeClass out;
    if (pick(5) == 0) out.err = 111;
    all.push_back(t.append_event(s.p, s.th, sc, Phase::Exit, out, args));
  }

  uint32_t tries = pick(static_cast<uint64_t>(all.size()) + 1);
  for (uint32_t i = 0; i < tries; ++i) {
    EventCoord a = all[pick(all.size())];
    EventCoord b = all[pick(all.size())];
    if (a.same_thread_as(b)) continue;
    try {
      t.add_parent(b, a);
    } catch (const Error&) {
      // cycle rejected; the oracle-based test validates these separately
    }
  }
  return t;
}

}  // namespace hbt::testing
