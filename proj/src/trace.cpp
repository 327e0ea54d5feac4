#include "hbtrace/trace.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <vector>

#include "hbtrace/causality.hpp"
#include "hbtrace/errors.hpp"

namespace hbt {

void Trace::require_open() const {
  if (finalized_) raise(Errc::TraceFinalized, "trace is finalized and immutable");
}

void Trace::declare_thread(uint32_t process, uint32_t thread) {
  require_open();
  if (logs_.size() <= process) logs_.resize(process + 1);
  if (logs_[process].size() <= thread) logs_[process].resize(thread + 1);
}

EventCoord Trace::append_event(uint32_t process, uint32_t thread, Syscall sc, Phase ph,
                               std::optional<OutcomeClass> outcome, ArgsDigest args) {
  require_open();
  declare_thread(process, thread);
  auto& log = logs_[process][thread];
  if (ph == Phase::Entry && outcome)
    raise(Errc::MismatchedPhase, "an Entry event carries no outcome");
  if (ph == Phase::Exit) {
    if (log.empty() || log.back().phase != Phase::Entry || log.back().syscall != sc)
      raise(Errc::MismatchedPhase,
            fmt::format("{}-Exit on {}.{} has no matching Entry", syscall_name(sc), process,
                        thread));
    if (!outcome) raise(Errc::MismatchedPhase, "an Exit event requires an outcome");
  }
  EventCoord coord{process, thread, static_cast<uint32_t>(log.size())};
  log.push_back(Event{coord, sc, ph, std::move(outcome), std::move(args), {}});
  ++events_;
  return coord;
}

const Event* Trace::find(EventCoord c) const {
  if (c.process >= logs_.size()) return nullptr;
  if (c.thread >= logs_[c.process].size()) return nullptr;
  const auto& log = logs_[c.process][c.thread];
  if (c.index >= log.size()) return nullptr;
  return &log[c.index];
}

Event* Trace::find(EventCoord c) {
  return const_cast<Event*>(static_cast<const Trace*>(this)->find(c));
}

bool Trace::contains(EventCoord c) const { return find(c) != nullptr; }

const Event& Trace::at(EventCoord c) const {
  const Event* ev = find(c);
  if (!ev) raise(Errc::UnknownCoord, c.str());
  return *ev;
}

bool Trace::reaches(EventCoord from, EventCoord to) const {
  // Walk backwards from `to` over in-thread predecessors and parent edges.
  std::vector<EventCoord> stack{to};
  std::vector<EventCoord> seen;
  while (!stack.empty()) {
    EventCoord cur = stack.back();
    stack.pop_back();
    if (cur == from) return true;
    if (std::find(seen.begin(), seen.end(), cur) != seen.end()) continue;
    seen.push_back(cur);
    if (cur.index > 0) stack.push_back(EventCoord{cur.process, cur.thread, cur.index - 1});
    for (const EventCoord& p : at(cur).parents) stack.push_back(p);
  }
  return false;
}

void Trace::add_parent(EventCoord child, EventCoord parent) {
  require_open();
  if (!contains(child)) raise(Errc::UnknownCoord, child.str());
  if (!contains(parent)) raise(Errc::UnknownCoord, parent.str());
  if (parent.same_thread_as(child))
    raise(Errc::SameThread,
          fmt::format("{} and {} are on the same thread", parent.str(), child.str()));
  auto& parents = find(child)->parents;
  if (std::find(parents.begin(), parents.end(), parent) != parents.end()) return;
  if (reaches(child, parent))
    raise(Errc::WouldCreateCycle,
          fmt::format("edge {} -> {} closes a cycle", parent.str(), child.str()));
  parents.insert(std::upper_bound(parents.begin(), parents.end(), parent), parent);
}

void Trace::finalize() {
  require_open();
  run_id_ = run_id_of(*this);
  finalized_ = true;
}

const std::string& Trace::run_id() const {
  if (!finalized_) raise(Errc::TraceNotFinalized, "run_id is computed at finalize");
  return run_id_;
}

uint32_t Trace::thread_count(uint32_t process) const {
  if (process >= logs_.size()) return 0;
  return static_cast<uint32_t>(logs_[process].size());
}

const std::vector<Event>& Trace::log(uint32_t process, uint32_t thread) const {
  if (process >= logs_.size() || thread >= logs_[process].size())
    raise(Errc::UnknownCoord, fmt::format("no thread {}.{}", process, thread));
  return logs_[process][thread];
}

std::vector<std::pair<EventCoord, EventCoord>> Trace::edges() const {
  std::vector<std::pair<EventCoord, EventCoord>> out;
  for_each_event([&](const Event& ev) {
    for (const EventCoord& p : ev.parents) out.emplace_back(p, ev.coord);
  });
  std::sort(out.begin(), out.end());
  return out;
}

bool Trace::operator==(const Trace& o) const {
  return finalized_ == o.finalized_ && meta_ == o.meta_ && run_id_ == o.run_id_ &&
         logs_ == o.logs_;
}

}  // namespace hbt
