#include "hbtrace/recorder.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "hbtrace/errors.hpp"

namespace hbt {

Recorder::Recorder(TraceMeta meta, const RunLibrary* library, FaultEngine* faults)
    : trace_(std::move(meta)),
      tracker_([this](EventCoord parent,
                      EventCoord child) { trace_.add_parent(child, parent); },
               [this](const std::string& msg) { warnings_.push_back(msg); }),
      faults_(faults) {
  if (library) follow_ = FollowSet(*library);
}

void Recorder::preregister_socket(uint32_t process, int32_t fd) {
  tracker_.on_socket(process, fd);
}

void Recorder::preregister_listener(uint32_t process, int32_t fd, Endpoint ep) {
  tracker_.on_socket(process, fd);
  tracker_.on_bind(process, fd, ep);
  tracker_.on_listen(process, fd);
}

void Recorder::declare_thread(uint32_t process, uint32_t thread) {
  trace_.declare_thread(process, thread);
}

std::optional<ResolvedAction> Recorder::dispatch(const Event& ev) {
  // Fault matching runs before the follow cursors advance past this event.
  std::optional<ResolvedAction> action;
  if (faults_) {
    FaultEngine::Context ctx{&follow_, &tracker_};
    action = faults_->match(ctx, ev);
  }
  unsealed_[{ev.coord.process, ev.coord.thread}].push_back(ev.coord);
  seal_ready();
  return action;
}

void Recorder::seal_ready() {
  // Resolve any connect-Exit whose pairing edge has arrived.
  std::erase_if(awaiting_pair_, [&](EventCoord c) {
    return !trace_.at(c).parents.empty();
  });
  for (auto& [thread, queue] : unsealed_) {
    while (!queue.empty()) {
      EventCoord head = queue.front();
      if (std::find(awaiting_pair_.begin(), awaiting_pair_.end(), head) !=
          awaiting_pair_.end())
        break;
      follow_.step(trace_.at(head));
      queue.pop_front();
    }
  }
}

Recorder::Observed Recorder::on_entry(uint32_t process, uint32_t thread, Syscall sc,
                                      ArgsDigest args) {
  EventCoord coord = trace_.append_event(process, thread, sc, Phase::Entry, std::nullopt, args);
  return {coord, dispatch(trace_.at(coord))};
}

void Recorder::track_exit(const Event& ev, const Event& entry) {
  const OutcomeClass& out = *ev.outcome;
  uint32_t p = ev.coord.process;
  switch (ev.syscall) {
    case Syscall::Socket:
      if (out.success() && ev.args.fd) tracker_.on_socket(p, *ev.args.fd);
      break;
    case Syscall::Bind:
      if (out.success() && ev.args.fd && ev.args.ep) tracker_.on_bind(p, *ev.args.fd, *ev.args.ep);
      break;
    case Syscall::Listen:
      if (out.success() && ev.args.fd) tracker_.on_listen(p, *ev.args.fd);
      break;
    case Syscall::Connect:
      if (out.success() && ev.args.fd && ev.args.ep && ev.args.local) {
        tracker_.on_connect_exit(p, *ev.args.fd, *ev.args.local, *ev.args.ep, entry.coord,
                                 ev.coord);
      } else if (ev.args.fd) {
        tracker_.on_connect_failed(p, *ev.args.fd);
      }
      break;
    case Syscall::Accept:
      if (out.success() && ev.args.fd && ev.args.ep && entry.args.fd) {
        tracker_.on_accept_exit(p, *entry.args.fd, *ev.args.fd, *ev.args.ep, ev.args.local,
                                entry.coord, ev.coord);
      }
      break;
    case Syscall::Read:
      if (out.success() && ev.args.fd && ev.args.stream)
        tracker_.on_read_exit_fd(p, *ev.args.fd, ev.coord, ev.args.bytes.value_or(0));
      break;
    case Syscall::Write:
      if (out.success() && ev.args.fd && ev.args.stream)
        tracker_.on_write_exit_fd(p, *ev.args.fd, ev.coord, ev.args.bytes.value_or(0));
      break;
    case Syscall::Close:
      if (ev.args.fd) tracker_.on_close(p, *ev.args.fd);
      break;
  }
}

Recorder::Observed Recorder::on_exit(uint32_t process, uint32_t thread, Syscall sc,
                                     OutcomeClass outcome, ArgsDigest args) {
  bool ok = outcome.success();
  EventCoord coord =
      trace_.append_event(process, thread, sc, Phase::Exit, std::move(outcome), args);
  const Event& ev = trace_.at(coord);
  const Event& entry = trace_.at(EventCoord{process, thread, coord.index - 1});

  // A successful connect may receive its pairing edge only when the accept
  // side is observed; hold its seal until then.
  if (sc == Syscall::Connect && ok) awaiting_pair_.push_back(coord);
  track_exit(ev, entry);
  return {coord, dispatch(ev)};
}

Trace Recorder::finish() {
  // Connects whose accept side never showed up seal as they stand.
  awaiting_pair_.clear();
  seal_ready();
  for (const auto& [thread, queue] : unsealed_)
    if (!queue.empty())
      raise(Errc::QuiescenceWithRunnableWork,
            fmt::format("unsealed events left on thread {}.{}", thread.first, thread.second));
  trace_.finalize();
  return std::move(trace_);
}

}  // namespace hbt
