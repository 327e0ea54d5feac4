#pragma once

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hbtrace/fault.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/stream_tracker.hpp"
#include "hbtrace/trace.hpp"

namespace hbt {

// The shared event pipeline both event sources (simulator and live tracer)
// feed: appends events, derives communication edges through the stream
// tracker, matches fault rules, and advances the follow cursors.
//
// Follow comparison consumes an event only once it is "sealed", i.e. no
// further parents can attach. The only event whose parents can arrive late
// is a successful connect-Exit: its pairing edge lands when the accept side
// resolves the 4-tuple, which may be after later events on other threads.
// Everything else seals immediately, and per-thread seal order equals log
// order, so following still sees each thread's events in sequence.
class Recorder {
 public:
  Recorder(TraceMeta meta, const RunLibrary* library, FaultEngine* faults);

  struct Observed {
    EventCoord coord;
    std::optional<ResolvedAction> action;
  };

  Observed on_entry(uint32_t process, uint32_t thread, Syscall sc, ArgsDigest args);
  Observed on_exit(uint32_t process, uint32_t thread, Syscall sc, OutcomeClass outcome,
                   ArgsDigest args);

  // Registers a socket that existed before tracing started (a prebound
  // listener or client socket); emits no events.
  void preregister_socket(uint32_t process, int32_t fd);
  void preregister_listener(uint32_t process, int32_t fd, Endpoint ep);

  void declare_thread(uint32_t process, uint32_t thread);
  void set_wall_ms(uint64_t ms) { trace_.meta().wall_ms = ms; }

  // Flushes pending seals and freezes the trace.
  Trace finish();

  const Trace& trace() const { return trace_; }
  const StreamTracker& tracker() const { return tracker_; }
  const FollowSet& follow() const { return follow_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::optional<ResolvedAction> dispatch(const Event& ev);
  void seal_ready();
  void track_exit(const Event& ev, const Event& entry);

  Trace trace_;
  StreamTracker tracker_;
  FollowSet follow_;
  FaultEngine* faults_;
  std::vector<std::string> warnings_;
  // Appended-but-unsealed coordinates per thread, oldest first.
  std::map<std::pair<uint32_t, uint32_t>, std::deque<EventCoord>> unsealed_;
  // Successful connect-Exits still waiting for their pairing edge.
  std::vector<EventCoord> awaiting_pair_;
};

}  // namespace hbt
