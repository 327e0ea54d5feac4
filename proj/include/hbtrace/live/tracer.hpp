#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hbtrace/fault.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/trace.hpp"

namespace hbt::live {

// Traces real processes through ptrace syscall stops (Linux/x86-64 only,
// feature-gated behind HBTRACE_LIVE). Each stop is handled in full before
// the thread resumes; socket endpoints are resolved by making the tracee
// execute getsockname/getpeername through its own syscall instruction, with
// registers restored afterwards. Feeds the same Recorder pipeline as the
// simulator.
struct TraceOptions {
  std::vector<std::vector<std::string>> commands;  // one tracee per command
  uint64_t launch_delay_ms = 200;  // stagger so servers are listening first
  uint64_t max_wall_ms = 15000;    // hard stop; a blocked run finalizes as-is
  std::string config_name = "live";
  uint64_t seed = 0;
  std::vector<FaultRule> faults;
};

struct LiveRun {
  Trace trace;
  FollowSet follow;
  std::vector<std::string> warnings;
};

// Launches and traces every command; returns the finalized trace. Throws
// Errc::AttachDenied when the host forbids process tracing. A tracee dying
// unexpectedly is a warning; the partial trace still finalizes.
LiveRun trace_processes(const TraceOptions& options, const RunLibrary* library);

std::vector<std::string> split_command(const std::string& line);

}  // namespace hbt::live
