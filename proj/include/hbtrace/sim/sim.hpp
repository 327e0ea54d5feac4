#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "hbtrace/endpoint.hpp"
#include "hbtrace/fault.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/trace.hpp"

namespace hbt::sim {

// A deterministic, seeded multi-process simulation with TCP blocking
// semantics: accept completes only against a pending connect, connect
// completes only once an accept invocation picked it up, reads block until
// bytes are buffered or the peer closed. Simulated buffers are unbounded, so
// writes never block; congestion is produced through write-truncation fault
// rules instead. Every abstract syscall feeds Entry/Exit events through the
// shared Recorder pipeline exactly as a live tracer would.

struct KvCommand {
  bool set = false;
  std::string key;
  uint32_t value_bytes = 24;
};

// Single-threaded event-loop server speaking the length-prefixed key/value
// protocol (docs/configs.md). Readiness choices between the listener and
// readable connections are scheduler decisions.
struct KvServerSpec {
  Endpoint listen = Endpoint::loopback(6379);
  uint32_t connections = 1;
  // 0 = serve until the client closes (EOF); otherwise stop watching a
  // connection after this many requests.
  uint32_t messages_per_connection = 0;
  bool respond = true;
  bool watch_connections = true;  // false: pure acceptor, never reads
  bool close_children = true;
  bool close_listener = true;
  bool prebound = false;  // listening socket exists before tracing starts
  uint32_t think = 0;     // compute steps before the loop
};

struct KvClientSpec {
  Endpoint server = Endpoint::loopback(6379);
  std::vector<KvCommand> commands;
  bool read_response = true;
  bool close_socket = true;
  bool prebound_socket = false;
  uint32_t think = 0;
};

// socket + close and some compute steps; communicates with nobody.
struct LonerSpec {
  uint32_t computes = 0;
};

using ProcessSpec = std::variant<KvServerSpec, KvClientSpec, LonerSpec>;

struct SimConfig {
  std::string name;
  std::vector<ProcessSpec> processes;
  uint32_t steps_per_ms = 1;  // pause granularity: logical time is steps
  std::vector<FaultRule> builtin_faults;
};

struct SimRun {
  Trace trace;
  FollowSet follow;
  std::vector<std::string> warnings;
  uint64_t steps = 0;
};

// Executes until every process exited or nothing can run (global
// quiescence). Identical (seed, config, fault rules) produce byte-identical
// serialized traces. `library` activates follow cursors, which coordinate
// fault targets need.
SimRun run_simulation(const SimConfig& config, uint64_t seed,
                      const std::vector<FaultRule>& extra_rules = {},
                      const RunLibrary* library = nullptr, uint64_t iteration = 0);

struct Enumeration {
  std::vector<Trace> distinct_traces;  // deduplicated by structural equality
  std::vector<uint64_t> multiplicity;  // schedules per distinct trace
  uint64_t schedules = 0;
};

// Depth-first exploration of every scheduler choice sequence. The oracle for
// small instances; throws Errc::BoundExceeded past the limits.
Enumeration enumerate_all_schedules(const SimConfig& config, uint64_t max_events = 64,
                                    uint64_t max_schedules = 2000000);

// Named presets: 1cl, 2cl, 2cl-mc, 4cl, 2cl-wt, pair, s1c2, indep.
SimConfig preset(std::string_view name);
std::vector<std::string> preset_names();
SimConfig redis_like_config(uint32_t num_clients, uint32_t commands_per_client);

SimConfig load_config_file(const std::filesystem::path& path);
// Resolves a preset name or a config file path.
SimConfig resolve_config(const std::string& name_or_path);

}  // namespace hbt::sim
