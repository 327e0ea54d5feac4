#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hbtrace/endpoint.hpp"

namespace hbt {

// The socket syscall family the tracer understands. Variants are normalized
// at decode time: send -> Write, recv -> Read, accept4 -> Accept.
enum class Syscall : uint8_t {
  Socket,
  Bind,
  Listen,
  Accept,
  Connect,
  Read,
  Write,
  Close,
};

const char* syscall_name(Syscall sc);
std::optional<Syscall> syscall_from_name(std::string_view name);

enum class Phase : uint8_t { Entry, Exit };

inline const char* phase_name(Phase ph) { return ph == Phase::Entry ? "E" : "X"; }

// Addresses one position in one thread's event log. process is the launch
// ordinal from the experiment config, thread the creation ordinal within the
// process, index the gapless position in that thread's log.
struct EventCoord {
  uint32_t process = 0;
  uint32_t thread = 0;
  uint32_t index = 0;

  auto operator<=>(const EventCoord&) const = default;

  bool same_thread_as(const EventCoord& o) const {
    return process == o.process && thread == o.thread;
  }
  std::string str() const;  // "p.t.i"
};

// Success or a specific errno. `peer` is an optional semantic detail (the
// accepted peer endpoint); it is excluded from the matching key.
struct OutcomeClass {
  int err = 0;  // 0 = success, otherwise a positive errno value
  std::optional<Endpoint> peer;

  bool success() const { return err == 0; }
  bool operator==(const OutcomeClass&) const = default;
};

// Semantic argument summary. Which fields are set depends on the syscall:
//   socket      X: fd
//   bind        E/X: fd, ep (local address)
//   listen      E/X: fd
//   connect     E: fd, ep (destination); X adds local (source endpoint)
//   accept      E: fd (listener); X: fd (new descriptor), ep (peer), local
//   read/write  E: fd, bytes (requested), stream; X: fd, bytes (actual), stream
//   close       E/X: fd
// Never holds payload bytes. Byte counts are kept for stream accounting and
// reports but are not part of the matching key.
struct ArgsDigest {
  std::optional<int32_t> fd;
  std::optional<Endpoint> ep;
  std::optional<Endpoint> local;
  std::optional<uint64_t> stream;
  std::optional<uint64_t> bytes;

  bool operator==(const ArgsDigest&) const = default;
};

// One syscall entry or exit observed on one thread.
struct Event {
  EventCoord coord;
  Syscall syscall = Syscall::Socket;
  Phase phase = Phase::Entry;
  std::optional<OutcomeClass> outcome;  // Exit only
  ArgsDigest args;
  std::vector<EventCoord> parents;  // cross-thread causal predecessors, sorted

  bool operator==(const Event&) const = default;
};

// The matching key used by run-following and fingerprints: syscall kind,
// phase, outcome class, and the sorted parent coordinates. Byte counts,
// endpoints, and stream ids are deliberately excluded.
struct EventKey {
  Syscall syscall;
  Phase phase;
  std::optional<int> err;  // nullopt for entries
  std::vector<EventCoord> parents;

  bool operator==(const EventKey&) const = default;
};

EventKey key_of(const Event& ev);

}  // namespace hbt
