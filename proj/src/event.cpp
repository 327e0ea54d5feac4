#include "hbtrace/event.hpp"

#include <fmt/format.h>

namespace hbt {

const char* syscall_name(Syscall sc) {
  switch (sc) {
    case Syscall::Socket: return "socket";
    case Syscall::Bind: return "bind";
    case Syscall::Listen: return "listen";
    case Syscall::Accept: return "accept";
    case Syscall::Connect: return "connect";
    case Syscall::Read: return "read";
    case Syscall::Write: return "write";
    case Syscall::Close: return "close";
  }
  return "?";
}

std::optional<Syscall> syscall_from_name(std::string_view name) {
  if (name == "socket") return Syscall::Socket;
  if (name == "bind") return Syscall::Bind;
  if (name == "listen") return Syscall::Listen;
  if (name == "accept" || name == "accept4") return Syscall::Accept;
  if (name == "connect") return Syscall::Connect;
  if (name == "read" || name == "recv") return Syscall::Read;
  if (name == "write" || name == "send") return Syscall::Write;
  if (name == "close") return Syscall::Close;
  return std::nullopt;
}

std::string EventCoord::str() const { return fmt::format("{}.{}.{}", process, thread, index); }

EventKey key_of(const Event& ev) {
  EventKey key{ev.syscall, ev.phase, std::nullopt, ev.parents};
  if (ev.outcome) key.err = ev.outcome->err;
  return key;
}

}  // namespace hbt
