#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace hbt {

// An IPv4 address/port pair. Address is kept in host byte order.
struct Endpoint {
  uint32_t addr = 0;
  uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;

  bool valid() const { return addr != 0 || port != 0; }
  std::string str() const;

  // Parses "a.b.c.d:port". Throws Errc::ConfigError on malformed input.
  static Endpoint parse(std::string_view text);
  static Endpoint loopback(uint16_t port);
};

// The TCP 4-tuple identifying one stream. "client" is the connect side.
struct FourTuple {
  Endpoint client;
  Endpoint server;

  auto operator<=>(const FourTuple&) const = default;
  std::string str() const;
};

}  // namespace hbt
