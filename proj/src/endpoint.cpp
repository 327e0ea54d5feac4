#include "hbtrace/endpoint.hpp"

#include <fmt/format.h>

#include <charconv>

#include "hbtrace/errors.hpp"

namespace hbt {

std::string Endpoint::str() const {
  return fmt::format("{}.{}.{}.{}:{}", (addr >> 24) & 0xff, (addr >> 16) & 0xff,
                     (addr >> 8) & 0xff, addr & 0xff, port);
}

static unsigned parse_component(std::string_view text, unsigned max, const char* what) {
  unsigned value = 0;
  auto [ptr, ec] = std::from_chars(text.begin(), text.end(), value);
  if (ec != std::errc() || ptr != text.end() || value > max)
    raise(Errc::ConfigError, fmt::format("bad {} in endpoint '{}'", what, text));
  return value;
}

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos)
    raise(Errc::ConfigError, fmt::format("endpoint '{}' is missing a port", text));
  uint16_t port = static_cast<uint16_t>(parse_component(text.substr(colon + 1), 65535, "port"));

  std::string_view host = text.substr(0, colon);
  uint32_t addr = 0;
  for (int i = 0; i < 4; ++i) {
    auto dot = host.find('.');
    bool last = i == 3;
    if (last != (dot == std::string_view::npos))
      raise(Errc::ConfigError, fmt::format("endpoint '{}' is not a dotted quad", text));
    std::string_view octet = last ? host : host.substr(0, dot);
    addr = (addr << 8) | parse_component(octet, 255, "address octet");
    if (!last) host = host.substr(dot + 1);
  }
  return Endpoint{addr, port};
}

Endpoint Endpoint::loopback(uint16_t port) { return Endpoint{0x7f000001u, port}; }

std::string FourTuple::str() const {
  return fmt::format("{} -> {}", client.str(), server.str());
}

}  // namespace hbt
