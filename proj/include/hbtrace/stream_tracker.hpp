#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hbtrace/endpoint.hpp"
#include "hbtrace/event.hpp"

namespace hbt {

using StreamId = uint64_t;

enum class SocketRole : uint8_t { Unbound, Listening, Connecting, AcceptedChild };

// Which endpoint wrote. The connect side is the client.
enum class Dir : uint8_t { ClientToServer, ServerToClient };

inline Dir opposite(Dir d) {
  return d == Dir::ClientToServer ? Dir::ServerToClient : Dir::ClientToServer;
}

// One write's byte range in stream-relative sequence space, half-open.
struct WriteRecord {
  EventCoord event;  // the write-Exit event
  uint64_t begin = 0;
  uint64_t end = 0;

  uint64_t width() const { return end - begin; }
  bool operator==(const WriteRecord&) const = default;
};

struct HalfStream {
  uint64_t write_cursor = 0;  // stream-relative sequence number
  uint64_t read_cursor = 0;
  std::vector<WriteRecord> writes;
  bool writer_observed = false;  // false when the writing side is untraced
};

struct StreamState {
  StreamId id = 0;
  FourTuple tuple;
  // (process, descriptor) per side; absent while only one half was traced.
  std::optional<std::pair<uint32_t, int32_t>> client_socket;
  std::optional<std::pair<uint32_t, int32_t>> server_socket;
  HalfStream client_to_server;
  HalfStream server_to_client;
  std::optional<EventCoord> accept_entry;
  std::optional<EventCoord> connect_exit;
  bool pair_edge_emitted = false;

  HalfStream& half(Dir d) {
    return d == Dir::ClientToServer ? client_to_server : server_to_client;
  }
  const HalfStream& half(Dir d) const {
    return d == Dir::ClientToServer ? client_to_server : server_to_client;
  }
  bool paired() const { return client_socket && server_socket; }
};

struct SocketRecord {
  uint32_t process = 0;
  int32_t fd = -1;
  std::optional<Endpoint> local;
  std::optional<Endpoint> peer;
  SocketRole role = SocketRole::Unbound;
  std::optional<StreamId> stream;
  bool failed = false;
};

// Tracks sockets and TCP streams across traced processes, pairs connect with
// accept by 4-tuple, and maps read bytes back to the writes that produced
// them. Emits parent edges through the sink: the accept-Entry -> connect-Exit
// pairing edge and one write-Exit -> read-Exit edge per contributing write.
// Driven synchronously by the single event loop; never shared.
class StreamTracker {
 public:
  using EdgeSink = std::function<void(EventCoord parent, EventCoord child)>;
  using DiagSink = std::function<void(const std::string&)>;

  explicit StreamTracker(EdgeSink edges, DiagSink diag = {});

  // Descriptor lifecycle. Unknown descriptors register lazily; close frees
  // the slot for reuse.
  void on_socket(uint32_t process, int32_t fd);
  void on_bind(uint32_t process, int32_t fd, Endpoint local);
  void on_listen(uint32_t process, int32_t fd);
  void on_close(uint32_t process, int32_t fd);
  void on_connect_failed(uint32_t process, int32_t fd);

  // Success side effects of connection establishment. `source` is the
  // connecting socket's own endpoint (the live tracer learns it via injected
  // endpoint queries; the simulator knows it directly).
  StreamId on_connect_exit(uint32_t process, int32_t fd, Endpoint source, Endpoint destination,
                           EventCoord connect_entry, EventCoord connect_exit);
  StreamId on_accept_exit(uint32_t process, int32_t listener_fd, int32_t new_fd, Endpoint peer,
                          std::optional<Endpoint> child_local, EventCoord accept_entry,
                          EventCoord accept_exit);

  // Stream-addressed data ops.
  WriteRecord on_write_exit(StreamId id, Dir dir, EventCoord write_exit, uint64_t byte_count);
  std::vector<EventCoord> on_read_exit(StreamId id, Dir dir, EventCoord read_exit,
                                       uint64_t byte_count);

  // Descriptor-addressed conveniences used by event sources. Reads map
  // against the opposite half's writes. One-sided streams yield no parents.
  WriteRecord on_write_exit_fd(uint32_t process, int32_t fd, EventCoord write_exit,
                               uint64_t byte_count);
  std::vector<EventCoord> on_read_exit_fd(uint32_t process, int32_t fd, EventCoord read_exit,
                                          uint64_t byte_count);

  const SocketRecord* socket(uint32_t process, int32_t fd) const;
  std::optional<StreamId> stream_of(uint32_t process, int32_t fd) const;
  const StreamState& stream(StreamId id) const;
  size_t stream_count() const { return streams_.size(); }
  template <class F>
  void for_each_stream(F&& fn) const {
    for (const auto& [id, st] : streams_) fn(st);
  }
  // The traced process listening on `ep`, if any.
  std::optional<uint32_t> listener_process(Endpoint ep) const;
  // Which side of its stream (process, fd) occupies.
  std::optional<Dir> write_direction(uint32_t process, int32_t fd) const;

 private:
  SocketRecord& ensure(uint32_t process, int32_t fd);
  StreamState& require_stream(StreamId id);
  StreamId resolve_stream(const FourTuple& tuple);
  void maybe_emit_pair_edge(StreamState& st);
  void warn(std::string msg);

  EdgeSink edges_;
  DiagSink diag_;
  std::map<std::pair<uint32_t, int32_t>, SocketRecord> sockets_;
  std::map<StreamId, StreamState> streams_;
  std::map<FourTuple, StreamId> by_tuple_;
  StreamId next_stream_ = 1;
};

}  // namespace hbt
