#include "hbtrace/stream_tracker.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "hbtrace/errors.hpp"

namespace hbt {

StreamTracker::StreamTracker(EdgeSink edges, DiagSink diag)
    : edges_(std::move(edges)), diag_(std::move(diag)) {}

void StreamTracker::warn(std::string msg) {
  if (diag_) diag_(msg);
}

SocketRecord& StreamTracker::ensure(uint32_t process, int32_t fd) {
  auto [it, inserted] = sockets_.try_emplace({process, fd});
  if (inserted) {
    it->second.process = process;
    it->second.fd = fd;
  }
  return it->second;
}

void StreamTracker::on_socket(uint32_t process, int32_t fd) {
  // A fresh socket over a reused descriptor number rebinds the slot.
  sockets_.erase({process, fd});
  ensure(process, fd);
}

void StreamTracker::on_bind(uint32_t process, int32_t fd, Endpoint local) {
  // Last bind wins.
  ensure(process, fd).local = local;
}

void StreamTracker::on_listen(uint32_t process, int32_t fd) {
  SocketRecord& rec = ensure(process, fd);
  rec.role = SocketRole::Listening;
  if (!rec.local) warn(fmt::format("listen on {}:{} with no observed bind", process, fd));
}

void StreamTracker::on_close(uint32_t process, int32_t fd) {
  // Frees the descriptor slot; any stream keeps its endpoint identity.
  sockets_.erase({process, fd});
}

void StreamTracker::on_connect_failed(uint32_t process, int32_t fd) {
  ensure(process, fd).failed = true;
}

StreamId StreamTracker::resolve_stream(const FourTuple& tuple) {
  auto it = by_tuple_.find(tuple);
  if (it != by_tuple_.end()) return it->second;
  StreamId id = next_stream_++;
  StreamState st;
  st.id = id;
  st.tuple = tuple;
  streams_.emplace(id, std::move(st));
  by_tuple_.emplace(tuple, id);
  return id;
}

void StreamTracker::maybe_emit_pair_edge(StreamState& st) {
  if (st.pair_edge_emitted || !st.accept_entry || !st.connect_exit) return;
  st.pair_edge_emitted = true;
  edges_(*st.accept_entry, *st.connect_exit);
}

StreamId StreamTracker::on_connect_exit(uint32_t process, int32_t fd, Endpoint source,
                                        Endpoint destination, EventCoord connect_entry,
                                        EventCoord connect_exit) {
  (void)connect_entry;
  StreamId id = resolve_stream(FourTuple{source, destination});
  StreamState& st = streams_.at(id);
  st.client_socket = {process, fd};
  st.connect_exit = connect_exit;
  st.client_to_server.writer_observed = true;

  SocketRecord& rec = ensure(process, fd);
  rec.role = SocketRole::Connecting;
  rec.local = source;
  rec.peer = destination;
  rec.stream = id;

  maybe_emit_pair_edge(st);
  return id;
}

StreamId StreamTracker::on_accept_exit(uint32_t process, int32_t listener_fd, int32_t new_fd,
                                       Endpoint peer, std::optional<Endpoint> child_local,
                                       EventCoord accept_entry, EventCoord accept_exit) {
  (void)accept_exit;
  const SocketRecord* listener = socket(process, listener_fd);
  std::optional<Endpoint> local = child_local;
  if (!local && listener && listener->local) local = listener->local;
  if (!listener)
    warn(fmt::format("accept on unknown listener {}:{}", process, listener_fd));
  if (!local) {
    warn(fmt::format("accepted child {}:{} has no resolvable local endpoint; tracked one-sided",
                     process, new_fd));
    local = Endpoint{};
  }

  StreamId id = resolve_stream(FourTuple{peer, *local});
  StreamState& st = streams_.at(id);
  st.server_socket = {process, new_fd};
  st.accept_entry = accept_entry;
  st.server_to_client.writer_observed = true;

  SocketRecord& rec = ensure(process, new_fd);
  rec.role = SocketRole::AcceptedChild;
  rec.local = *local;
  rec.peer = peer;
  rec.stream = id;

  maybe_emit_pair_edge(st);
  return id;
}

StreamState& StreamTracker::require_stream(StreamId id) {
  auto it = streams_.find(id);
  if (it == streams_.end()) raise(Errc::UnknownStream, fmt::format("stream {}", id));
  return it->second;
}

WriteRecord StreamTracker::on_write_exit(StreamId id, Dir dir, EventCoord write_exit,
                                         uint64_t byte_count) {
  HalfStream& half = require_stream(id).half(dir);
  WriteRecord rec{write_exit, half.write_cursor, half.write_cursor + byte_count};
  half.writes.push_back(rec);
  half.write_cursor = rec.end;
  return rec;
}

std::vector<EventCoord> StreamTracker::on_read_exit(StreamId id, Dir dir, EventCoord read_exit,
                                                    uint64_t byte_count) {
  HalfStream& half = require_stream(id).half(dir);
  if (!half.writer_observed) return {};  // untraced peer: no parents to derive
  if (byte_count > half.write_cursor - half.read_cursor)
    raise(Errc::ReadAheadOfWrites,
          fmt::format("stream {}: read of {} bytes at cursor {} exceeds written {}", id,
                      byte_count, half.read_cursor, half.write_cursor));
  if (byte_count == 0) return {};  // EOF: recorded but causally parentless
  uint64_t lo = half.read_cursor;
  uint64_t hi = lo + byte_count;
  std::vector<EventCoord> contributors;
  for (const WriteRecord& w : half.writes) {
    if (w.begin >= hi) break;
    // Zero-byte writes have empty ranges and never contribute.
    if (w.end > lo && w.begin < hi && w.begin != w.end) {
      contributors.push_back(w.event);
      edges_(w.event, read_exit);
    }
  }
  half.read_cursor = hi;
  return contributors;
}

std::optional<Dir> StreamTracker::write_direction(uint32_t process, int32_t fd) const {
  const SocketRecord* rec = socket(process, fd);
  if (!rec || !rec->stream) return std::nullopt;
  const StreamState& st = streams_.at(*rec->stream);
  std::pair<uint32_t, int32_t> key{process, fd};
  if (st.client_socket == key) return Dir::ClientToServer;
  if (st.server_socket == key) return Dir::ServerToClient;
  return std::nullopt;
}

WriteRecord StreamTracker::on_write_exit_fd(uint32_t process, int32_t fd, EventCoord write_exit,
                                            uint64_t byte_count) {
  auto dir = write_direction(process, fd);
  if (!dir) raise(Errc::UnknownStream, fmt::format("no stream behind {}:{}", process, fd));
  return on_write_exit(*stream_of(process, fd), *dir, write_exit, byte_count);
}

std::vector<EventCoord> StreamTracker::on_read_exit_fd(uint32_t process, int32_t fd,
                                                       EventCoord read_exit,
                                                       uint64_t byte_count) {
  auto dir = write_direction(process, fd);
  if (!dir) raise(Errc::UnknownStream, fmt::format("no stream behind {}:{}", process, fd));
  // A read consumes the opposite half: data written by the peer.
  return on_read_exit(*stream_of(process, fd), opposite(*dir), read_exit, byte_count);
}

const SocketRecord* StreamTracker::socket(uint32_t process, int32_t fd) const {
  auto it = sockets_.find({process, fd});
  return it == sockets_.end() ? nullptr : &it->second;
}

std::optional<StreamId> StreamTracker::stream_of(uint32_t process, int32_t fd) const {
  const SocketRecord* rec = socket(process, fd);
  if (!rec) return std::nullopt;
  return rec->stream;
}

const StreamState& StreamTracker::stream(StreamId id) const {
  auto it = streams_.find(id);
  if (it == streams_.end()) raise(Errc::UnknownStream, fmt::format("stream {}", id));
  return it->second;
}

std::optional<uint32_t> StreamTracker::listener_process(Endpoint ep) const {
  for (const auto& [key, rec] : sockets_)
    if (rec.role == SocketRole::Listening && rec.local == ep) return rec.process;
  return std::nullopt;
}

}  // namespace hbt
