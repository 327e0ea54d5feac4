#include <fmt/format.h>

#include <algorithm>
#include <cerrno>
#include <coroutine>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>

#include "hbtrace/errors.hpp"
#include "hbtrace/recorder.hpp"
#include "hbtrace/sim/sim.hpp"

namespace hbt::sim {

namespace {

// ---------------------------------------------------------------- protocol

std::string frame(std::string_view body) {
  std::string out;
  uint32_t n = static_cast<uint32_t>(body.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out.append(body);
  return out;
}

bool has_complete_frame(const std::string& buf) {
  if (buf.size() < 4) return false;
  uint32_t n = (static_cast<uint8_t>(buf[0]) << 24) | (static_cast<uint8_t>(buf[1]) << 16) |
               (static_cast<uint8_t>(buf[2]) << 8) | static_cast<uint8_t>(buf[3]);
  return buf.size() >= 4 + static_cast<size_t>(n);
}

std::optional<std::string> take_frame(std::string& buf) {
  if (!has_complete_frame(buf)) return std::nullopt;
  uint32_t n = (static_cast<uint8_t>(buf[0]) << 24) | (static_cast<uint8_t>(buf[1]) << 16) |
               (static_cast<uint8_t>(buf[2]) << 8) | static_cast<uint8_t>(buf[3]);
  std::string body = buf.substr(4, n);
  buf.erase(0, 4 + n);
  return body;
}

std::string request_body(const KvCommand& cmd) {
  if (cmd.set) return fmt::format("S {} {}", cmd.key, std::string(cmd.value_bytes, 'v'));
  return fmt::format("G {}", cmd.key);
}

std::string handle_request(std::map<std::string, std::string>& store, const std::string& body) {
  if (body.size() >= 2 && body[0] == 'G') {
    auto it = store.find(body.substr(2));
    return it == store.end() ? "N" : "V" + it->second;
  }
  if (body.size() >= 2 && body[0] == 'S') {
    auto sp = body.find(' ', 2);
    if (sp != std::string::npos) {
      store[body.substr(2, sp - 2)] = body.substr(sp + 1);
      return "K";
    }
  }
  return "N";
}

// ---------------------------------------------------------------- coroutine

struct ScriptTask {
  struct promise_type {
    std::exception_ptr error;
    ScriptTask get_return_object() {
      return ScriptTask{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    std::suspend_always initial_suspend() noexcept { return {}; }
    std::suspend_always final_suspend() noexcept { return {}; }
    void return_void() {}
    void unhandled_exception() { error = std::current_exception(); }
  };

  std::coroutine_handle<promise_type> handle;

  explicit ScriptTask(std::coroutine_handle<promise_type> h) : handle(h) {}
  ScriptTask(ScriptTask&& o) noexcept : handle(o.handle) { o.handle = {}; }
  ScriptTask& operator=(ScriptTask&&) = delete;
  ScriptTask(const ScriptTask&) = delete;
  ~ScriptTask() {
    if (handle) handle.destroy();
  }
};

// ---------------------------------------------------------------- world

struct SysResult {
  int64_t ret = 0;  // fd, byte count, or -errno
  std::string data;
};

struct WaitSpec {
  bool is_accept = false;
  int32_t fd = -1;
};

struct PendingCall {
  Syscall kind = Syscall::Socket;
  int32_t fd = -1;
  Endpoint ep;
  std::string payload;  // write
  uint64_t maxlen = 0;  // read

  enum class Stage : uint8_t { EntryPending, EffectPending, AwaitExit, ResumePending };
  Stage stage = Stage::EntryPending;

  std::optional<int> doomed;        // injected errno
  std::optional<uint64_t> mutated;  // injected write count
  std::optional<SysResult> staged;  // result latched at effect time
  int64_t conn = -1;                // connect: world connection id
  int64_t matched_conn = -1;        // accept: matched connection id
};

struct FdState {
  enum class Kind : uint8_t { Plain, Listener, Conn } kind = Kind::Plain;
  Endpoint bound;   // set by bind
  uint64_t conn = 0;
};

// Ground-truth TCP stream, distinct from the tracker's observer-side state.
struct Conn {
  Endpoint client_ep, server_ep;
  uint32_t client_proc = 0;
  int32_t client_fd = -1;
  uint32_t server_proc = 0;
  int32_t server_fd = -1;
  bool matched = false;  // an accept invocation picked this connect up
  bool refused = false;
  std::string to_server, to_client;
  bool client_closed = false, server_closed = false;
};

struct ListenerRec {
  uint32_t proc = 0;
  int32_t fd = -1;
  std::deque<uint64_t> pending;  // unmatched connects, FIFO
};

struct Process {
  uint32_t index = 0;
  std::optional<ScriptTask> task;
  bool exited = false;

  std::optional<PendingCall> call;
  std::optional<std::vector<WaitSpec>> wait;
  std::optional<uint64_t> compute_remaining;
  SysResult last_result;
  uint32_t last_pick = 0;

  bool paused = false, pause_indefinite = false;
  uint64_t resume_step = 0;

  std::map<int32_t, FdState> fds;
  std::set<int32_t> free_fds;
  int32_t next_fd = 3;
  uint32_t connect_seq = 0;
  int32_t prebound_fd = -1;
};

// ---------------------------------------------------------------- chooser

struct Chooser {
  virtual ~Chooser() = default;
  virtual uint32_t choose(uint32_t n) = 0;
};

// Hand-rolled bounded draw keeps the stream identical across standard
// libraries; the modulo bias is ~2^-62 for the tiny fanouts involved.
class RandomChooser : public Chooser {
 public:
  explicit RandomChooser(uint64_t seed) : rng_(seed) {}
  uint32_t choose(uint32_t n) override { return static_cast<uint32_t>(rng_() % n); }

 private:
  std::mt19937_64 rng_;
};

// Replays a prefix of choices, takes branch 0 beyond it, and records the
// fanout at every choice point for depth-first enumeration.
class PathChooser : public Chooser {
 public:
  explicit PathChooser(std::vector<uint32_t> prefix) : prefix_(std::move(prefix)) {}
  uint32_t choose(uint32_t n) override {
    uint32_t c = pos_ < prefix_.size() ? prefix_[pos_] : 0;
    ++pos_;
    taken_.push_back(c);
    fanout_.push_back(n);
    return c;
  }
  const std::vector<uint32_t>& taken() const { return taken_; }
  const std::vector<uint32_t>& fanout() const { return fanout_; }

 private:
  std::vector<uint32_t> prefix_, taken_, fanout_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------- engine

class Engine {
 public:
  Engine(const SimConfig& config, Chooser& chooser, Recorder& recorder)
      : config_(config), chooser_(chooser), recorder_(recorder) {}

  void start();
  void run(uint64_t max_events);
  uint64_t steps() const { return step_; }

  // awaiter plumbing
  void park_call(uint32_t proc, PendingCall call) { procs_[proc]->call = std::move(call); }
  void park_wait(uint32_t proc, std::vector<WaitSpec> specs) {
    procs_[proc]->wait = std::move(specs);
  }
  void park_compute(uint32_t proc, uint64_t turns) {
    procs_[proc]->compute_remaining = turns;
  }
  SysResult take_result(uint32_t proc) { return std::move(procs_[proc]->last_result); }
  uint32_t take_pick(uint32_t proc) { return procs_[proc]->last_pick; }
  uint32_t choose(uint32_t n) { return n <= 1 ? 0 : chooser_.choose(n); }
  std::vector<uint32_t> ready_indices(uint32_t proc, const std::vector<WaitSpec>& specs) const;
  int32_t prebound_fd(uint32_t proc) const { return procs_[proc]->prebound_fd; }

 private:
  bool can_step(const Process& p) const;
  void step(Process& p);
  void step_call(Process& p);
  bool exit_ready(const Process& p, const PendingCall& c) const;
  void apply_effect(Process& p, PendingCall& c);
  SysResult compute_exit(Process& p, PendingCall& c);
  ArgsDigest entry_digest(const Process& p, const PendingCall& c) const;
  ArgsDigest exit_digest(const Process& p, const PendingCall& c, const SysResult& res) const;
  void resume(Process& p);
  void apply_pause(Process& p, const std::optional<uint64_t>& ms);
  int32_t alloc_fd(Process& p);
  void release_fd(Process& p, int32_t fd);
  void close_fd(Process& p, int32_t fd);
  std::optional<uint64_t> stream_of(uint32_t proc, int32_t fd) const {
    return recorder_.tracker().stream_of(proc, fd);
  }

  const SimConfig& config_;
  Chooser& chooser_;
  Recorder& recorder_;
  std::vector<std::unique_ptr<Process>> procs_;
  std::vector<Conn> conns_;
  std::map<Endpoint, ListenerRec> listeners_;
  uint64_t step_ = 0;
};

// ---------------------------------------------------------------- awaiters

struct Env;

struct CallAwaiter {
  Engine* eng;
  uint32_t proc;
  PendingCall call;
  bool await_ready() const { return false; }
  void await_suspend(std::coroutine_handle<>) { eng->park_call(proc, std::move(call)); }
  SysResult await_resume() { return eng->take_result(proc); }
};

struct ComputeAwaiter {
  Engine* eng;
  uint32_t proc;
  uint64_t turns;
  bool await_ready() const { return turns == 0; }
  void await_suspend(std::coroutine_handle<>) { eng->park_compute(proc, turns); }
  void await_resume() {}
};

struct WaitAwaiter {
  Engine* eng;
  uint32_t proc;
  std::vector<WaitSpec> specs;
  uint32_t pick = 0;
  bool immediate = false;
  bool await_ready() {
    auto ready = eng->ready_indices(proc, specs);
    if (ready.empty()) return false;
    pick = ready[eng->choose(static_cast<uint32_t>(ready.size()))];
    immediate = true;
    return true;
  }
  void await_suspend(std::coroutine_handle<>) { eng->park_wait(proc, std::move(specs)); }
  uint32_t await_resume() { return immediate ? pick : eng->take_pick(proc); }
};

struct Env {
  Engine* eng;
  uint32_t proc;

  CallAwaiter syscall(PendingCall c) { return CallAwaiter{eng, proc, std::move(c)}; }
  CallAwaiter socket() { return syscall({.kind = Syscall::Socket}); }
  CallAwaiter bind(int32_t fd, Endpoint ep) {
    return syscall({.kind = Syscall::Bind, .fd = fd, .ep = ep});
  }
  CallAwaiter listen(int32_t fd) { return syscall({.kind = Syscall::Listen, .fd = fd}); }
  CallAwaiter accept(int32_t fd) { return syscall({.kind = Syscall::Accept, .fd = fd}); }
  CallAwaiter connect(int32_t fd, Endpoint ep) {
    return syscall({.kind = Syscall::Connect, .fd = fd, .ep = ep});
  }
  CallAwaiter read(int32_t fd, uint64_t maxlen) {
    return syscall({.kind = Syscall::Read, .fd = fd, .maxlen = maxlen});
  }
  CallAwaiter write(int32_t fd, std::string payload) {
    return syscall({.kind = Syscall::Write, .fd = fd, .payload = std::move(payload)});
  }
  CallAwaiter close(int32_t fd) { return syscall({.kind = Syscall::Close, .fd = fd}); }
  ComputeAwaiter compute(uint64_t turns = 1) { return ComputeAwaiter{eng, proc, turns}; }
  WaitAwaiter wait_ready(std::vector<WaitSpec> specs) {
    return WaitAwaiter{eng, proc, std::move(specs)};
  }
  int32_t prebound_fd() const { return eng->prebound_fd(proc); }
};

// ---------------------------------------------------------------- scripts

ScriptTask kv_client(Env env, KvClientSpec spec) {
  if (spec.think) co_await env.compute(spec.think);
  int32_t fd;
  if (spec.prebound_socket) {
    fd = env.prebound_fd();
  } else {
    SysResult s = co_await env.socket();
    fd = static_cast<int32_t>(s.ret);
  }
  SysResult c = co_await env.connect(fd, spec.server);
  if (c.ret < 0) {
    if (spec.close_socket) co_await env.close(fd);
    co_return;
  }
  bool broken = false;
  for (const KvCommand& cmd : spec.commands) {
    std::string out = frame(request_body(cmd));
    size_t off = 0;
    while (off < out.size()) {
      SysResult w = co_await env.write(fd, out.substr(off));
      if (w.ret < 0) {
        broken = true;
        break;
      }
      off += static_cast<size_t>(w.ret);
    }
    if (broken) break;
    if (spec.read_response) {
      std::string acc;
      while (!has_complete_frame(acc)) {
        SysResult r = co_await env.read(fd, 4096);
        if (r.ret <= 0) {
          broken = true;
          break;
        }
        acc += r.data;
      }
      if (broken) break;
    }
  }
  if (spec.close_socket) co_await env.close(fd);
}

ScriptTask kv_server(Env env, KvServerSpec spec) {
  if (spec.think) co_await env.compute(spec.think);
  int32_t lfd;
  if (spec.prebound) {
    lfd = env.prebound_fd();
  } else {
    SysResult s = co_await env.socket();
    lfd = static_cast<int32_t>(s.ret);
    co_await env.bind(lfd, spec.listen);
    co_await env.listen(lfd);
  }

  struct Client {
    int32_t fd;
    std::string inbuf;
    uint32_t served = 0;
    bool open = true;
  };
  std::vector<Client> clients;
  std::map<std::string, std::string> store;
  uint32_t accepted = 0;

  auto done = [&](const Client& c) {
    return spec.messages_per_connection > 0 && c.served >= spec.messages_per_connection;
  };

  while (true) {
    std::vector<WaitSpec> waits;
    std::vector<int64_t> targets;  // -1 = listener, else client index
    if (accepted < spec.connections) {
      waits.push_back(WaitSpec{true, lfd});
      targets.push_back(-1);
    }
    if (spec.watch_connections) {
      for (size_t i = 0; i < clients.size(); ++i) {
        if (clients[i].open && !done(clients[i])) {
          waits.push_back(WaitSpec{false, clients[i].fd});
          targets.push_back(static_cast<int64_t>(i));
        }
      }
    }
    if (waits.empty()) break;

    uint32_t pick = co_await env.wait_ready(std::move(waits));
    if (targets[pick] < 0) {
      SysResult a = co_await env.accept(lfd);
      ++accepted;  // injected failures count as a consumed slot
      if (a.ret >= 0) clients.push_back(Client{static_cast<int32_t>(a.ret), "", 0, true});
      continue;
    }

    Client& c = clients[static_cast<size_t>(targets[pick])];
    SysResult r = co_await env.read(c.fd, 4096);
    if (r.ret < 0) {
      if (spec.close_children) co_await env.close(c.fd);
      c.open = false;
      continue;
    }
    if (r.ret == 0) {  // EOF
      if (spec.close_children) co_await env.close(c.fd);
      c.open = false;
      continue;
    }
    c.inbuf += r.data;
    while (auto req = take_frame(c.inbuf)) {
      ++c.served;
      if (spec.respond) {
        std::string resp = frame(handle_request(store, *req));
        size_t off = 0;
        bool failed = false;
        while (off < resp.size()) {
          SysResult w = co_await env.write(c.fd, resp.substr(off));
          if (w.ret < 0) {
            failed = true;
            break;
          }
          off += static_cast<size_t>(w.ret);
        }
        if (failed) {
          if (spec.close_children) co_await env.close(c.fd);
          c.open = false;
          break;
        }
      }
    }
  }
  if (spec.close_listener) co_await env.close(lfd);
}

ScriptTask loner(Env env, LonerSpec spec) {
  SysResult s = co_await env.socket();
  if (spec.computes) co_await env.compute(spec.computes);
  co_await env.close(static_cast<int32_t>(s.ret));
}

// ---------------------------------------------------------------- engine impl

void Engine::start() {
  for (uint32_t i = 0; i < config_.processes.size(); ++i) {
    procs_.push_back(std::make_unique<Process>());
    procs_.back()->index = i;
    recorder_.declare_thread(i, 0);
  }
  for (uint32_t i = 0; i < config_.processes.size(); ++i) {
    Process& p = *procs_[i];
    const ProcessSpec& spec = config_.processes[i];
    if (const auto* srv = std::get_if<KvServerSpec>(&spec); srv && srv->prebound) {
      if (listeners_.count(srv->listen))
        raise(Errc::ConfigError, fmt::format("{} is already listening", srv->listen.str()));
      int32_t fd = alloc_fd(p);
      p.fds[fd] = FdState{FdState::Kind::Listener, srv->listen, 0};
      listeners_[srv->listen] = ListenerRec{i, fd, {}};
      recorder_.preregister_listener(i, fd, srv->listen);
      p.prebound_fd = fd;
    }
    if (const auto* cli = std::get_if<KvClientSpec>(&spec); cli && cli->prebound_socket) {
      int32_t fd = alloc_fd(p);
      p.fds[fd] = FdState{FdState::Kind::Plain, {}, 0};
      recorder_.preregister_socket(i, fd);
      p.prebound_fd = fd;
    }
    Env env{this, i};
    p.task.emplace(std::visit(
        [&](const auto& s) -> ScriptTask {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, KvServerSpec>) return kv_server(env, s);
          else if constexpr (std::is_same_v<T, KvClientSpec>) return kv_client(env, s);
          else return loner(env, s);
        },
        spec));
    resume(p);  // advance to the first suspension; free before the clock
  }
}

int32_t Engine::alloc_fd(Process& p) {
  if (!p.free_fds.empty()) {
    int32_t fd = *p.free_fds.begin();
    p.free_fds.erase(p.free_fds.begin());
    return fd;
  }
  return p.next_fd++;
}

void Engine::release_fd(Process& p, int32_t fd) { p.free_fds.insert(fd); }

void Engine::close_fd(Process& p, int32_t fd) {
  auto it = p.fds.find(fd);
  if (it == p.fds.end()) return;
  FdState fs = it->second;
  p.fds.erase(it);
  release_fd(p, fd);
  if (fs.kind == FdState::Kind::Listener) {
    auto lit = listeners_.find(fs.bound);
    if (lit != listeners_.end()) {
      for (uint64_t id : lit->second.pending) conns_[id].refused = true;
      listeners_.erase(lit);
    }
  } else if (fs.kind == FdState::Kind::Conn) {
    Conn& c = conns_[fs.conn];
    if (c.client_proc == p.index && c.client_fd == fd)
      c.client_closed = true;
    else
      c.server_closed = true;
  }
}

void Engine::resume(Process& p) {
  auto h = p.task->handle;
  h.resume();
  if (h.promise().error) std::rethrow_exception(h.promise().error);
  if (h.done()) {
    p.exited = true;
    // Process exit closes its descriptors without emitting events; peers
    // observe EOF or refusal exactly as with an explicit close.
    std::vector<int32_t> open;
    for (const auto& [fd, st] : p.fds) open.push_back(fd);
    for (int32_t fd : open) close_fd(p, fd);
  }
}

std::vector<uint32_t> Engine::ready_indices(uint32_t proc,
                                            const std::vector<WaitSpec>& specs) const {
  std::vector<uint32_t> ready;
  const Process& p = *procs_[proc];
  for (uint32_t i = 0; i < specs.size(); ++i) {
    const WaitSpec& s = specs[i];
    auto it = p.fds.find(s.fd);
    if (it == p.fds.end()) continue;
    if (s.is_accept) {
      if (it->second.kind != FdState::Kind::Listener) continue;
      auto lit = listeners_.find(it->second.bound);
      if (lit != listeners_.end() && !lit->second.pending.empty()) ready.push_back(i);
    } else {
      if (it->second.kind != FdState::Kind::Conn) continue;
      const Conn& c = conns_[it->second.conn];
      bool from_client = c.client_proc == proc && c.client_fd == s.fd;
      const std::string& buf = from_client ? c.to_client : c.to_server;
      bool peer_closed = from_client ? c.server_closed : c.client_closed;
      if (!buf.empty() || peer_closed) ready.push_back(i);
    }
  }
  return ready;
}

bool Engine::exit_ready(const Process& p, const PendingCall& c) const {
  if (c.doomed || c.staged) return true;
  switch (c.kind) {
    case Syscall::Connect: {
      if (c.conn < 0) return true;
      const Conn& conn = conns_[c.conn];
      return conn.matched || conn.refused;
    }
    case Syscall::Accept:
      return c.matched_conn >= 0;
    case Syscall::Read: {
      auto it = p.fds.find(c.fd);
      if (it == p.fds.end() || it->second.kind != FdState::Kind::Conn) return true;
      const Conn& conn = conns_[it->second.conn];
      bool from_client = conn.client_proc == p.index && conn.client_fd == c.fd;
      const std::string& buf = from_client ? conn.to_client : conn.to_server;
      bool peer_closed = from_client ? conn.server_closed : conn.client_closed;
      return !buf.empty() || peer_closed;
    }
    default:
      return true;
  }
}

bool Engine::can_step(const Process& p) const {
  if (p.exited) return false;
  if (p.pause_indefinite) return false;
  if (p.paused && step_ < p.resume_step) return false;
  if (p.call) {
    switch (p.call->stage) {
      case PendingCall::Stage::EntryPending:
      case PendingCall::Stage::EffectPending:
      case PendingCall::Stage::ResumePending:
        return true;
      case PendingCall::Stage::AwaitExit:
        return exit_ready(p, *p.call);
    }
  }
  if (p.wait) return !ready_indices(p.index, *p.wait).empty();
  if (p.compute_remaining) return true;
  return false;
}

void Engine::apply_pause(Process& p, const std::optional<uint64_t>& ms) {
  if (!ms) {
    p.pause_indefinite = true;
    return;
  }
  p.paused = true;
  p.resume_step = step_ + *ms * config_.steps_per_ms;
}

ArgsDigest Engine::entry_digest(const Process& p, const PendingCall& c) const {
  ArgsDigest d;
  switch (c.kind) {
    case Syscall::Socket:
      break;
    case Syscall::Bind:
      d.fd = c.fd;
      d.ep = c.ep;
      break;
    case Syscall::Connect:
      d.fd = c.fd;
      d.ep = c.ep;
      break;
    case Syscall::Listen:
    case Syscall::Accept:
    case Syscall::Close:
      d.fd = c.fd;
      break;
    case Syscall::Read:
      d.fd = c.fd;
      d.bytes = c.maxlen;
      d.stream = stream_of(p.index, c.fd);
      break;
    case Syscall::Write:
      d.fd = c.fd;
      d.bytes = c.payload.size();  // the requested count, before any mutation
      d.stream = stream_of(p.index, c.fd);
      break;
  }
  return d;
}

ArgsDigest Engine::exit_digest(const Process& p, const PendingCall& c, const SysResult& res) const {
  ArgsDigest d;
  bool ok = res.ret >= 0;
  switch (c.kind) {
    case Syscall::Socket:
      if (ok) d.fd = static_cast<int32_t>(res.ret);
      break;
    case Syscall::Bind:
      d.fd = c.fd;
      d.ep = c.ep;
      break;
    case Syscall::Listen:
    case Syscall::Close:
      d.fd = c.fd;
      break;
    case Syscall::Connect:
      d.fd = c.fd;
      d.ep = c.ep;
      if (ok) d.local = conns_[c.conn].client_ep;
      break;
    case Syscall::Accept:
      if (ok) {
        const Conn& conn = conns_[c.matched_conn];
        d.fd = static_cast<int32_t>(res.ret);
        d.ep = conn.client_ep;
        d.local = conn.server_ep;
      } else {
        d.fd = c.fd;
      }
      break;
    case Syscall::Read:
    case Syscall::Write:
      d.fd = c.fd;
      d.stream = stream_of(p.index, c.fd);
      if (ok) d.bytes = static_cast<uint64_t>(res.ret);
      break;
  }
  return d;
}

void Engine::apply_effect(Process& p, PendingCall& c) {
  c.stage = PendingCall::Stage::AwaitExit;
  if (c.doomed) return;  // argument invalidated: the call cannot take effect

  switch (c.kind) {
    case Syscall::Socket: {
      int32_t fd = alloc_fd(p);
      p.fds[fd] = FdState{FdState::Kind::Plain, {}, 0};
      c.staged = SysResult{fd, {}};
      break;
    }
    case Syscall::Bind: {
      p.fds[c.fd].bound = c.ep;
      c.staged = SysResult{0, {}};
      break;
    }
    case Syscall::Listen: {
      FdState& fs = p.fds[c.fd];
      if (!fs.bound.valid())
        raise(Errc::ConfigError, fmt::format("listen on unbound fd {} in process {}", c.fd,
                                             p.index));
      if (listeners_.count(fs.bound))
        raise(Errc::ConfigError, fmt::format("{} is already listening", fs.bound.str()));
      fs.kind = FdState::Kind::Listener;
      listeners_[fs.bound] = ListenerRec{p.index, c.fd, {}};
      c.staged = SysResult{0, {}};
      break;
    }
    case Syscall::Connect: {
      auto it = listeners_.find(c.ep);
      if (it == listeners_.end()) {
        c.staged = SysResult{-ECONNREFUSED, {}};
        break;
      }
      Endpoint src = Endpoint::loopback(
          static_cast<uint16_t>(50000 + p.index * 100 + ++p.connect_seq));
      conns_.push_back(Conn{src, c.ep, p.index, c.fd, 0, -1, false, false, "", "", false, false});
      uint64_t id = conns_.size() - 1;
      c.conn = static_cast<int64_t>(id);
      p.fds[c.fd] = FdState{FdState::Kind::Conn, {}, id};
      ListenerRec& lst = it->second;
      Process& owner = *procs_[lst.proc];
      // Hand straight to a blocked accept invocation, else queue FIFO.
      if (owner.call && owner.call->kind == Syscall::Accept &&
          owner.call->stage == PendingCall::Stage::AwaitExit && owner.call->fd == lst.fd &&
          owner.call->matched_conn < 0) {
        owner.call->matched_conn = static_cast<int64_t>(id);
        conns_[id].matched = true;
      } else {
        lst.pending.push_back(id);
      }
      break;
    }
    case Syscall::Accept: {
      auto it = p.fds.find(c.fd);
      if (it == p.fds.end() || it->second.kind != FdState::Kind::Listener) {
        c.staged = SysResult{-EBADF, {}};
        break;
      }
      ListenerRec& lst = listeners_.at(it->second.bound);
      if (!lst.pending.empty()) {
        uint64_t id = lst.pending.front();
        lst.pending.pop_front();
        c.matched_conn = static_cast<int64_t>(id);
        conns_[id].matched = true;
      }
      break;  // otherwise blocked until a connect arrives
    }
    case Syscall::Read:
      break;  // bytes are taken at exit time
    case Syscall::Write: {
      // Bytes become visible at the exit turn, once the write-Exit event is
      // recorded: a reader must never consume data whose producing write the
      // pipeline has not seen yet.
      auto it = p.fds.find(c.fd);
      if (it == p.fds.end() || it->second.kind != FdState::Kind::Conn)
        c.staged = SysResult{-EBADF, {}};
      break;
    }
    case Syscall::Close: {
      close_fd(p, c.fd);
      c.staged = SysResult{0, {}};
      break;
    }
  }
}

SysResult Engine::compute_exit(Process& p, PendingCall& c) {
  if (c.doomed) return SysResult{-*c.doomed, {}};
  if (c.staged) return *c.staged;
  switch (c.kind) {
    case Syscall::Connect: {
      const Conn& conn = conns_[c.conn];
      if (conn.matched) return SysResult{0, {}};
      return SysResult{-ECONNREFUSED, {}};
    }
    case Syscall::Accept: {
      Conn& conn = conns_[c.matched_conn];
      int32_t fd = alloc_fd(p);
      conn.server_proc = p.index;
      conn.server_fd = fd;
      p.fds[fd] = FdState{FdState::Kind::Conn, {}, static_cast<uint64_t>(c.matched_conn)};
      return SysResult{fd, {}};
    }
    case Syscall::Read: {
      auto it = p.fds.find(c.fd);
      if (it == p.fds.end() || it->second.kind != FdState::Kind::Conn) return SysResult{-EBADF, {}};
      Conn& conn = conns_[it->second.conn];
      bool from_client = conn.client_proc == p.index && conn.client_fd == c.fd;
      std::string& buf = from_client ? conn.to_client : conn.to_server;
      uint64_t n = std::min<uint64_t>(c.maxlen, buf.size());
      SysResult res{static_cast<int64_t>(n), buf.substr(0, n)};
      buf.erase(0, n);
      return res;  // n == 0 means the peer closed: EOF
    }
    case Syscall::Write: {
      Conn& conn = conns_[p.fds.at(c.fd).conn];
      uint64_t requested = c.payload.size();
      uint64_t actual = c.mutated ? std::min(*c.mutated, requested) : requested;
      bool from_client = conn.client_proc == p.index && conn.client_fd == c.fd;
      (from_client ? conn.to_server : conn.to_client).append(c.payload, 0, actual);
      return SysResult{static_cast<int64_t>(actual), {}};
    }
    default:
      return SysResult{0, {}};
  }
}

void Engine::step_call(Process& p) {
  PendingCall& c = *p.call;
  switch (c.stage) {
    case PendingCall::Stage::EntryPending: {
      auto obs = recorder_.on_entry(p.index, 0, c.kind, entry_digest(p, c));
      c.stage = PendingCall::Stage::EffectPending;
      if (obs.action) {
        if (const auto* pause = std::get_if<ResolvedPause>(&*obs.action)) {
          // Paused before the kernel sees the call: no effect until resume.
          apply_pause(p, pause->ms);
          return;
        }
        if (const auto* err = std::get_if<ResolvedErrno>(&*obs.action)) c.doomed = err->code;
        if (const auto* trunc = std::get_if<ResolvedTruncate>(&*obs.action))
          c.mutated = trunc->count;
      }
      apply_effect(p, c);
      return;
    }
    case PendingCall::Stage::EffectPending:
      apply_effect(p, c);
      return;
    case PendingCall::Stage::AwaitExit: {
      SysResult res = compute_exit(p, c);
      OutcomeClass out;
      out.err = res.ret < 0 ? static_cast<int>(-res.ret) : 0;
      if (c.kind == Syscall::Accept && res.ret >= 0)
        out.peer = conns_[c.matched_conn].client_ep;
      auto obs = recorder_.on_exit(p.index, 0, c.kind, std::move(out), exit_digest(p, c, res));
      p.last_result = std::move(res);
      if (obs.action) {
        if (const auto* pause = std::get_if<ResolvedPause>(&*obs.action)) {
          apply_pause(p, pause->ms);
          c.stage = PendingCall::Stage::ResumePending;
          return;
        }
      }
      p.call.reset();
      resume(p);
      return;
    }
    case PendingCall::Stage::ResumePending:
      p.call.reset();
      resume(p);
      return;
  }
}

void Engine::step(Process& p) {
  p.paused = false;
  if (p.call) {
    step_call(p);
    return;
  }
  if (p.wait) {
    auto ready = ready_indices(p.index, *p.wait);
    p.last_pick = ready[choose(static_cast<uint32_t>(ready.size()))];
    p.wait.reset();
    resume(p);
    return;
  }
  if (p.compute_remaining) {
    if (--*p.compute_remaining == 0) {
      p.compute_remaining.reset();
      resume(p);
    }
    return;
  }
  raise(Errc::QuiescenceWithRunnableWork,
        fmt::format("process {} was scheduled with nothing to do", p.index));
}

void Engine::run(uint64_t max_events) {
  std::vector<Process*> runnable;
  for (;;) {
    runnable.clear();
    for (auto& p : procs_)
      if (can_step(*p)) runnable.push_back(p.get());
    if (runnable.empty()) {
      // Fast-forward the clock over finite pauses; otherwise quiescence.
      uint64_t next = UINT64_MAX;
      for (auto& p : procs_)
        if (!p->exited && p->paused && !p->pause_indefinite && p->resume_step > step_)
          next = std::min(next, p->resume_step);
      if (next == UINT64_MAX) break;
      step_ = next;
      continue;
    }
    Process& p = *runnable[choose(static_cast<uint32_t>(runnable.size()))];
    ++step_;
    step(p);
    if (recorder_.trace().event_count() > max_events)
      raise(Errc::BoundExceeded,
            fmt::format("trace exceeded {} events", max_events));
  }
}

constexpr uint64_t kRunEventCap = 1000000;  // runaway guard for seeded runs

}  // namespace

SimRun run_simulation(const SimConfig& config, uint64_t seed,
                      const std::vector<FaultRule>& extra_rules, const RunLibrary* library,
                      uint64_t iteration) {
  std::vector<FaultRule> rules = extra_rules;
  rules.insert(rules.end(), config.builtin_faults.begin(), config.builtin_faults.end());
  FaultEngine faults(std::move(rules), seed);

  TraceMeta meta;
  meta.seed = seed;
  meta.config = config.name;
  meta.iteration = iteration;
  Recorder recorder(meta, library, &faults);
  RandomChooser chooser(seed);
  Engine engine(config, chooser, recorder);
  engine.start();
  engine.run(kRunEventCap);

  SimRun out;
  out.steps = engine.steps();
  out.follow = recorder.follow();
  out.warnings = recorder.warnings();
  // Logical wall time keeps equal inputs byte-identical on disk.
  recorder.set_wall_ms(engine.steps() / std::max<uint32_t>(1, config.steps_per_ms));
  out.trace = recorder.finish();
  return out;
}

Enumeration enumerate_all_schedules(const SimConfig& config, uint64_t max_events,
                                    uint64_t max_schedules) {
  Enumeration out;
  std::vector<uint32_t> path;
  for (;;) {
    PathChooser chooser(path);
    TraceMeta meta;
    meta.config = config.name;
    Recorder recorder(meta, nullptr, nullptr);
    Engine engine(config, chooser, recorder);
    engine.start();
    engine.run(max_events);
    Trace trace = recorder.finish();

    if (++out.schedules > max_schedules)
      raise(Errc::BoundExceeded, fmt::format("more than {} schedules", max_schedules));
    bool found = false;
    for (size_t i = 0; i < out.distinct_traces.size(); ++i) {
      if (out.distinct_traces[i] == trace) {
        ++out.multiplicity[i];
        found = true;
        break;
      }
    }
    if (!found) {
      out.distinct_traces.push_back(std::move(trace));
      out.multiplicity.push_back(1);
    }

    // Next path: rightmost choice with an unexplored sibling.
    const auto& taken = chooser.taken();
    const auto& fanout = chooser.fanout();
    size_t i = taken.size();
    while (i > 0 && taken[i - 1] + 1 >= fanout[i - 1]) --i;
    if (i == 0) break;
    path.assign(taken.begin(), taken.begin() + (i - 1));
    path.push_back(taken[i - 1] + 1);
  }
  return out;
}

}  // namespace hbt::sim
