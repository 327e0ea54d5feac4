#include "hbtrace/live/tracer.hpp"

#include <fmt/format.h>

#include <netinet/in.h>
#include <sys/ptrace.h>
#include <sys/syscall.h>
#include <sys/user.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "hbtrace/errors.hpp"
#include "hbtrace/recorder.hpp"

namespace hbt::live {

namespace {

using Clock = std::chrono::steady_clock;

uint64_t now_ms(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
}

long xptrace(__ptrace_request req, pid_t pid, void* addr, void* data, const char* what) {
  errno = 0;
  long rc = ptrace(req, pid, addr, data);
  if (rc == -1 && errno != 0)
    raise(errno == EPERM || errno == EACCES ? Errc::AttachDenied : Errc::TraceeDied,
          fmt::format("{} on {}: {}", what, pid, strerror(errno)));
  return rc;
}

struct Sockaddr {
  Endpoint ep;
  bool inet = false;
};

Sockaddr decode_sockaddr(const unsigned char* buf, size_t len) {
  Sockaddr out;
  if (len < sizeof(sockaddr_in)) return out;
  const auto* sin = reinterpret_cast<const sockaddr_in*>(buf);
  if (sin->sin_family != AF_INET) return out;
  out.inet = true;
  out.ep.addr = ntohl(sin->sin_addr.s_addr);
  out.ep.port = ntohs(sin->sin_port);
  return out;
}

// Per-thread tracee bookkeeping. Threads of one process share the
// descriptor table; events are attributed per thread.
struct Tracee {
  pid_t tid = 0;
  uint32_t process = 0;
  uint32_t thread = 0;
  bool in_syscall = false;
  bool tracked_call = false;  // current syscall is being recorded
  Syscall kind = Syscall::Socket;
  ArgsDigest entry_args;
  Endpoint connect_dest;
  std::optional<int> doomed;  // errno injection latched at entry
  bool exited = false;
};

struct ProcessState {
  uint64_t syscall_insn = 0;  // discovered at the first stop
  uint32_t next_thread = 1;
  std::map<int32_t, bool> inet_fds;  // tracked descriptors
};

struct ParkedExit {
  pid_t tid;
  uint64_t stream;
  Dir dir;
  uint64_t count;
};

class Session {
 public:
  Session(const TraceOptions& opt, const RunLibrary* library)
      : opt_(opt),
        faults_(opt.faults, opt.seed),
        recorder_(TraceMeta{opt.seed, opt.config_name, 0, 0}, library, &faults_) {}

  LiveRun run();

 private:
  void launch(uint32_t index);
  void handle_stop(pid_t tid, int status);
  void on_syscall_stop(Tracee& t);
  void on_entry(Tracee& t, const user_regs_struct& regs);
  void on_exit(Tracee& t, const user_regs_struct& regs);
  void apply_entry_action(Tracee& t, user_regs_struct regs, const ResolvedAction& action);
  bool read_mem(pid_t tid, uint64_t addr, void* buf, size_t len);
  bool write_mem(pid_t tid, uint64_t addr, const void* buf, size_t len);
  std::optional<long> inject_syscall(Tracee& t, long nr, std::array<uint64_t, 6> args);
  std::optional<Endpoint> query_endpoint(Tracee& t, int32_t fd, bool peer);
  void resume(pid_t tid, int sig = 0);
  void pause_thread(pid_t tid, std::optional<uint64_t> ms);
  bool try_park_read_exit(Tracee& t, int64_t ret);
  void retry_parked();
  void finish_exit_event(Tracee& t, int64_t ret);
  void kill_all();
  void warn(std::string msg) { warnings_.push_back(std::move(msg)); }

  const TraceOptions& opt_;
  FaultEngine faults_;
  Recorder recorder_;
  std::vector<std::string> warnings_;
  std::map<pid_t, Tracee> tracees_;
  std::map<pid_t, uint32_t> pid_to_process_;
  std::vector<ProcessState> processes_;
  std::map<pid_t, std::optional<Clock::time_point>> paused_;  // nullopt = indefinite
  std::vector<ParkedExit> parked_;
  Clock::time_point t0_;
  size_t live_count_ = 0;
};

std::vector<char*> argv_of(const std::vector<std::string>& cmd, std::vector<std::string>& keep) {
  keep = cmd;
  std::vector<char*> argv;
  for (std::string& s : keep) argv.push_back(s.data());
  argv.push_back(nullptr);
  return argv;
}

void Session::launch(uint32_t index) {
  const auto& cmd = opt_.commands[index];
  pid_t pid = fork();
  if (pid < 0) raise(Errc::ConfigError, "fork failed");
  if (pid == 0) {
    if (ptrace(PTRACE_TRACEME, 0, nullptr, nullptr) < 0) _exit(127);
    std::vector<std::string> keep;
    auto argv = argv_of(cmd, keep);
    execvp(argv[0], argv.data());
    _exit(127);
  }
  int status = 0;
  if (waitpid(pid, &status, 0) < 0 || !WIFSTOPPED(status))
    raise(Errc::AttachDenied, fmt::format("tracee {} failed to stop at exec", pid));
  long opts = PTRACE_O_TRACESYSGOOD | PTRACE_O_TRACECLONE | PTRACE_O_EXITKILL;
  xptrace(PTRACE_SETOPTIONS, pid, nullptr, reinterpret_cast<void*>(opts), "SETOPTIONS");

  Tracee t;
  t.tid = pid;
  t.process = index;
  t.thread = 0;
  tracees_[pid] = t;
  pid_to_process_[pid] = index;
  recorder_.declare_thread(index, 0);
  ++live_count_;
  resume(pid);
}

void Session::resume(pid_t tid, int sig) {
  if (ptrace(PTRACE_SYSCALL, tid, nullptr, reinterpret_cast<void*>(static_cast<long>(sig))) <
      0) {
    if (errno != ESRCH)
      warn(fmt::format("resume of {} failed: {}", tid, strerror(errno)));
  }
}

bool Session::read_mem(pid_t tid, uint64_t addr, void* buf, size_t len) {
  auto* out = static_cast<unsigned char*>(buf);
  for (size_t off = 0; off < len; off += sizeof(long)) {
    errno = 0;
    long word = ptrace(PTRACE_PEEKDATA, tid, reinterpret_cast<void*>(addr + off), nullptr);
    if (word == -1 && errno != 0) return false;
    std::memcpy(out + off, &word, std::min(sizeof(long), len - off));
  }
  return true;
}

bool Session::write_mem(pid_t tid, uint64_t addr, const void* buf, size_t len) {
  const auto* in = static_cast<const unsigned char*>(buf);
  for (size_t off = 0; off < len; off += sizeof(long)) {
    long word = 0;
    if (len - off < sizeof(long)) {
      errno = 0;
      word = ptrace(PTRACE_PEEKDATA, tid, reinterpret_cast<void*>(addr + off), nullptr);
      if (word == -1 && errno != 0) return false;
    }
    std::memcpy(&word, in + off, std::min(sizeof(long), len - off));
    if (ptrace(PTRACE_POKEDATA, tid, reinterpret_cast<void*>(addr + off),
               reinterpret_cast<void*>(word)) < 0)
      return false;
  }
  return true;
}

// Runs one syscall on the tracee's behalf through its own syscall
// instruction; every register is restored afterwards.
std::optional<long> Session::inject_syscall(Tracee& t, long nr, std::array<uint64_t, 6> args) {
  ProcessState& ps = processes_[t.process];
  if (!ps.syscall_insn) return std::nullopt;
  user_regs_struct saved;
  if (ptrace(PTRACE_GETREGS, t.tid, nullptr, &saved) < 0) return std::nullopt;
  user_regs_struct regs = saved;
  regs.rip = ps.syscall_insn;
  regs.rax = static_cast<unsigned long long>(nr);
  regs.rdi = args[0];
  regs.rsi = args[1];
  regs.rdx = args[2];
  regs.r10 = args[3];
  regs.r8 = args[4];
  regs.r9 = args[5];
  if (ptrace(PTRACE_SETREGS, t.tid, nullptr, &regs) < 0) return std::nullopt;

  std::optional<long> result;
  for (int hop = 0; hop < 2; ++hop) {  // injected entry stop, then exit stop
    if (ptrace(PTRACE_SYSCALL, t.tid, nullptr, nullptr) < 0) break;
    int status = 0;
    if (waitpid(t.tid, &status, __WALL) < 0) break;
    if (!WIFSTOPPED(status) || WSTOPSIG(status) != (SIGTRAP | 0x80)) {
      warn(fmt::format("injection on {} interrupted (status {:#x})", t.tid, status));
      break;
    }
    if (hop == 1) {
      user_regs_struct after;
      if (ptrace(PTRACE_GETREGS, t.tid, nullptr, &after) == 0)
        result = static_cast<long>(after.rax);
    }
  }
  if (ptrace(PTRACE_SETREGS, t.tid, nullptr, &saved) < 0) {
    warn(fmt::format("failed to restore registers of {}", t.tid));
    return std::nullopt;
  }
  return result;
}

std::optional<Endpoint> Session::query_endpoint(Tracee& t, int32_t fd, bool peer) {
  uint64_t scratch = 0;
  user_regs_struct regs;
  if (ptrace(PTRACE_GETREGS, t.tid, nullptr, &regs) < 0) return std::nullopt;
  scratch = regs.rsp - 1024;  // well below the red zone, dead stack space
  uint32_t socklen = sizeof(sockaddr_in);
  if (!write_mem(t.tid, scratch + 64, &socklen, sizeof(socklen))) return std::nullopt;
  sockaddr_in zero{};
  if (!write_mem(t.tid, scratch, &zero, sizeof(zero))) return std::nullopt;
  auto ret = inject_syscall(t, peer ? SYS_getpeername : SYS_getsockname,
                            {static_cast<uint64_t>(fd), scratch, scratch + 64, 0, 0, 0});
  if (!ret || *ret < 0) {
    warn(fmt::format("endpoint query on {}:{} failed; stream tracked one-sided", t.process, fd));
    return std::nullopt;
  }
  unsigned char buf[sizeof(sockaddr_in)];
  if (!read_mem(t.tid, scratch, buf, sizeof(buf))) return std::nullopt;
  Sockaddr sa = decode_sockaddr(buf, sizeof(buf));
  if (!sa.inet) return std::nullopt;
  return sa.ep;
}

void Session::on_entry(Tracee& t, const user_regs_struct& regs) {
  long nr = static_cast<long>(regs.orig_rax);
  ProcessState& ps = processes_[t.process];
  t.tracked_call = false;
  t.doomed.reset();

  auto fd_tracked = [&](int32_t fd) { return ps.inet_fds.count(fd) > 0; };
  int32_t fd = static_cast<int32_t>(regs.rdi);
  ArgsDigest d;
  std::optional<Syscall> sc;

  switch (nr) {
    case SYS_socket:
      if (static_cast<int>(regs.rdi) == AF_INET &&
          (static_cast<int>(regs.rsi) & 0xff) == SOCK_STREAM)
        sc = Syscall::Socket;
      break;
    case SYS_bind:
    case SYS_connect: {
      if (!fd_tracked(fd)) break;
      unsigned char buf[sizeof(sockaddr_in)];
      if (!read_mem(t.tid, regs.rsi, buf, sizeof(buf))) break;
      Sockaddr sa = decode_sockaddr(buf, sizeof(buf));
      if (!sa.inet) break;
      sc = nr == SYS_bind ? Syscall::Bind : Syscall::Connect;
      d.fd = fd;
      d.ep = sa.ep;
      if (nr == SYS_connect) t.connect_dest = sa.ep;
      break;
    }
    case SYS_listen:
      if (fd_tracked(fd)) {
        sc = Syscall::Listen;
        d.fd = fd;
      }
      break;
    case SYS_accept:
    case SYS_accept4:
      if (fd_tracked(fd)) {
        sc = Syscall::Accept;
        d.fd = fd;
      }
      break;
    case SYS_sendto:
      if (regs.r8 != 0) break;  // explicit-address variants are not traced
      [[fallthrough]];
    case SYS_write:
      if (fd_tracked(fd)) {
        sc = Syscall::Write;
        d.fd = fd;
        d.bytes = regs.rdx;
        d.stream = recorder_.tracker().stream_of(t.process, fd);
      }
      break;
    case SYS_recvfrom:
      if (regs.r8 != 0) break;
      [[fallthrough]];
    case SYS_read:
      if (fd_tracked(fd)) {
        sc = Syscall::Read;
        d.fd = fd;
        d.bytes = regs.rdx;
        d.stream = recorder_.tracker().stream_of(t.process, fd);
      }
      break;
    case SYS_close:
      if (fd_tracked(fd)) {
        sc = Syscall::Close;
        d.fd = fd;
      }
      break;
    default:
      break;
  }

  if (!sc) return;  // untracked syscall: pass through unrecorded
  t.tracked_call = true;
  t.kind = *sc;
  t.entry_args = d;
  Recorder::Observed obs = recorder_.on_entry(t.process, t.thread, *sc, d);
  if (obs.action) apply_entry_action(t, regs, *obs.action);
}

void Session::apply_entry_action(Tracee& t, user_regs_struct regs, const ResolvedAction& action) {
  if (const auto* pause = std::get_if<ResolvedPause>(&action)) {
    pause_thread(t.tid, pause->ms);
    return;
  }
  if (const auto* err = std::get_if<ResolvedErrno>(&action)) {
    // Invalidate the descriptor argument so the real call cannot succeed;
    // the exit handler overwrites the return value with -code.
    t.doomed = err->code;
    regs.rdi = static_cast<unsigned long long>(-1);
    if (ptrace(PTRACE_SETREGS, t.tid, nullptr, &regs) < 0)
      warn(fmt::format("errno injection on {} could not mutate registers", t.tid));
    return;
  }
  if (const auto* trunc = std::get_if<ResolvedTruncate>(&action)) {
    regs.rdx = trunc->count;
    if (ptrace(PTRACE_SETREGS, t.tid, nullptr, &regs) < 0)
      warn(fmt::format("write truncation on {} could not mutate registers", t.tid));
  }
}

void Session::pause_thread(pid_t tid, std::optional<uint64_t> ms) {
  if (ms)
    paused_[tid] = Clock::now() + std::chrono::milliseconds(*ms);
  else
    paused_[tid] = std::nullopt;
}

bool Session::try_park_read_exit(Tracee& t, int64_t ret) {
  // A read's exit stop can be serviced before the producing write's: the
  // bytes exist in the kernel while the writer still sits in its own stop.
  // Hold this tracee until the tracker has seen enough written bytes.
  if (t.kind != Syscall::Read || ret <= 0 || !t.entry_args.stream) return false;
  auto dir = recorder_.tracker().write_direction(t.process, *t.entry_args.fd);
  if (!dir) return false;
  const StreamState& st = recorder_.tracker().stream(*t.entry_args.stream);
  const HalfStream& half = st.half(opposite(*dir));
  if (!half.writer_observed) return false;
  if (half.write_cursor - half.read_cursor >= static_cast<uint64_t>(ret)) return false;
  parked_.push_back(
      ParkedExit{t.tid, *t.entry_args.stream, opposite(*dir), static_cast<uint64_t>(ret)});
  return true;
}

void Session::finish_exit_event(Tracee& t, int64_t ret) {
  ProcessState& ps = processes_[t.process];
  OutcomeClass out;
  out.err = ret < 0 ? static_cast<int>(-ret) : 0;
  ArgsDigest d = t.entry_args;
  bool ok = ret >= 0;

  switch (t.kind) {
    case Syscall::Socket:
      if (ok) {
        d.fd = static_cast<int32_t>(ret);
        ps.inet_fds[static_cast<int32_t>(ret)] = true;
      }
      break;
    case Syscall::Connect:
      if (ok) {
        if (auto local = query_endpoint(t, *d.fd, false)) d.local = *local;
      }
      break;
    case Syscall::Accept: {
      if (ok) {
        int32_t child = static_cast<int32_t>(ret);
        ps.inet_fds[child] = true;
        d.fd = child;
        if (auto peer = query_endpoint(t, child, true)) {
          d.ep = *peer;
          out.peer = *peer;
        }
        if (auto local = query_endpoint(t, child, false)) d.local = *local;
      }
      break;
    }
    case Syscall::Read:
    case Syscall::Write:
      if (ok) d.bytes = static_cast<uint64_t>(ret);
      d.stream = recorder_.tracker().stream_of(t.process, *t.entry_args.fd);
      break;
    case Syscall::Close:
      if (ok) ps.inet_fds.erase(*d.fd);
      break;
    default:
      break;
  }

  Recorder::Observed obs = recorder_.on_exit(t.process, t.thread, t.kind, out, d);
  if (obs.action) {
    if (const auto* pause = std::get_if<ResolvedPause>(&*obs.action)) {
      pause_thread(t.tid, pause->ms);
      return;  // do not resume; the run loop wakes it later (or never)
    }
  }
  resume(t.tid);
}

void Session::on_exit(Tracee& t, const user_regs_struct& regs) {
  if (!t.tracked_call) {
    resume(t.tid);
    return;
  }
  t.tracked_call = false;
  int64_t ret = static_cast<int64_t>(regs.rax);
  if (t.doomed) {
    // Second phase of errno injection: the doomed call failed on the
    // invalid argument; present the requested error to the tracee.
    user_regs_struct mutated = regs;
    mutated.rax = static_cast<unsigned long long>(-*t.doomed);
    if (ptrace(PTRACE_SETREGS, t.tid, nullptr, &mutated) < 0)
      warn(fmt::format("errno injection on {} could not rewrite the result", t.tid));
    ret = -static_cast<int64_t>(*t.doomed);
    t.doomed.reset();
  }
  if (try_park_read_exit(t, ret)) return;
  finish_exit_event(t, ret);
}

void Session::retry_parked() {
  for (auto it = parked_.begin(); it != parked_.end();) {
    const StreamState& st = recorder_.tracker().stream(it->stream);
    const HalfStream& half = st.half(it->dir);
    if (half.write_cursor - half.read_cursor >= it->count) {
      Tracee& t = tracees_.at(it->tid);
      uint64_t count = it->count;
      it = parked_.erase(it);
      finish_exit_event(t, static_cast<int64_t>(count));
    } else {
      ++it;
    }
  }
}

void Session::on_syscall_stop(Tracee& t) {
  user_regs_struct regs;
  if (ptrace(PTRACE_GETREGS, t.tid, nullptr, &regs) < 0) return;
  ProcessState& ps = processes_[t.process];
  if (!ps.syscall_insn) {
    // The stop address points right past a syscall instruction (0f 05).
    errno = 0;
    long word = ptrace(PTRACE_PEEKTEXT, t.tid, reinterpret_cast<void*>(regs.rip - 2), nullptr);
    if (errno == 0 && (word & 0xffff) == 0x050f) ps.syscall_insn = regs.rip - 2;
  }
  if (!t.in_syscall) {
    t.in_syscall = true;
    on_entry(t, regs);
    if (!paused_.count(t.tid)) resume(t.tid);  // a pause holds the thread here
  } else {
    t.in_syscall = false;
    on_exit(t, regs);  // resumes (or parks/pauses) the tracee itself
  }
}

void Session::handle_stop(pid_t tid, int status) {
  auto it = tracees_.find(tid);
  if (it == tracees_.end()) {
    // First sight of a clone child: attribute it to its process; creation
    // order within the process numbers the thread.
    uint32_t proc = UINT32_MAX;
    if (auto pit = pid_to_process_.find(tid); pit != pid_to_process_.end())
      proc = pit->second;
    if (proc == UINT32_MAX) {
      resume(tid);
      return;
    }
    Tracee t;
    t.tid = tid;
    t.process = proc;
    t.thread = processes_[proc].next_thread++;
    recorder_.declare_thread(proc, t.thread);
    it = tracees_.emplace(tid, t).first;
    ++live_count_;
    if (WIFSTOPPED(status)) {
      resume(tid);
      return;
    }
  }

  Tracee& t = it->second;
  if (WIFEXITED(status) || WIFSIGNALED(status)) {
    if (!t.exited) {
      t.exited = true;
      --live_count_;
      // Dying inside an untracked syscall (exit_group) is the normal way
      // out; only a tracked socket call left dangling is noteworthy.
      if (t.tracked_call)
        warn(fmt::format("tracee {} died mid-syscall; run finalized as partial", tid));
    }
    return;
  }
  if (!WIFSTOPPED(status)) return;

  unsigned event = static_cast<unsigned>(status) >> 16;
  if (event == PTRACE_EVENT_CLONE) {
    unsigned long child = 0;
    if (ptrace(PTRACE_GETEVENTMSG, tid, nullptr, &child) == 0)
      pid_to_process_[static_cast<pid_t>(child)] = t.process;
    resume(tid);
    return;
  }
  if (WSTOPSIG(status) == (SIGTRAP | 0x80)) {
    on_syscall_stop(t);
    return;
  }
  // Genuine signal: deliver it; other trap stops pass through silently.
  resume(tid, WSTOPSIG(status) == SIGTRAP ? 0 : WSTOPSIG(status));
}

void Session::kill_all() {
  for (auto& [tid, t] : tracees_)
    if (!t.exited) kill(tid, SIGKILL);
  int status = 0;
  while (waitpid(-1, &status, __WALL) > 0) {
  }
}

LiveRun Session::run() {
  if (opt_.commands.empty()) raise(Errc::ConfigError, "no commands to trace");
  processes_.resize(opt_.commands.size());
  t0_ = Clock::now();
  size_t launched = 0;

  for (;;) {
    while (launched < opt_.commands.size() &&
           now_ms(t0_) >= launched * opt_.launch_delay_ms) {
      launch(static_cast<uint32_t>(launched));
      ++launched;
    }
    // Wake paused threads whose delay elapsed.
    for (auto it = paused_.begin(); it != paused_.end();) {
      if (it->second && Clock::now() >= *it->second) {
        resume(it->first);
        it = paused_.erase(it);
      } else {
        ++it;
      }
    }

    if (launched == opt_.commands.size() && live_count_ == 0) break;
    if (now_ms(t0_) > opt_.max_wall_ms) {
      warn("wall-clock limit reached; killing remaining tracees and finalizing as blocked");
      kill_all();
      break;
    }

    int status = 0;
    pid_t pid = waitpid(-1, &status, __WALL | WNOHANG);
    if (pid < 0 && errno == ECHILD && launched == opt_.commands.size()) break;
    if (pid <= 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
      continue;
    }
    handle_stop(pid, status);
    retry_parked();
  }

  LiveRun out;
  recorder_.set_wall_ms(now_ms(t0_));
  out.follow = recorder_.follow();
  for (const std::string& w : recorder_.warnings()) warnings_.push_back(w);
  out.warnings = std::move(warnings_);
  out.trace = recorder_.finish();
  return out;
}

}  // namespace

LiveRun trace_processes(const TraceOptions& options, const RunLibrary* library) {
  Session session(options, library);
  return session.run();
}

std::vector<std::string> split_command(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  if (out.empty()) raise(Errc::ConfigError, "empty command");
  return out;
}

}  // namespace hbt::live
