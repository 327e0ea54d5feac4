#include "hbtrace/run_library.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "hbtrace/causality.hpp"
#include "hbtrace/errors.hpp"
#include "hbtrace/trace_io.hpp"

namespace hbt {

namespace fs = std::filesystem;

static constexpr const char* kIndexName = "index.txt";
static constexpr const char* kIndexHeader = "hbtrace-index v1";
static constexpr const char* kTraceExt = ".trace";

FollowCursor::FollowCursor(std::string run_id, const Trace* run)
    : run_id_(std::move(run_id)), run_(run) {
  pos_.resize(run->process_count());
  for (uint32_t p = 0; p < run->process_count(); ++p)
    pos_[p].assign(run->thread_count(p), 0);
  total_ = run->event_count();
}

void FollowCursor::step(const Event& ev) {
  if (status_ == FollowStatus::Diverged) return;
  uint32_t p = ev.coord.process, t = ev.coord.thread;
  if (p >= pos_.size() || t >= pos_[p].size()) {
    status_ = FollowStatus::Diverged;  // thread the loaded run never had
    return;
  }
  uint32_t at = pos_[p][t];
  const auto& log = run_->log(p, t);
  if (at >= log.size()) {
    status_ = FollowStatus::Diverged;  // extra event beyond the loaded run
    return;
  }
  if (key_of(log[at]) != key_of(ev)) {
    status_ = FollowStatus::Diverged;
    return;
  }
  pos_[p][t] = at + 1;
  ++consumed_;
}

bool FollowCursor::exhausted() const { return consumed_ == total_; }

uint32_t FollowCursor::position(uint32_t process, uint32_t thread) const {
  if (process >= pos_.size() || thread >= pos_[process].size()) return 0;
  return pos_[process][thread];
}

FollowSet::FollowSet(const RunLibrary& library) {
  library.for_each_run(
      [&](const std::string& id, const Trace& run) { cursors_.emplace_back(id, &run); });
}

void FollowSet::step(const Event& ev) {
  for (FollowCursor& c : cursors_) c.step(ev);
}

const FollowCursor* FollowSet::cursor(const std::string& run_id) const {
  for (const FollowCursor& c : cursors_)
    if (c.run_id() == run_id) return &c;
  return nullptr;
}

size_t FollowSet::following_count() const {
  size_t n = 0;
  for (const FollowCursor& c : cursors_)
    if (c.following()) ++n;
  return n;
}

RunLibrary RunLibrary::open(const fs::path& dir) {
  RunLibrary lib;
  lib.dir_ = dir;
  fs::create_directories(dir);
  fs::path index = dir / kIndexName;
  if (!fs::exists(index)) return lib;

  std::ifstream in(index);
  std::string line;
  if (!std::getline(in, line) || line != kIndexHeader)
    raise(Errc::FormatVersionMismatch, fmt::format("bad index header in {}", index.string()));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, file;
    uint64_t count = 0;
    if (!(row >> id >> count >> file))
      raise(Errc::CorruptRecord, fmt::format("bad index row '{}'", line));
    Trace trace = read_trace_file(dir / file);
    if (trace.run_id() != id)
      raise(Errc::CorruptRecord,
            fmt::format("{} holds run {} but the index says {}", file, trace.run_id(), id));
    Entry entry;
    entry.trace = std::make_unique<Trace>(std::move(trace));
    entry.count = count;
    lib.iterations_ += count;
    lib.runs_.emplace(id, std::move(entry));
  }
  return lib;
}

RunLibrary RunLibrary::snapshot() const {
  RunLibrary copy;
  for (const auto& [id, entry] : runs_) {
    Entry e;
    e.trace = std::make_unique<Trace>(*entry.trace);
    e.count = entry.count;
    copy.runs_.emplace(id, std::move(e));
  }
  copy.iterations_ = iterations_;
  return copy;
}

void RunLibrary::persist_trace(const Trace& trace) const {
  if (dir_.empty()) return;
  write_trace_file(trace, dir_ / (trace.run_id() + kTraceExt));
}

void RunLibrary::rewrite_index() const {
  if (dir_.empty()) return;
  fs::path tmp = dir_ / (std::string(kIndexName) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << kIndexHeader << '\n';
    for (const auto& [id, entry] : runs_)
      out << id << ' ' << entry.count << ' ' << id << kTraceExt << '\n';
  }
  fs::rename(tmp, dir_ / kIndexName);
}

FinalizeResult RunLibrary::finalize_execution(const FollowSet& cursors, Trace new_trace) {
  if (!new_trace.finalized()) raise(Errc::TraceNotFinalized, "finalize the trace first");

  const FollowCursor* followed = nullptr;
  for (const FollowCursor& c : cursors.cursors()) {
    if (!c.following() || !c.exhausted()) continue;
    if (followed)
      raise(Errc::AmbiguousFollow,
            fmt::format("runs {} and {} were both fully followed", followed->run_id(),
                        c.run_id()));
    followed = &c;
  }

  if (followed) {
    if (new_trace.run_id() != followed->run_id())
      raise(Errc::AmbiguousFollow,
            fmt::format("followed {} but the trace fingerprints as {}", followed->run_id(),
                        new_trace.run_id()));
    auto it = runs_.find(followed->run_id());
    if (it == runs_.end()) raise(Errc::UnknownRun, followed->run_id());
    ++it->second.count;
    ++iterations_;
    rewrite_index();
    return {FinalizeResult::Kind::FollowedExisting, followed->run_id()};
  }
  if (runs_.count(new_trace.run_id()))
    raise(Errc::AmbiguousFollow,
          fmt::format("no cursor followed, yet run {} is already stored; the online follower "
                      "and the fingerprint disagree",
                      new_trace.run_id()));
  return merge_run(std::move(new_trace));
}

FinalizeResult RunLibrary::merge_run(Trace new_trace) {
  if (!new_trace.finalized()) raise(Errc::TraceNotFinalized, "finalize the trace first");
  std::string id = new_trace.run_id();
  auto it = runs_.find(id);
  if (it != runs_.end()) {
    ++it->second.count;
    ++iterations_;
    rewrite_index();
    return {FinalizeResult::Kind::FollowedExisting, id};
  }
  Entry entry;
  entry.trace = std::make_unique<Trace>(std::move(new_trace));
  entry.count = 1;
  persist_trace(*entry.trace);
  runs_.emplace(id, std::move(entry));
  ++iterations_;
  rewrite_index();
  return {FinalizeResult::Kind::Novel, id};
}

void RunLibrary::merge_followed(const std::string& run_id) {
  auto it = runs_.find(run_id);
  if (it == runs_.end()) raise(Errc::UnknownRun, run_id);
  ++it->second.count;
  ++iterations_;
  rewrite_index();
}

const Trace* RunLibrary::find(const std::string& run_id) const {
  auto it = runs_.find(run_id);
  return it == runs_.end() ? nullptr : it->second.trace.get();
}

uint64_t RunLibrary::count_of(const std::string& run_id) const {
  auto it = runs_.find(run_id);
  return it == runs_.end() ? 0 : it->second.count;
}

std::vector<ReportRow> RunLibrary::distribution_report() const {
  if (iterations_ == 0) raise(Errc::EmptyLibrary, "no iterations recorded");
  std::vector<ReportRow> rows;
  rows.reserve(runs_.size());
  for (const auto& [id, entry] : runs_)
    if (entry.count > 0) rows.push_back({id, entry.count, 0.0});
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.run_id < b.run_id;
  });
  uint64_t running = 0;
  for (ReportRow& row : rows) {
    running += row.count;
    row.cumulative_fraction = static_cast<double>(running) / static_cast<double>(iterations_);
  }
  return rows;
}

}  // namespace hbt
