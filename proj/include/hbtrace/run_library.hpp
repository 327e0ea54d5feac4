#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hbtrace/trace.hpp"

namespace hbt {

class RunLibrary;

enum class FollowStatus : uint8_t { Following, Diverged };

// Tracks one loaded run against the live execution: per-thread positions of
// the next unmatched event. Once Diverged it never returns to Following.
class FollowCursor {
 public:
  FollowCursor(std::string run_id, const Trace* run);

  // Compares the event's matching key against the loaded run's event at that
  // thread's position; advances on match, diverges on mismatch or overrun.
  void step(const Event& ev);

  FollowStatus status() const { return status_; }
  bool following() const { return status_ == FollowStatus::Following; }
  // All per-thread positions consumed the loaded run exactly.
  bool exhausted() const;
  const std::string& run_id() const { return run_id_; }
  const Trace* run() const { return run_; }
  uint32_t position(uint32_t process, uint32_t thread) const;

 private:
  std::string run_id_;
  const Trace* run_;
  std::vector<std::vector<uint32_t>> pos_;
  uint64_t consumed_ = 0;
  uint64_t total_ = 0;
  FollowStatus status_ = FollowStatus::Following;
};

// One cursor per loaded run.
class FollowSet {
 public:
  FollowSet() = default;
  explicit FollowSet(const RunLibrary& library);
  explicit FollowSet(std::vector<FollowCursor> cursors) : cursors_(std::move(cursors)) {}

  void step(const Event& ev);
  const std::vector<FollowCursor>& cursors() const { return cursors_; }
  const FollowCursor* cursor(const std::string& run_id) const;
  size_t following_count() const;

 private:
  std::vector<FollowCursor> cursors_;
};

struct FinalizeResult {
  enum class Kind : uint8_t { FollowedExisting, Novel } kind;
  std::string run_id;

  bool novel() const { return kind == Kind::Novel; }
};

struct ReportRow {
  std::string run_id;
  uint64_t count = 0;
  double cumulative_fraction = 0.0;
};

// The persisted set of partial-order-distinct runs plus occurrence counts.
// When bound to a directory, novel runs are written as one file per run named
// by run_id, and an index file carries the counts; everything is loaded
// eagerly by open().
class RunLibrary {
 public:
  RunLibrary() = default;  // in-memory only

  static RunLibrary open(const std::filesystem::path& dir);

  // Deep in-memory copy, detached from any directory. Parallel experiment
  // workers follow against one of these while the live library grows.
  RunLibrary snapshot() const;

  // The end-of-execution novelty decision: FollowedExisting iff some cursor
  // is still Following and fully consumed its run; otherwise the trace is
  // fingerprinted, inserted, and persisted. Occurrence counts update either
  // way. Two fully-followed runs violate library distinctness and raise
  // Errc::AmbiguousFollow.
  FinalizeResult finalize_execution(const FollowSet& cursors, Trace new_trace);

  // Order-independent merge used by parallel experiment workers, which
  // follow against a stale snapshot: duplicates collapse by run id.
  FinalizeResult merge_run(Trace new_trace);
  void merge_followed(const std::string& run_id);

  const Trace* find(const std::string& run_id) const;
  bool contains(const std::string& run_id) const { return find(run_id) != nullptr; }
  size_t size() const { return runs_.size(); }
  uint64_t iterations() const { return iterations_; }
  uint64_t count_of(const std::string& run_id) const;

  // Runs sorted by descending count (run id breaks ties); cumulative
  // fraction is monotone to 1.0. Errc::EmptyLibrary with no iterations.
  std::vector<ReportRow> distribution_report() const;

  template <class F>
  void for_each_run(F&& fn) const {
    for (const auto& [id, entry] : runs_) fn(id, *entry.trace);
  }

 private:
  struct Entry {
    std::unique_ptr<Trace> trace;
    uint64_t count = 0;
  };

  void persist_trace(const Trace& trace) const;
  void rewrite_index() const;

  std::map<std::string, Entry> runs_;
  uint64_t iterations_ = 0;
  std::filesystem::path dir_;  // empty => in-memory only
};

}  // namespace hbt
