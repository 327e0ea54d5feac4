#pragma once

#include <string>

#include "hbtrace/trace.hpp"

namespace hbt {

// Canonical partial-order form of a trace: per process in launch order, per
// thread in creation order, the sequence of (syscall, phase, outcome class,
// sorted parent coordinates). Two traces get equal fingerprints iff their
// per-thread key sequences and edge sets are identical. The observation
// interleaving, byte counts, endpoints, and metadata do not contribute.
std::string fingerprint(const Trace& trace);

// Collision-resistant id over the fingerprint (SHA-256, lowercase hex).
std::string run_id_of(const Trace& trace);
std::string sha256_hex(std::string_view data);

// Happens-before queries over a finalized trace. Builds per-node ancestor
// bitsets once; queries are O(1) after that.
class CausalGraph {
 public:
  explicit CausalGraph(const Trace& trace);

  // Strict order: true iff a directed path of length >= 1 leads from a to b.
  bool happens_before(EventCoord a, EventCoord b) const;

  // Neither a<b nor b<a, and a != b.
  bool concurrent(EventCoord a, EventCoord b) const;

  size_t node_count() const { return labels_.size(); }

 private:
  size_t node_of(EventCoord c) const;  // Errc::UnknownCoord if absent
  bool ancestor(size_t a, size_t b) const;

  const Trace* trace_;
  std::vector<EventCoord> labels_;
  std::vector<std::vector<uint32_t>> offsets_;  // [process][thread] -> base node id
  size_t words_ = 0;
  std::vector<uint64_t> anc_;  // node-major bitsets, words_ per node
};

// Graphviz document: one node per event labeled "p.t: syscall/phase", solid
// intra-thread chains, dashed cross-thread edges, one color per thread.
std::string export_dot(const Trace& trace);

}  // namespace hbt
