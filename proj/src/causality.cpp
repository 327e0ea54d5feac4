#include "hbtrace/causality.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <algorithm>
#include <deque>

#include "hbtrace/errors.hpp"

namespace hbt {

// Canonical form, one line per event under per-thread section headers:
//
//   po-v1
//   thread 0.0
//   accept E
//   accept X ok
//   thread 1.0
//   connect E
//   connect X ok <- 0.0.0
//
// Exits append "ok" or "e<errno>"; parents append " <- p.t.i,p.t.i" sorted.
std::string fingerprint(const Trace& trace) {
  std::string out = "po-v1\n";
  for (uint32_t p = 0; p < trace.process_count(); ++p) {
    for (uint32_t t = 0; t < trace.thread_count(p); ++t) {
      out += fmt::format("thread {}.{}\n", p, t);
      for (const Event& ev : trace.log(p, t)) {
        out += syscall_name(ev.syscall);
        out += ' ';
        out += phase_name(ev.phase);
        if (ev.outcome)
          out += ev.outcome->success() ? " ok" : fmt::format(" e{}", ev.outcome->err);
        if (!ev.parents.empty()) {
          out += " <- ";
          for (size_t i = 0; i < ev.parents.size(); ++i) {
            if (i) out += ',';
            out += ev.parents[i].str();
          }
        }
        out += '\n';
      }
    }
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  std::string hex;
  hex.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string run_id_of(const Trace& trace) { return sha256_hex(fingerprint(trace)); }

CausalGraph::CausalGraph(const Trace& trace) : trace_(&trace) {
  offsets_.resize(trace.process_count());
  for (uint32_t p = 0; p < trace.process_count(); ++p) {
    offsets_[p].resize(trace.thread_count(p));
    for (uint32_t t = 0; t < trace.thread_count(p); ++t) {
      offsets_[p][t] = static_cast<uint32_t>(labels_.size());
      for (const Event& ev : trace.log(p, t)) labels_.push_back(ev.coord);
    }
  }

  size_t n = labels_.size();
  words_ = (n + 63) / 64;
  anc_.assign(n * words_, 0);

  // Kahn over thread-chain + parent edges; the trace guarantees acyclicity,
  // so every node is processed.
  std::vector<uint32_t> indeg(n, 0);
  std::vector<std::vector<uint32_t>> children(n);
  for (size_t v = 0; v < n; ++v) {
    EventCoord c = labels_[v];
    if (c.index > 0) {
      children[v - 1].push_back(static_cast<uint32_t>(v));
      ++indeg[v];
    }
    for (const EventCoord& p : trace.at(c).parents) {
      children[node_of(p)].push_back(static_cast<uint32_t>(v));
      ++indeg[v];
    }
  }
  std::deque<uint32_t> ready;
  for (size_t v = 0; v < n; ++v)
    if (indeg[v] == 0) ready.push_back(static_cast<uint32_t>(v));
  size_t done = 0;
  while (!ready.empty()) {
    uint32_t u = ready.front();
    ready.pop_front();
    ++done;
    for (uint32_t v : children[u]) {
      uint64_t* av = &anc_[v * words_];
      const uint64_t* au = &anc_[u * words_];
      for (size_t w = 0; w < words_; ++w) av[w] |= au[w];
      av[u / 64] |= uint64_t{1} << (u % 64);
      if (--indeg[v] == 0) ready.push_back(v);
    }
  }
  if (done != n) raise(Errc::WouldCreateCycle, "trace edge relation is cyclic");
}

size_t CausalGraph::node_of(EventCoord c) const {
  if (c.process >= offsets_.size() || c.thread >= offsets_[c.process].size() ||
      !trace_->contains(c))
    raise(Errc::UnknownCoord, c.str());
  return offsets_[c.process][c.thread] + c.index;
}

bool CausalGraph::ancestor(size_t a, size_t b) const {
  return (anc_[b * words_ + a / 64] >> (a % 64)) & 1;
}

bool CausalGraph::happens_before(EventCoord a, EventCoord b) const {
  size_t na = node_of(a), nb = node_of(b);
  if (na == nb) return false;
  return ancestor(na, nb);
}

bool CausalGraph::concurrent(EventCoord a, EventCoord b) const {
  size_t na = node_of(a), nb = node_of(b);
  return na != nb && !ancestor(na, nb) && !ancestor(nb, na);
}

static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string export_dot(const Trace& trace) {
  std::string out = "digraph trace {\n  rankdir=TB;\n  node [shape=box, style=filled];\n";
  size_t color = 0;
  for (uint32_t p = 0; p < trace.process_count(); ++p) {
    for (uint32_t t = 0; t < trace.thread_count(p); ++t) {
      const char* fill = kPalette[color++ % (sizeof(kPalette) / sizeof(*kPalette))];
      const auto& log = trace.log(p, t);
      for (const Event& ev : log) {
        std::string label = fmt::format("{}.{}: {}/{}", p, t, syscall_name(ev.syscall),
                                        phase_name(ev.phase));
        if (ev.outcome && !ev.outcome->success())
          label += fmt::format(" e{}", ev.outcome->err);
        out += fmt::format("  \"{}\" [label=\"{}\", fillcolor=\"{}\"];\n", ev.coord.str(),
                           label, fill);
      }
      for (size_t i = 1; i < log.size(); ++i)
        out += fmt::format("  \"{}\" -> \"{}\";\n", log[i - 1].coord.str(),
                           log[i].coord.str());
    }
  }
  trace.for_each_event([&](const Event& ev) {
    for (const EventCoord& par : ev.parents)
      out += fmt::format("  \"{}\" -> \"{}\" [style=dashed];\n", par.str(), ev.coord.str());
  });
  out += "}\n";
  return out;
}

}  // namespace hbt
