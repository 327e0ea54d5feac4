#include "hbtrace/trace_io.hpp"

#include <fmt/format.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "hbtrace/errors.hpp"

namespace hbt {

using json = nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;
constexpr const char* kFormatName = "hbtrace";

[[noreturn]] void corrupt(long record, std::string what) {
  Error err(Errc::CorruptRecord, fmt::format("record {}: {}", record, what));
  err.record_index = record;
  throw err;
}

json coord_json(const EventCoord& c) { return json::array({c.process, c.thread, c.index}); }

EventCoord coord_from(const json& j, long record) {
  if (!j.is_array() || j.size() != 3) corrupt(record, "coordinate is not a triple");
  return EventCoord{j[0].get<uint32_t>(), j[1].get<uint32_t>(), j[2].get<uint32_t>()};
}

}  // namespace

std::string serialize(const Trace& trace) {
  if (!trace.finalized()) raise(Errc::TraceNotFinalized, "serialize requires a finalized trace");

  json header;
  header["format"] = kFormatName;
  header["version"] = kFormatVersion;
  header["run_id"] = trace.run_id();
  header["seed"] = trace.meta().seed;
  header["config"] = trace.meta().config;
  header["iteration"] = trace.meta().iteration;
  header["wall_ms"] = trace.meta().wall_ms;
  json threads = json::array();
  for (uint32_t p = 0; p < trace.process_count(); ++p) threads.push_back(trace.thread_count(p));
  header["threads"] = threads;
  header["events"] = trace.event_count();

  std::string out = header.dump();
  out += '\n';

  trace.for_each_event([&](const Event& ev) {
    json rec;
    rec["c"] = coord_json(ev.coord);
    rec["sc"] = syscall_name(ev.syscall);
    rec["ph"] = phase_name(ev.phase);
    if (ev.outcome) {
      rec["out"] = ev.outcome->success() ? "ok" : fmt::format("e{}", ev.outcome->err);
      if (ev.outcome->peer) rec["peer"] = ev.outcome->peer->str();
    }
    json args = json::object();
    if (ev.args.fd) args["fd"] = *ev.args.fd;
    if (ev.args.ep) args["ep"] = ev.args.ep->str();
    if (ev.args.local) args["local"] = ev.args.local->str();
    if (ev.args.stream) args["stream"] = *ev.args.stream;
    if (ev.args.bytes) args["bytes"] = *ev.args.bytes;
    if (!args.empty()) rec["args"] = args;
    if (!ev.parents.empty()) {
      json par = json::array();
      for (const EventCoord& p : ev.parents) par.push_back(coord_json(p));
      rec["par"] = par;
    }
    out += rec.dump();
    out += '\n';
  });
  return out;
}

Trace deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;

  if (!std::getline(in, line)) corrupt(-1, "empty document");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& ex) {
    corrupt(-1, ex.what());
  }
  if (!header.is_object() || header.value("format", "") != kFormatName)
    raise(Errc::FormatVersionMismatch, "not a trace document");
  if (header.value("version", -1) != kFormatVersion)
    raise(Errc::FormatVersionMismatch,
          fmt::format("version {} unsupported", header.value("version", -1)));

  TraceMeta meta;
  uint64_t expected_events = 0;
  std::vector<uint32_t> threads;
  std::string run_id;
  try {
    run_id = header.at("run_id").get<std::string>();
    meta.seed = header.at("seed").get<uint64_t>();
    meta.config = header.at("config").get<std::string>();
    meta.iteration = header.at("iteration").get<uint64_t>();
    meta.wall_ms = header.at("wall_ms").get<uint64_t>();
    threads = header.at("threads").get<std::vector<uint32_t>>();
    expected_events = header.at("events").get<uint64_t>();
  } catch (const json::exception& ex) {
    corrupt(-1, ex.what());
  }

  Trace trace(meta);
  for (uint32_t p = 0; p < threads.size(); ++p)
    for (uint32_t t = 0; t < threads[p]; ++t) trace.declare_thread(p, t);

  // First pass appends events in file order (which must equal coordinate
  // order); parent edges attach afterwards since they can point forward in
  // the byte stream.
  struct PendingEdges {
    EventCoord child;
    std::vector<EventCoord> parents;
  };
  std::vector<PendingEdges> edges;
  long record = 0;
  for (; record < static_cast<long>(expected_events); ++record) {
    if (!std::getline(in, line)) corrupt(record, "document truncated");
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& ex) {
      corrupt(record, ex.what());
    }
    try {
      EventCoord coord = coord_from(rec.at("c"), record);
      auto sc = syscall_from_name(rec.at("sc").get<std::string>());
      if (!sc) corrupt(record, "unknown syscall kind");
      std::string ph = rec.at("ph").get<std::string>();
      if (ph != "E" && ph != "X") corrupt(record, "bad phase");
      std::optional<OutcomeClass> outcome;
      if (rec.contains("out")) {
        std::string out = rec["out"].get<std::string>();
        OutcomeClass oc;
        if (out == "ok")
          oc.err = 0;
        else if (out.size() > 1 && out[0] == 'e')
          oc.err = std::stoi(out.substr(1));
        else
          corrupt(record, "bad outcome");
        if (rec.contains("peer")) oc.peer = Endpoint::parse(rec["peer"].get<std::string>());
        outcome = oc;
      }
      ArgsDigest args;
      if (rec.contains("args")) {
        const json& a = rec["args"];
        if (a.contains("fd")) args.fd = a["fd"].get<int32_t>();
        if (a.contains("ep")) args.ep = Endpoint::parse(a["ep"].get<std::string>());
        if (a.contains("local")) args.local = Endpoint::parse(a["local"].get<std::string>());
        if (a.contains("stream")) args.stream = a["stream"].get<uint64_t>();
        if (a.contains("bytes")) args.bytes = a["bytes"].get<uint64_t>();
      }
      EventCoord got = trace.append_event(coord.process, coord.thread, *sc,
                                          ph == "E" ? Phase::Entry : Phase::Exit,
                                          std::move(outcome), std::move(args));
      if (got != coord)
        corrupt(record, fmt::format("coordinate {} out of order (expected {})", coord.str(),
                                    got.str()));
      if (rec.contains("par")) {
        PendingEdges pe{coord, {}};
        for (const json& pj : rec["par"]) pe.parents.push_back(coord_from(pj, record));
        edges.push_back(std::move(pe));
      }
    } catch (const Error&) {
      throw;
    } catch (const std::exception& ex) {
      corrupt(record, ex.what());
    }
  }

  for (const PendingEdges& pe : edges) {
    for (const EventCoord& p : pe.parents) {
      try {
        trace.add_parent(pe.child, p);
      } catch (const Error& ex) {
        corrupt(static_cast<long>(pe.child.index), ex.what());
      }
    }
  }

  trace.finalize();
  if (trace.run_id() != run_id)
    corrupt(-1, fmt::format("run_id mismatch: header {} vs content {}", run_id,
                            trace.run_id()));
  return trace;
}

void write_trace_file(const Trace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(Errc::ConfigError, fmt::format("cannot open {} for writing", path.string()));
  out << serialize(trace);
  if (!out.flush()) raise(Errc::ConfigError, fmt::format("write to {} failed", path.string()));
}

Trace read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::ConfigError, fmt::format("cannot open {}", path.string()));
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

}  // namespace hbt
