#include <fmt/format.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "hbtrace/errors.hpp"
#include "hbtrace/sim/sim.hpp"

namespace hbt::sim {

using json = nlohmann::ordered_json;

static std::vector<KvCommand> client_commands(uint32_t count, uint32_t client,
                                              uint32_t value_bytes) {
  std::vector<KvCommand> cmds;
  for (uint32_t i = 0; i < count; ++i) {
    KvCommand c;
    c.set = (i % 2) == 1;  // alternate GET / SET
    c.key = fmt::format("k{}_{}", client, i / 2);
    c.value_bytes = value_bytes;
    cmds.push_back(std::move(c));
  }
  return cmds;
}

SimConfig redis_like_config(uint32_t num_clients, uint32_t commands_per_client) {
  if (num_clients < 1) raise(Errc::ConfigError, "need at least one client");
  SimConfig cfg;
  cfg.name = fmt::format("{}cl", num_clients);
  if (commands_per_client > 1) cfg.name += "-mc";

  KvServerSpec server;
  server.listen = Endpoint::loopback(6379);
  server.connections = num_clients;
  // The traced store is already up and listening when the experiment
  // starts, so clients never race the bind/listen prologue.
  server.prebound = true;
  cfg.processes.emplace_back(server);

  for (uint32_t i = 0; i < num_clients; ++i) {
    KvClientSpec client;
    client.server = server.listen;
    client.commands = client_commands(commands_per_client, i, 24);
    cfg.processes.emplace_back(std::move(client));
  }
  return cfg;
}

static std::vector<FaultRule> truncation_rules(uint32_t processes) {
  // Random congestion: every process's writes may come up short.
  std::vector<FaultRule> rules;
  for (uint32_t p = 0; p < processes; ++p) {
    TruncateAction act;
    act.random = true;
    act.probability = 0.25;
    rules.push_back(FaultRule{PredTarget{p, Syscall::Write, Phase::Entry, std::nullopt}, act});
  }
  return rules;
}

std::vector<std::string> preset_names() {
  return {"1cl", "2cl", "2cl-mc", "4cl", "2cl-wt", "pair", "s1c2", "indep"};
}

SimConfig preset(std::string_view name) {
  if (name == "1cl") return redis_like_config(1, 1);
  if (name == "2cl") return redis_like_config(2, 1);
  if (name == "2cl-mc") return redis_like_config(2, 8);  // four GETs and four SETs
  if (name == "4cl") return redis_like_config(4, 1);
  if (name == "2cl-wt") {
    SimConfig cfg = redis_like_config(2, 1);
    cfg.name = "2cl-wt";
    cfg.builtin_faults = truncation_rules(static_cast<uint32_t>(cfg.processes.size()));
    return cfg;
  }
  if (name == "pair") {
    // The accept/connect micro-system: two threads, four events, one edge.
    SimConfig cfg;
    cfg.name = "pair";
    KvServerSpec server;
    server.listen = Endpoint::loopback(7000);
    server.connections = 1;
    server.respond = false;
    server.watch_connections = false;
    server.close_children = false;
    server.close_listener = false;
    server.prebound = true;
    cfg.processes.emplace_back(server);
    KvClientSpec client;
    client.server = server.listen;
    client.read_response = false;
    client.close_socket = false;
    client.prebound_socket = true;
    cfg.processes.emplace_back(client);
    return cfg;
  }
  if (name == "s1c2") {
    // One server, two one-message clients; small enough to enumerate.
    SimConfig cfg;
    cfg.name = "s1c2";
    KvServerSpec server;
    server.listen = Endpoint::loopback(7000);
    server.connections = 2;
    server.messages_per_connection = 1;
    server.respond = false;
    server.close_children = false;
    server.close_listener = false;
    server.prebound = true;
    cfg.processes.emplace_back(server);
    for (int i = 0; i < 2; ++i) {
      KvClientSpec client;
      client.server = server.listen;
      client.commands = {KvCommand{false, fmt::format("k{}", i), 0}};
      client.read_response = false;
      client.close_socket = false;
      client.prebound_socket = true;
      cfg.processes.emplace_back(std::move(client));
    }
    return cfg;
  }
  if (name == "indep") {
    // Two processes that never communicate: every interleaving is one run.
    SimConfig cfg;
    cfg.name = "indep";
    cfg.processes.emplace_back(LonerSpec{2});
    cfg.processes.emplace_back(LonerSpec{2});
    return cfg;
  }
  raise(Errc::ConfigError, fmt::format("unknown preset '{}'", name));
}

static Endpoint ep_field(const json& j, const char* key, Endpoint fallback) {
  if (!j.contains(key)) return fallback;
  return Endpoint::parse(j.at(key).get<std::string>());
}

SimConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::ConfigError, fmt::format("cannot open config {}", path.string()));
  std::ostringstream buf;
  buf << in.rdbuf();
  json doc;
  try {
    doc = json::parse(buf.str());
  } catch (const json::exception& ex) {
    raise(Errc::ConfigError, fmt::format("{}: {}", path.string(), ex.what()));
  }

  try {
    SimConfig cfg;
    cfg.name = doc.value("name", path.stem().string());
    cfg.steps_per_ms = doc.value("steps_per_ms", 1u);
    if (cfg.steps_per_ms < 1) raise(Errc::ConfigError, "steps_per_ms must be >= 1");
    for (const json& p : doc.at("processes")) {
      std::string script = p.at("script").get<std::string>();
      if (script == "kv-server") {
        KvServerSpec s;
        s.listen = ep_field(p, "listen", s.listen);
        s.connections = p.value("connections", 1u);
        s.messages_per_connection = p.value("messages_per_connection", 0u);
        s.respond = p.value("respond", true);
        s.watch_connections = p.value("watch_connections", true);
        s.close_children = p.value("close_children", true);
        s.close_listener = p.value("close_listener", true);
        s.prebound = p.value("prebound", false);
        s.think = p.value("think", 0u);
        cfg.processes.emplace_back(s);
      } else if (script == "kv-client") {
        KvClientSpec s;
        s.server = ep_field(p, "server", s.server);
        s.read_response = p.value("read_response", true);
        s.close_socket = p.value("close_socket", true);
        s.prebound_socket = p.value("prebound_socket", false);
        s.think = p.value("think", 0u);
        if (p.contains("commands")) {
          for (const json& c : p.at("commands")) {
            KvCommand cmd;
            std::string op = c.at(0).get<std::string>();
            if (op == "get")
              cmd.set = false;
            else if (op == "set")
              cmd.set = true;
            else
              raise(Errc::ConfigError, fmt::format("unknown command '{}'", op));
            cmd.key = c.at(1).get<std::string>();
            if (c.size() > 2) cmd.value_bytes = c.at(2).get<uint32_t>();
            s.commands.push_back(std::move(cmd));
          }
        }
        cfg.processes.emplace_back(std::move(s));
      } else if (script == "loner") {
        cfg.processes.emplace_back(LonerSpec{p.value("computes", 0u)});
      } else {
        raise(Errc::ConfigError, fmt::format("unknown script '{}'", script));
      }
    }
    if (cfg.processes.empty()) raise(Errc::ConfigError, "config declares no processes");
    if (doc.contains("faults")) {
      RunLibrary empty;  // inline config rules cannot reference stored runs
      cfg.builtin_faults = parse_fault_spec(doc.at("faults").dump(), empty);
    }
    return cfg;
  } catch (const json::exception& ex) {
    raise(Errc::ConfigError, fmt::format("{}: {}", path.string(), ex.what()));
  }
}

SimConfig resolve_config(const std::string& name_or_path) {
  for (const std::string& p : preset_names())
    if (p == name_or_path) return preset(name_or_path);
  return load_config_file(name_or_path);
}

}  // namespace hbt::sim
