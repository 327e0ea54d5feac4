#include "hbtrace/fault.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <json.hpp>

#include "hbtrace/errors.hpp"

namespace hbt {

using json = nlohmann::ordered_json;

namespace {

struct ErrnoEntry {
  const char* name;
  int code;
};

constexpr ErrnoEntry kErrnos[] = {
    {"ECONNREFUSED", ECONNREFUSED}, {"ETIMEDOUT", ETIMEDOUT}, {"ECONNRESET", ECONNRESET},
    {"EPIPE", EPIPE},               {"EBADF", EBADF},         {"EIO", EIO},
    {"ENETUNREACH", ENETUNREACH},   {"EHOSTUNREACH", EHOSTUNREACH},
    {"EAGAIN", EAGAIN},             {"EINTR", EINTR},
};

[[noreturn]] void malformed(size_t rule, const std::string& what) {
  raise(Errc::MalformedRule, fmt::format("rule {}: {}", rule, what));
}

}  // namespace

int errno_from_name(const std::string& name) {
  for (const ErrnoEntry& e : kErrnos)
    if (name == e.name) return e.code;
  // Allow plain numbers for codes outside the common table.
  try {
    size_t used = 0;
    int code = std::stoi(name, &used);
    if (used == name.size() && code > 0) return code;
  } catch (const std::exception&) {
  }
  raise(Errc::MalformedRule, fmt::format("unknown errno '{}'", name));
}

const char* errno_name(int code) {
  for (const ErrnoEntry& e : kErrnos)
    if (code == e.code) return e.name;
  return "E?";
}

bool errno_supported_syscall(Syscall sc) {
  return sc == Syscall::Connect || sc == Syscall::Read || sc == Syscall::Write ||
         sc == Syscall::Accept;
}

namespace {

FaultTarget parse_target(const json& j, size_t rule, const RunLibrary& library) {
  if (!j.is_object()) malformed(rule, "target must be an object");
  if (j.contains("run")) {
    CoordTarget t;
    t.run_id = j.at("run").get<std::string>();
    t.coord = EventCoord{j.at("process").get<uint32_t>(), j.at("thread").get<uint32_t>(),
                         j.at("event").get<uint32_t>()};
    const Trace* run = library.find(t.run_id);
    if (!run) raise(Errc::UnknownRun, t.run_id);
    if (!run->contains(t.coord))
      malformed(rule, fmt::format("run {} has no event {}", t.run_id, t.coord.str()));
    return t;
  }
  PredTarget t;
  t.process = j.at("process").get<uint32_t>();
  auto sc = syscall_from_name(j.at("syscall").get<std::string>());
  if (!sc) malformed(rule, "unknown syscall in target");
  t.syscall = *sc;
  std::string phase = j.at("phase").get<std::string>();
  if (phase == "entry")
    t.phase = Phase::Entry;
  else if (phase == "exit")
    t.phase = Phase::Exit;
  else
    malformed(rule, fmt::format("bad phase '{}'", phase));
  const json& occ = j.at("occurrence");
  if (occ.is_string() && occ.get<std::string>() == "any")
    t.occurrence = std::nullopt;
  else if (occ.is_number_unsigned() && occ.get<uint32_t>() >= 1)
    t.occurrence = occ.get<uint32_t>();
  else
    malformed(rule, "occurrence must be a positive ordinal or \"any\"");
  return t;
}

// The syscall/phase a target would fire on, when statically known.
struct TargetShape {
  std::optional<Syscall> syscall;
  std::optional<Phase> phase;
};

TargetShape shape_of(const FaultTarget& target, const RunLibrary& library) {
  if (const auto* p = std::get_if<PredTarget>(&target)) return {p->syscall, p->phase};
  const auto& c = std::get<CoordTarget>(target);
  const Trace* run = library.find(c.run_id);
  const Event& ev = run->at(c.coord);
  return {ev.syscall, ev.phase};
}

FaultAction parse_action(const json& j, const FaultTarget& target, size_t rule,
                         const RunLibrary& library) {
  if (!j.is_object()) malformed(rule, "action must be an object");
  TargetShape shape = shape_of(target, library);

  if (j.contains("errno")) {
    int code = errno_from_name(j.at("errno").get<std::string>());
    if (shape.syscall && !errno_supported_syscall(*shape.syscall))
      raise(Errc::UnsupportedSyscallForErrno,
            fmt::format("rule {}: no errno recipe for {}", rule, syscall_name(*shape.syscall)));
    if (shape.phase && *shape.phase != Phase::Entry)
      malformed(rule, "errno injection matches the Entry phase");
    return ErrnoAction{code};
  }
  if (j.contains("pause")) {
    if (j.at("pause").is_string() && j.at("pause").get<std::string>() == "indefinite")
      return PauseAction{std::nullopt};
    malformed(rule, "pause accepts \"indefinite\"; use pause_ms for finite delays");
  }
  if (j.contains("pause_ms")) return PauseAction{j.at("pause_ms").get<uint64_t>()};
  if (j.contains("truncate")) {
    const json& t = j.at("truncate");
    TruncateAction act;
    if (t.contains("factor")) {
      act.factor = t.at("factor").get<double>();
      if (!(*act.factor > 0.0 && *act.factor <= 0.5))
        malformed(rule, "truncate factor must lie in (0, 1/2]");
    } else if (t.value("random", false)) {
      act.random = true;
      act.probability = t.value("probability", 1.0);
      if (!(act.probability > 0.0 && act.probability <= 1.0))
        malformed(rule, "truncate probability must lie in (0, 1]");
    } else {
      malformed(rule, "truncate needs a factor or random: true");
    }
    if (shape.syscall != Syscall::Write || shape.phase != Phase::Entry)
      malformed(rule, "truncation targets write entries");
    return act;
  }
  if (j.contains("partition")) {
    const json& p = j.at("partition");
    PartitionAction act;
    act.group_a = p.at("groups").at(0).get<std::vector<uint32_t>>();
    act.group_b = p.at("groups").at(1).get<std::vector<uint32_t>>();
    act.code = errno_from_name(p.value("errno", "ECONNRESET"));
    if (p.contains("heal")) act.heal = parse_target(p.at("heal"), rule, library);
    if (act.group_a.empty() || act.group_b.empty())
      malformed(rule, "partition groups must be non-empty");
    return act;
  }
  malformed(rule, "action needs one of errno, pause, pause_ms, truncate, partition");
}

}  // namespace

std::vector<FaultRule> parse_fault_spec(const std::string& text, const RunLibrary& library) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& ex) {
    raise(Errc::MalformedRule, fmt::format("fault spec is not valid JSON: {}", ex.what()));
  }
  if (!doc.is_array()) raise(Errc::MalformedRule, "fault spec must be a JSON array of rules");
  std::vector<FaultRule> rules;
  for (size_t i = 0; i < doc.size(); ++i) {
    const json& entry = doc[i];
    if (!entry.is_object() || !entry.contains("target") || !entry.contains("action"))
      malformed(i, "each rule needs target{...} and action{...}");
    try {
      FaultTarget target = parse_target(entry.at("target"), i, library);
      FaultAction action = parse_action(entry.at("action"), target, i, library);
      rules.push_back(FaultRule{std::move(target), std::move(action)});
    } catch (const Error&) {
      throw;
    } catch (const std::exception& ex) {
      malformed(i, ex.what());
    }
  }
  return rules;
}

namespace {

// [0, 1) from the top 53 bits; identical across standard libraries, which
// keeps serialized runs with randomized rules byte-stable everywhere.
double unit_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

uint64_t truncated_count(const TruncateAction& rule, uint64_t requested, std::mt19937_64& rng) {
  if (requested <= 1) return requested;
  if (rule.factor)
    return std::max<uint64_t>(1, static_cast<uint64_t>(std::floor(
                                     static_cast<double>(requested) * *rule.factor)));
  if (unit_draw(rng) >= rule.probability) return requested;
  // Fraction in (0, 1/2]: "half or less".
  double fraction = (1.0 - unit_draw(rng)) * 0.5;
  return std::max<uint64_t>(1, static_cast<uint64_t>(std::floor(
                                   static_cast<double>(requested) * fraction)));
}

FaultEngine::FaultEngine(std::vector<FaultRule> rules, uint64_t seed) : rng_(seed ^ 0x9e3779b97f4a7c15ull) {
  slots_.reserve(rules.size());
  for (FaultRule& r : rules) slots_.push_back(Slot{std::move(r), false, false});
}

bool FaultEngine::target_matches(const FaultTarget& target, const Context& ctx, const Event& ev) {
  if (const auto* pred = std::get_if<PredTarget>(&target)) {
    if (pred->process != ev.coord.process || pred->syscall != ev.syscall ||
        pred->phase != ev.phase)
      return false;
    if (!pred->occurrence) return true;
    auto it = occurrences_.find({ev.coord.process, ev.syscall, ev.phase});
    return it != occurrences_.end() && it->second == *pred->occurrence;
  }
  const auto& coord = std::get<CoordTarget>(target);
  if (ev.coord != coord.coord) return false;
  if (!ctx.follow) return false;
  const FollowCursor* cursor = ctx.follow->cursor(coord.run_id);
  return cursor && cursor->following();
}

std::optional<uint32_t> FaultEngine::peer_process(const Context& ctx, const Event& ev) const {
  if (!ctx.tracker || !ev.args.fd) return std::nullopt;
  if (ev.syscall == Syscall::Connect) {
    if (!ev.args.ep) return std::nullopt;
    return ctx.tracker->listener_process(*ev.args.ep);
  }
  auto id = ctx.tracker->stream_of(ev.coord.process, *ev.args.fd);
  if (!id) return std::nullopt;
  const StreamState& st = ctx.tracker->stream(*id);
  std::pair<uint32_t, int32_t> self{ev.coord.process, *ev.args.fd};
  if (st.client_socket == self && st.server_socket) return st.server_socket->first;
  if (st.server_socket == self && st.client_socket) return st.client_socket->first;
  return std::nullopt;
}

std::optional<ResolvedAction> FaultEngine::match(const Context& ctx, const Event& ev) {
  ++occurrences_[{ev.coord.process, ev.syscall, ev.phase}];

  // Partition triggers and heals are side effects; the perturbation itself
  // lands on the crossing sends below.
  for (Slot& slot : slots_) {
    auto* part = std::get_if<PartitionAction>(&slot.rule.action);
    if (!part) continue;
    if (!slot.partition_active && !slot.fired && target_matches(slot.rule.target, ctx, ev)) {
      slot.partition_active = true;
      slot.fired = true;
    } else if (slot.partition_active && part->heal && target_matches(*part->heal, ctx, ev)) {
      slot.partition_active = false;
    }
  }

  for (Slot& slot : slots_) {
    if (const auto* part = std::get_if<PartitionAction>(&slot.rule.action)) {
      if (!slot.partition_active || ev.phase != Phase::Entry) continue;
      if (ev.syscall != Syscall::Write && ev.syscall != Syscall::Connect) continue;
      auto peer = peer_process(ctx, ev);
      if (!peer) continue;
      auto in = [](const std::vector<uint32_t>& g, uint32_t p) {
        return std::find(g.begin(), g.end(), p) != g.end();
      };
      uint32_t self = ev.coord.process;
      bool crosses = (in(part->group_a, self) && in(part->group_b, *peer)) ||
                     (in(part->group_b, self) && in(part->group_a, *peer));
      if (crosses) return ResolvedAction{ResolvedErrno{part->code}};
      continue;
    }

    if (slot.fired && std::holds_alternative<CoordTarget>(slot.rule.target)) continue;
    if (!target_matches(slot.rule.target, ctx, ev)) continue;
    slot.fired = true;

    if (const auto* pause = std::get_if<PauseAction>(&slot.rule.action))
      return ResolvedAction{ResolvedPause{pause->ms}};
    if (const auto* err = std::get_if<ErrnoAction>(&slot.rule.action))
      return ResolvedAction{ResolvedErrno{err->code}};
    if (const auto* trunc = std::get_if<TruncateAction>(&slot.rule.action)) {
      uint64_t requested = ev.args.bytes.value_or(0);
      uint64_t mutated = truncated_count(*trunc, requested, rng_);
      if (mutated == requested) continue;  // randomized rule chose not to fire
      return ResolvedAction{ResolvedTruncate{mutated}};
    }
  }
  return std::nullopt;
}

}  // namespace hbt
