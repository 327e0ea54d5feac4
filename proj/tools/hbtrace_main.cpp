#include <CLI11.hpp>
#include <fmt/format.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "hbtrace/causality.hpp"
#include "hbtrace/errors.hpp"
#include "hbtrace/experiment.hpp"
#include "hbtrace/run_library.hpp"
#include "hbtrace/sim/sim.hpp"
#include "hbtrace/trace_io.hpp"
#if HBTRACE_LIVE
#include "hbtrace/live/tracer.hpp"
#endif

namespace {

using namespace hbt;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::ConfigError, fmt::format("cannot open {}", path));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct CommonOpts {
  std::string config = "2cl";
  std::string runs_dir;
  std::string faults_path;
  uint64_t seed = 0;
  std::string seed_policy = "sequential";
  uint64_t iterations = 1;
  uint32_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_loop_flags) {
  cmd->add_option("--config", o.config, "Preset name or config file path");
  cmd->add_option("--runs-dir", o.runs_dir, "Directory of stored runs (omit for in-memory)");
  cmd->add_option("--faults", o.faults_path, "Fault specification file");
  cmd->add_option("--seed", o.seed, "Base scheduler seed");
  if (with_loop_flags) {
    cmd->add_option("--iterations", o.iterations, "Iterations to run")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--seed-policy", o.seed_policy, "fixed | sequential | random")
        ->check(CLI::IsMember({"fixed", "sequential", "random"}));
    cmd->add_option("--jobs", o.jobs, "Parallel simulation workers")->check(CLI::PositiveNumber);
  }
}

ExperimentConfig build_experiment(const CommonOpts& o, RunLibrary& lib) {
  ExperimentConfig cfg;
  cfg.system = sim::resolve_config(o.config);
  cfg.iterations = o.iterations;
  cfg.base_seed = o.seed;
  cfg.jobs = o.jobs;
  if (o.seed_policy == "fixed") cfg.seed_policy = SeedPolicy::Fixed;
  if (o.seed_policy == "random") cfg.seed_policy = SeedPolicy::Random;
  if (!o.faults_path.empty())
    cfg.faults = parse_fault_spec(read_file(o.faults_path), lib);
  return cfg;
}

RunLibrary open_library(const CommonOpts& o) {
  if (o.runs_dir.empty()) return RunLibrary{};
  return RunLibrary::open(o.runs_dir);
}

int cmd_run(const CommonOpts& o) {
  RunLibrary lib = open_library(o);
  ExperimentConfig cfg = build_experiment(o, lib);
  IterationOutcome out = run_once(lib, cfg, cfg.base_seed, 0);
  for (const std::string& w : out.warnings) std::cerr << "warning: " << w << "\n";
  if (out.result.novel()) {
    std::cout << "novel " << out.result.run_id << "\n";
    if (!o.runs_dir.empty())
      std::cout << "trace " << o.runs_dir << "/" << out.result.run_id << ".trace\n";
  } else {
    std::cout << "followed " << out.result.run_id << "\n";
  }
  return 0;
}

int cmd_loop(const CommonOpts& o) {
  RunLibrary lib = open_library(o);
  ExperimentConfig cfg = build_experiment(o, lib);
  LoopSummary s = run_loop(lib, cfg);
  std::cout << "iterations " << s.iterations << "\n";
  std::cout << "novel " << s.novel << "\n";
  std::cout << "distinct " << s.distinct << "\n";
  std::cout << "coverage99 " << s.coverage99_k << "\n";
  std::cout << fmt::format("top1 {:.4f} {}\n", s.top1_fraction, s.top_run);
  return 0;
}

int cmd_report(const CommonOpts& o, const std::string& histogram) {
  RunLibrary lib = open_library(o);
  auto rows = lib.distribution_report();
  std::cout << fmt::format("{:>5}  {:>8}  {:>10}  run\n", "rank", "count", "cumulative");
  for (size_t i = 0; i < rows.size(); ++i)
    std::cout << fmt::format("{:>5}  {:>8}  {:>10.4f}  {}\n", i + 1, rows[i].count,
                             rows[i].cumulative_fraction, rows[i].run_id);
  if (!histogram.empty()) {
    std::ofstream out(histogram, std::ios::trunc);
    if (!out) raise(Errc::ConfigError, fmt::format("cannot open {}", histogram));
    for (size_t i = 0; i < rows.size(); ++i) out << i + 1 << "\t" << rows[i].count << "\n";
    std::cerr << "histogram written to " << histogram << "\n";
  }
  return 0;
}

int cmd_export_dot(const CommonOpts& o, const std::string& run_id, const std::string& out_path) {
  RunLibrary lib = open_library(o);
  const Trace* trace = lib.find(run_id);
  if (!trace) raise(Errc::UnknownRun, run_id);
  std::string dot = export_dot(*trace);
  if (out_path.empty()) {
    std::cout << dot;
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) raise(Errc::ConfigError, fmt::format("cannot open {}", out_path));
    out << dot;
  }
  return 0;
}

#if HBTRACE_LIVE
int cmd_trace_live(const CommonOpts& o, const std::vector<std::string>& commands,
                   uint64_t launch_delay_ms) {
  RunLibrary lib = open_library(o);
  live::TraceOptions opts;
  opts.launch_delay_ms = launch_delay_ms;
  opts.config_name = o.config;
  for (const std::string& cmd : commands) opts.commands.push_back(live::split_command(cmd));
  live::LiveRun run = live::trace_processes(opts, &lib);
  for (const std::string& w : run.warnings) std::cerr << "warning: " << w << "\n";
  FinalizeResult res = lib.finalize_execution(run.follow, std::move(run.trace));
  std::cout << (res.novel() ? "novel " : "followed ") << res.run_id << "\n";
  return 0;
}
#endif

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"happens-before syscall tracer, run deduplicator and fault injector"};
  app.require_subcommand(1);

  CommonOpts run_opts, loop_opts, inject_opts, report_opts, dot_opts, live_opts;

  CLI::App* run = app.add_subcommand("run", "Trace one simulated execution");
  add_common(run, run_opts, false);

  CLI::App* loop = app.add_subcommand("loop", "Run many iterations and report the distribution");
  add_common(loop, loop_opts, true);

  CLI::App* inject =
      app.add_subcommand("inject", "Run with a fault specification (run/loop alias)");
  add_common(inject, inject_opts, true);
  inject->get_option("--faults")->required();

  std::string histogram;
  CLI::App* report = app.add_subcommand("report", "Print the run distribution table");
  add_common(report, report_opts, false);
  report->get_option("--runs-dir")->required();
  report->add_option("--histogram", histogram, "Write rank/count pairs to this file");

  std::string dot_run_id, dot_out;
  CLI::App* dot = app.add_subcommand("export-dot", "Emit a graph document for a stored run");
  add_common(dot, dot_opts, false);
  dot->get_option("--runs-dir")->required();
  dot->add_option("--run", dot_run_id, "Run id to export")->required();
  dot->add_option("-o,--output", dot_out, "Output path (stdout if omitted)");

  CLI::App* trace = app.add_subcommand("trace", "Trace real processes via the OS facility");
  std::vector<std::string> live_cmds;
  uint64_t launch_delay_ms = 200;
  bool live_flag = false;
  trace->add_flag("--live", live_flag, "Attach to real processes");
  add_common(trace, live_opts, false);
  trace->add_option("--cmd", live_cmds, "Command line to launch and trace (repeatable)")
      ->required();
  trace->add_option("--launch-delay-ms", launch_delay_ms,
                    "Delay between launching consecutive processes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_opts);
    if (loop->parsed()) return cmd_loop(loop_opts);
    if (inject->parsed()) {
      return inject_opts.iterations > 1 ? cmd_loop(inject_opts) : cmd_run(inject_opts);
    }
    if (report->parsed()) return cmd_report(report_opts, histogram);
    if (dot->parsed()) return cmd_export_dot(dot_opts, dot_run_id, dot_out);
    if (trace->parsed()) {
#if HBTRACE_LIVE
      if (!live_flag) raise(Errc::ConfigError, "trace currently requires --live");
      return cmd_trace_live(live_opts, live_cmds, launch_delay_ms);
#else
      raise(Errc::BackendUnsupported, "built without the live tracer");
#endif
    }
  } catch (const hbt::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.code()) {
      case Errc::AmbiguousFollow:
      case Errc::ReadAheadOfWrites:
      case Errc::QuiescenceWithRunnableWork:
      case Errc::WouldCreateCycle:
        return 2;  // internal invariant violations
      default:
        return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
