// Command-line front end: run scenarios on mesh topologies, generate random
// topologies, evaluate the invariant suite, dump converged maps.
//
// Exit codes: 0 success, 1 invariant/quiescence failure, 2 usage or parse
// error.

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "fmesh/check.hpp"
#include "fmesh/simnet.hpp"
#include "fmesh/topology.hpp"

namespace {

struct CommonOpts {
  std::string topology;
  std::string scenario;
  uint64_t seed = 0;
  double max_time_ms = 600'000.0;
  double delta_base = 10.0;
  bool no_loop_check = false;
  uint64_t max_messages = 1'000'000;
  bool inject_dup_forward = false;
  std::string trace_out;
  std::string report_out;
};

void add_run_opts(CLI::App* cmd, CommonOpts& opts, bool with_outputs) {
  cmd->add_option("--topology", opts.topology, "topology file")->required();
  cmd->add_option("--scenario", opts.scenario, "scenario file");
  cmd->add_option("--seed", opts.seed, "seed recorded in the report");
  cmd->add_option("--max-time-ms", opts.max_time_ms, "virtual time budget (ms)");
  cmd->add_option("--delta-base", opts.delta_base,
                  "base of the per-level announcement threshold (ms)");
  cmd->add_flag("--no-loop-check", opts.no_loop_check,
                "disable the traversed-gnode forwarding check (diagnostics)");
  cmd->add_option("--max-messages", opts.max_messages, "delivered-message budget")
      ->group("");  // hidden
  cmd->add_flag("--inject-dup-forward", opts.inject_dup_forward,
                "fault hook: duplicate the first forwarded packet")
      ->group("");  // hidden
  if (with_outputs) {
    cmd->add_option("--trace-out", opts.trace_out, "write the event trace to this file");
    cmd->add_option("--report-out", opts.report_out, "write the run report to this file");
  }
}

fmesh::SimConfig make_config(const CommonOpts& opts) {
  fmesh::SimConfig config;
  config.engine.policy.delta_base_ms = opts.delta_base;
  config.engine.loop_check = !opts.no_loop_check;
  config.seed = opts.seed;
  config.max_time_us = std::llround(opts.max_time_ms * 1000.0);
  config.max_messages = opts.max_messages;
  config.inject_dup_forward = opts.inject_dup_forward;
  return config;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical mesh routing protocol simulator"};
  app.require_subcommand(1);

  CommonOpts run_opts;
  CLI::App* run_cmd = app.add_subcommand("run", "run a scenario to quiescence");
  add_run_opts(run_cmd, run_opts, true);

  CommonOpts check_opts;
  CLI::App* check_cmd = app.add_subcommand("check", "run and evaluate the invariant suite");
  add_run_opts(check_cmd, check_opts, false);

  CommonOpts dump_opts;
  CLI::App* dump_cmd = app.add_subcommand("dump-maps", "run to quiescence and print every map");
  add_run_opts(dump_cmd, dump_opts, false);

  struct {
    int levels = 3;
    int group_size = 4;
    int nodes = 16;
    int warm_levels = 0;
    uint64_t seed = 0;
    std::string out;
  } gen_opts;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a random connected topology");
  gen_cmd->add_option("--levels", gen_opts.levels, "hierarchy depth");
  gen_cmd->add_option("--group-size", gen_opts.group_size, "members per group");
  gen_cmd->add_option("--nodes", gen_opts.nodes, "node count")->required();
  gen_cmd->add_option("--warm-levels", gen_opts.warm_levels,
                      "levels that start with converged maps");
  gen_cmd->add_option("--seed", gen_opts.seed, "generator seed")->required();
  gen_cmd->add_option("--topology", gen_opts.out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) {
      fmesh::Topology topo = fmesh::generate_topology(
          fmesh::TopologyParams{gen_opts.levels, gen_opts.group_size}, gen_opts.nodes,
          gen_opts.seed);
      if (gen_opts.warm_levels < 0 || gen_opts.warm_levels > gen_opts.levels)
        throw fmesh::TopologyError("warm-levels must lie in [0, levels]");
      topo.warm_levels = gen_opts.warm_levels;
      const std::string text = fmesh::format_topology(topo);
      if (gen_opts.out.empty()) std::cout << text;
      else write_file(gen_opts.out, text);
      return 0;
    }

    if (run_cmd->parsed()) {
      const fmesh::Topology topo = fmesh::load_topology_file(run_opts.topology);
      fmesh::SimNetwork net(topo, make_config(run_opts));
      if (!run_opts.scenario.empty()) net.load_scenario(read_file(run_opts.scenario));
      const fmesh::RunStatus status = net.run();
      if (!run_opts.trace_out.empty()) write_file(run_opts.trace_out, net.trace());
      const std::string report = net.report();
      if (!run_opts.report_out.empty()) write_file(run_opts.report_out, report);
      std::cout << report;
      return status == fmesh::RunStatus::Quiescent ? 0 : 1;
    }

    if (check_cmd->parsed()) {
      const fmesh::Topology topo = fmesh::load_topology_file(check_opts.topology);
      std::string scenario;
      if (!check_opts.scenario.empty()) scenario = read_file(check_opts.scenario);
      const auto verdicts = fmesh::run_checks(topo, scenario, make_config(check_opts));
      for (const fmesh::CheckVerdict& v : verdicts)
        std::cout << "check " << v.name << ": " << (v.pass ? "PASS" : "FAIL") << " (" << v.detail
                  << ")\n";
      return fmesh::all_pass(verdicts) ? 0 : 1;
    }

    if (dump_cmd->parsed()) {
      const fmesh::Topology topo = fmesh::load_topology_file(dump_opts.topology);
      fmesh::SimNetwork net(topo, make_config(dump_opts));
      if (!dump_opts.scenario.empty()) net.load_scenario(read_file(dump_opts.scenario));
      const fmesh::RunStatus status = net.run();
      for (const fmesh::Address& addr : net.active_addresses())
        for (const std::string& line : net.engine(addr)->maps().dump_lines())
          std::cout << line << "\n";
      return status == fmesh::RunStatus::Quiescent ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
