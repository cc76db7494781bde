#include "fmesh/check.hpp"

#include <map>
#include <sstream>

#include "fmesh/tracer.hpp"

namespace fmesh {

namespace {

struct TraceLine {
  std::string time;
  std::string kind;
  std::string src;
  std::string dst;
  std::string payload;
};

std::vector<TraceLine> parse_trace(const std::string& trace) {
  std::vector<TraceLine> out;
  std::istringstream in(trace);
  std::string raw;
  while (std::getline(in, raw)) {
    if (raw.empty()) continue;
    TraceLine line;
    std::istringstream ls(raw);
    ls >> line.time >> line.kind >> line.src >> line.dst;
    std::getline(ls, line.payload);
    if (!line.payload.empty() && line.payload.front() == ' ') line.payload.erase(0, 1);
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace

bool all_pass(const std::vector<CheckVerdict>& verdicts) {
  for (const CheckVerdict& v : verdicts)
    if (!v.pass) return false;
  return true;
}

std::vector<CheckVerdict> run_checks(const Topology& topo, const std::string& scenario_text,
                                     const SimConfig& config) {
  SimNetwork net(topo, config);
  if (!scenario_text.empty()) net.load_scenario(scenario_text);
  const RunStatus status = net.run();
  const bool quiescent = status == RunStatus::Quiescent;
  const std::vector<TraceLine> lines = parse_trace(net.trace());

  std::vector<CheckVerdict> verdicts;

  {  // flood-once: per (forwarding node, packet key) at most one transmission
    std::map<std::pair<std::string, std::string>, int> forwards;
    uint64_t violations = 0;
    for (const TraceLine& line : lines) {
      if (line.kind != "fwd") continue;
      TracerPacket pkt;
      try {
        pkt = packet_from_hex(line.payload, topo.params);
      } catch (const std::exception&) {
        ++violations;  // unreadable forward is its own failure
        continue;
      }
      if (++forwards[{line.src, dedup_key(pkt)}] == 2) ++violations;
    }
    std::ostringstream detail;
    detail << forwards.size() << " distinct (node,key) forwards, " << violations << " repeated";
    verdicts.push_back(CheckVerdict{"flood-once", violations == 0, detail.str()});
  }

  {  // loop-freedom and reachability over all ordered pairs
    uint64_t pairs = 0, loops = 0, unreachable = 0;
    if (quiescent) {
      const std::vector<Address> actives = net.active_addresses();
      for (const Address& src : actives) {
        for (const Address& dst : actives) {
          if (src == dst) continue;
          ++pairs;
          const ProbeResult probe = net.probe_route(src, dst);
          if (probe.status == ProbeResult::Status::ForwardingLoop) ++loops;
          if (probe.status != ProbeResult::Status::Ok) ++unreachable;
        }
      }
    }
    {
      std::ostringstream detail;
      if (!quiescent) detail << "run not quiescent";
      else detail << pairs << " pairs, " << loops << " loops";
      verdicts.push_back(CheckVerdict{"loop-freedom", quiescent && loops == 0, detail.str()});
    }
    {
      std::ostringstream detail;
      if (!quiescent) detail << "run not quiescent";
      else detail << pairs << " pairs, " << unreachable << " unreachable";
      verdicts.push_back(
          CheckVerdict{"reachability", quiescent && unreachable == 0, detail.str()});
    }
  }

  {  // memory bound: peak entries against the levels*group_size limit
    std::ostringstream detail;
    detail << "peak " << net.max_entries_seen() << " of " << topo.params.max_map_entries();
    verdicts.push_back(CheckVerdict{
        "memory-bound", net.max_entries_seen() <= topo.params.max_map_entries(), detail.str()});
  }

  {  // rule-1 ordering: queued work is always released, nothing left queued
    std::map<std::pair<std::string, std::string>, long long> balance;
    for (const TraceLine& line : lines) {
      if (line.kind == "queue") ++balance[{line.src, line.payload}];
      else if (line.kind == "release") --balance[{line.src, line.payload}];
    }
    uint64_t unreleased = 0, spurious = 0;
    for (const auto& [key, count] : balance) {
      if (count > 0) unreleased += static_cast<uint64_t>(count);
      if (count < 0) spurious += static_cast<uint64_t>(-count);
    }
    uint64_t residual = 0;
    for (const Address& addr : net.active_addresses()) {
      const NodeEngine* engine = net.engine(addr);
      for (int level = 0; level < topo.params.levels; ++level)
        residual += static_cast<uint64_t>(engine->queued_packet_count(level));
    }
    std::ostringstream detail;
    detail << unreleased << " unreleased, " << spurious << " spurious releases, " << residual
           << " packets still queued";
    verdicts.push_back(CheckVerdict{"rule-1-order",
                                    quiescent && unreleased == 0 && spurious == 0 && residual == 0,
                                    detail.str()});
  }

  return verdicts;
}

}  // namespace fmesh
