#pragma once

#include <string>
#include <vector>

#include "fmesh/simnet.hpp"
#include "fmesh/topology.hpp"

namespace fmesh {

struct CheckVerdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Runs the scenario on the topology and evaluates the built-in invariant
// suite against the resulting trace and network state:
//   flood-once   - no node forwards two packets with the same dedup key
//   loop-freedom - no probe between any ordered node pair walks a cycle
//   memory-bound - peak per-node route-target count stays within B*n
//   reachability - every ordered pair of addressed nodes is deliverable
//   rule-1-order - every queued packet/origination was eventually released
// The last three require a quiescent run; a blown budget fails them.
std::vector<CheckVerdict> run_checks(const Topology& topo, const std::string& scenario_text,
                                     const SimConfig& config);

bool all_pass(const std::vector<CheckVerdict>& verdicts);

}  // namespace fmesh
