#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmesh/addressing.hpp"
#include "fmesh/engine.hpp"
#include "fmesh/rem.hpp"

namespace fmesh {

class TopologyError : public std::runtime_error {
 public:
  explicit TopologyError(const std::string& what) : std::runtime_error(what) {}
};

// One undirected edge; endpoints normalized so a < b.
struct LinkSpec {
  Address a;
  Address b;
  LinkQuality quality;
};

struct Topology {
  TopologyParams params;
  // Levels below this start with converged maps (seeded by `warm_seed`);
  // everything at or above starts unexplored. 0 = fully cold start.
  int warm_levels = 0;
  std::vector<Address> nodes;    // sorted, unique
  std::vector<LinkSpec> links;   // sorted by endpoints, unique

  bool has_node(const Address& addr) const;
  std::vector<std::pair<Address, LinkQuality>> neighbors(const Address& addr) const;
};

// Text form. Header line `levels=<n> group_size=<B> [warm_levels=<w>]`, then
// `node <address>` and `link <addrA> <addrB> rtt=<ms> bw=<units>` lines.
// `#` starts a comment.
Topology parse_topology(const std::string& text);
Topology load_topology_file(const std::string& path);
std::string format_topology(const Topology& topo);

// Seeded random topology: `node_count` sequential addresses, a random
// spanning path plus extra edges inside every group, and for each level a
// spanning structure of member-pair border links between sibling groups, so
// intra-group density exceeds inter-group density and every linked group
// pair shares at least one border pair. Integer rtts in [1,100], bandwidths
// in [10,1000]. Identical seeds produce identical topologies.
Topology generate_topology(const TopologyParams& params, int node_count, uint64_t seed);

// Installs the warm-start state for `node` into its engine: all links become
// known rnodes, and for every level below `topo.warm_levels` the engine gets
// the converged best route per reachable target (shortest-path oracle over
// the level scope) plus the border records visible at that depth.
void warm_seed(NodeEngine& engine, const Topology& topo, const Address& node);

}  // namespace fmesh
