#include "fmesh/topology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "fmesh/maps.hpp"

namespace fmesh {

namespace {

// Deterministic helpers on top of the standard engine: the distribution
// templates are implementation-defined, so bounded draws and shuffles are
// spelled out to keep generated topologies bit-stable.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  int bounded(int lo, int hi) {
    return lo + static_cast<int>(gen_() % static_cast<uint64_t>(hi - lo + 1));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<size_t>(gen_() % i)]);
  }

 private:
  std::mt19937_64 gen_;
};

std::pair<Address, Address> normalized(const Address& a, const Address& b) {
  return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
}

double parse_positive(const std::string& token, const std::string& what, int line_no) {
  size_t used = 0;
  double value = 0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != token.size() || !(value > 0) || !std::isfinite(value))
    throw TopologyError("line " + std::to_string(line_no) + ": bad " + what + " '" + token + "'");
  return value;
}

}  // namespace

bool Topology::has_node(const Address& addr) const {
  return std::binary_search(nodes.begin(), nodes.end(), addr);
}

std::vector<std::pair<Address, LinkQuality>> Topology::neighbors(const Address& addr) const {
  std::vector<std::pair<Address, LinkQuality>> out;
  for (const LinkSpec& link : links) {
    if (link.a == addr) out.emplace_back(link.b, link.quality);
    else if (link.b == addr) out.emplace_back(link.a, link.quality);
  }
  std::sort(out.begin(), out.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  return out;
}

Topology parse_topology(const std::string& text) {
  Topology topo;
  bool have_header = false;
  std::set<Address> seen_nodes;
  std::set<std::pair<Address, Address>> seen_links;

  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const size_t hash = raw.find('#');
    std::string line = hash == std::string::npos ? raw : raw.substr(0, hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;

    if (!have_header) {
      // Header: `levels=<n> group_size=<B> [warm_levels=<w>]`, any order.
      int levels = 0, group_size = 0, warm = 0;
      bool saw_levels = false, saw_group = false;
      std::string token = first;
      do {
        const size_t eq = token.find('=');
        if (eq == std::string::npos)
          throw TopologyError("line " + std::to_string(line_no) + ": expected key=value, got '" +
                              token + "'");
        const std::string key = token.substr(0, eq);
        int value = 0;
        try {
          value = std::stoi(token.substr(eq + 1));
        } catch (const std::exception&) {
          throw TopologyError("line " + std::to_string(line_no) + ": bad value in '" + token +
                              "'");
        }
        if (key == "levels") {
          levels = value;
          saw_levels = true;
        } else if (key == "group_size") {
          group_size = value;
          saw_group = true;
        } else if (key == "warm_levels") {
          warm = value;
        } else {
          throw TopologyError("line " + std::to_string(line_no) + ": unknown header key '" + key +
                              "'");
        }
      } while (ls >> token);
      if (!saw_levels || !saw_group)
        throw TopologyError("header must set levels= and group_size=");
      topo.params = TopologyParams{levels, group_size};
      if (!topo.params.valid()) throw TopologyError("invalid levels/group_size combination");
      if (warm < 0 || warm > levels)
        throw TopologyError("warm_levels must lie in [0, levels]");
      topo.warm_levels = warm;
      have_header = true;
      continue;
    }

    if (first == "node") {
      std::string addr_text;
      if (!(ls >> addr_text))
        throw TopologyError("line " + std::to_string(line_no) + ": node needs an address");
      std::string extra;
      if (ls >> extra)
        throw TopologyError("line " + std::to_string(line_no) + ": trailing '" + extra + "'");
      Address addr;
      try {
        addr = parse_address(addr_text, topo.params);
      } catch (const AddressError& e) {
        throw TopologyError("line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!seen_nodes.insert(addr).second)
        throw TopologyError("line " + std::to_string(line_no) + ": duplicate node " + addr.str());
    } else if (first == "link") {
      std::string a_text, b_text, rtt_tok, bw_tok;
      if (!(ls >> a_text >> b_text >> rtt_tok >> bw_tok))
        throw TopologyError("line " + std::to_string(line_no) +
                            ": link needs two addresses, rtt= and bw=");
      std::string extra;
      if (ls >> extra)
        throw TopologyError("line " + std::to_string(line_no) + ": trailing '" + extra + "'");
      if (rtt_tok.rfind("rtt=", 0) != 0 || bw_tok.rfind("bw=", 0) != 0)
        throw TopologyError("line " + std::to_string(line_no) + ": expected rtt=<ms> bw=<units>");
      Address a, b;
      try {
        a = parse_address(a_text, topo.params);
        b = parse_address(b_text, topo.params);
      } catch (const AddressError& e) {
        throw TopologyError("line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!seen_nodes.count(a) || !seen_nodes.count(b))
        throw TopologyError("line " + std::to_string(line_no) + ": link references unknown node");
      if (a == b)
        throw TopologyError("line " + std::to_string(line_no) + ": self-link at " + a.str());
      const auto key = normalized(a, b);
      if (!seen_links.insert(key).second)
        throw TopologyError("line " + std::to_string(line_no) + ": duplicate link " + a.str() +
                            " " + b.str());
      LinkQuality q{parse_positive(rtt_tok.substr(4), "rtt", line_no),
                    parse_positive(bw_tok.substr(3), "bw", line_no)};
      topo.links.push_back(LinkSpec{key.first, key.second, q});
    } else {
      throw TopologyError("line " + std::to_string(line_no) + ": unknown directive '" + first +
                          "'");
    }
  }
  if (!have_header) throw TopologyError("missing header line");
  topo.nodes.assign(seen_nodes.begin(), seen_nodes.end());
  std::sort(topo.links.begin(), topo.links.end(), [](const LinkSpec& x, const LinkSpec& y) {
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  return topo;
}

Topology load_topology_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TopologyError("cannot open topology file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_topology(buf.str());
}

std::string format_topology(const Topology& topo) {
  std::ostringstream out;
  out << "levels=" << topo.params.levels << " group_size=" << topo.params.group_size;
  if (topo.warm_levels > 0) out << " warm_levels=" << topo.warm_levels;
  out << "\n";
  for (const Address& node : topo.nodes) out << "node " << node.str() << "\n";
  for (const LinkSpec& link : topo.links)
    out << "link " << link.a.str() << " " << link.b.str() << " rtt="
        << format_number(link.quality.rtt_ms) << " bw=" << format_number(link.quality.bandwidth)
        << "\n";
  return out.str();
}

Topology generate_topology(const TopologyParams& params, int node_count, uint64_t seed) {
  if (!params.valid()) throw TopologyError("invalid topology parameters");
  if (node_count < 1) throw TopologyError("node_count must be positive");
  if (static_cast<double>(node_count) > params.address_space())
    throw TopologyError("node_count exceeds the address space");

  Topology topo;
  topo.params = params;
  const int B = params.group_size;
  for (int i = 0; i < node_count; ++i) {
    std::vector<int> comps(static_cast<size_t>(params.levels));
    long long rest = i;
    for (int k = 0; k < params.levels; ++k) {
      comps[static_cast<size_t>(k)] = static_cast<int>(rest % B);
      rest /= B;
    }
    topo.nodes.push_back(Address(comps, params));
  }
  std::sort(topo.nodes.begin(), topo.nodes.end());

  Rng rng(seed);
  std::set<std::pair<Address, Address>> edges;
  auto add_edge = [&](const Address& u, const Address& v) {
    if (u == v) return;
    const auto key = normalized(u, v);
    if (!edges.insert(key).second) return;
    LinkQuality q{static_cast<double>(rng.bounded(1, 100)),
                  static_cast<double>(rng.bounded(10, 1000))};
    topo.links.push_back(LinkSpec{key.first, key.second, q});
  };

  // Group members by their enclosing gnode at each level; sorted keys keep
  // the rng consumption order stable.
  for (int level = 0; level < params.levels; ++level) {
    // key: components strictly above `level`; value: subgroup id at `level`
    // -> member nodes.
    std::map<std::vector<int>, std::map<int, std::vector<Address>>> parents;
    for (const Address& node : topo.nodes) {
      std::vector<int> key(node.components().begin() + level + 1, node.components().end());
      parents[key][node.component(level)].push_back(node);
    }
    for (const auto& [key, subgroups] : parents) {
      std::vector<std::vector<Address>> sides;
      for (const auto& [id, members] : subgroups) sides.push_back(members);
      if (level == 0) {
        // Subgroups at level 0 are single nodes; the parent map collects the
        // innermost group. Span it with a random path plus chords.
        std::vector<Address> members;
        for (const auto& side : sides) members.push_back(side.front());
        if (members.size() >= 2) {
          std::vector<Address> order = members;
          rng.shuffle(order);
          for (size_t i = 1; i < order.size(); ++i) add_edge(order[i - 1], order[i]);
          const int extras = static_cast<int>(members.size()) / 2;
          for (int e = 0; e < extras; ++e) {
            const auto& u = members[static_cast<size_t>(
                rng.bounded(0, static_cast<int>(members.size()) - 1))];
            const auto& v = members[static_cast<size_t>(
                rng.bounded(0, static_cast<int>(members.size()) - 1))];
            add_edge(u, v);
          }
        }
        continue;
      }
      // Sibling groups at `level`: spanning path of border links, each taken
      // between one random member of each side, plus a few extra borders.
      if (sides.size() < 2) continue;
      std::vector<size_t> order(sides.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      auto pick = [&](const std::vector<Address>& side) -> const Address& {
        return side[static_cast<size_t>(rng.bounded(0, static_cast<int>(side.size()) - 1))];
      };
      for (size_t i = 1; i < order.size(); ++i)
        add_edge(pick(sides[order[i - 1]]), pick(sides[order[i]]));
      const int extras = static_cast<int>(sides.size()) / 3;
      for (int e = 0; e < extras; ++e) {
        const size_t x = static_cast<size_t>(rng.bounded(0, static_cast<int>(sides.size()) - 1));
        const size_t y = static_cast<size_t>(rng.bounded(0, static_cast<int>(sides.size()) - 1));
        if (x == y) continue;
        add_edge(pick(sides[x]), pick(sides[y]));
      }
    }
  }

  std::sort(topo.links.begin(), topo.links.end(), [](const LinkSpec& x, const LinkSpec& y) {
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  return topo;
}

// --- Warm start ------------------------------------------------------------

namespace {

struct PathInfo {
  Rem rem;
  Address parent;
  bool has_parent = false;
};

// Shortest paths from `origin` restricted to nodes of its gnode of
// `level + 1`, under the policy order (rtt adds, bandwidth bottlenecks; both
// degrade monotonically along a path, so label-setting search stays exact
// for either comparison mode).
std::map<Address, PathInfo> scoped_shortest_paths(const Topology& topo, const Address& origin,
                                                  int level, const RemPolicy& policy) {
  std::vector<Address> scope;
  for (const Address& node : topo.nodes)
    if (node.same_gnode_above(origin, level)) scope.push_back(node);

  std::map<Address, PathInfo> best;
  best[origin] = PathInfo{Rem::identity(), Address{}, false};
  std::set<Address> done;
  while (true) {
    const Address* next = nullptr;
    const PathInfo* next_info = nullptr;
    for (const auto& [node, info] : best) {
      if (done.count(node)) continue;
      if (!next || rem_better(info.rem, next_info->rem, policy)) {
        next = &node;
        next_info = &info;
      }
    }
    if (!next) break;
    const Address u = *next;
    done.insert(u);
    const Rem base = best[u].rem;
    for (const auto& [v, quality] : topo.neighbors(u)) {
      if (!v.same_gnode_above(origin, level)) continue;
      const Rem cand = rem_compose(base, Rem::from_link(quality));
      auto it = best.find(v);
      if (it == best.end() || rem_better(cand, it->second.rem, policy))
        best[v] = PathInfo{cand, u, true};
    }
  }
  return best;
}

}  // namespace

void warm_seed(NodeEngine& engine, const Topology& topo, const Address& node) {
  const int W = std::min(topo.warm_levels, topo.params.levels);
  if (W <= 0) return;  // fully cold start

  for (const auto& [neighbor, quality] : topo.neighbors(node))
    engine.seed_rnode(neighbor, quality);

  // Border records below the warm horizon, as every member of the border
  // node's side would have learned them.
  for (const LinkSpec& link : topo.links) {
    const Address* ends[2][2] = {{&link.a, &link.b}, {&link.b, &link.a}};
    for (const auto& [u, v] : ends) {
      const auto d = divergence_level(*u, *v);
      if (!d || *d == 0 || *d >= W) continue;
      const auto j = divergence_level(node, *u);
      if (!j || *j >= *d) continue;  // not on u's side, or u is the node itself
      engine.maps().record_bnode(*j, u->component(*j), GnodeRef{*d, v->component(*d)},
                                 Rem::from_link(link.quality));
    }
  }

  const RemPolicy& policy = engine.config().policy;
  for (int level = 0; level < W; ++level) {
    const auto paths = scoped_shortest_paths(topo, node, level, policy);
    // Best member per target group at this level.
    std::map<int, Address> best_member;
    for (const auto& [n, info] : paths) {
      if (n == node) continue;
      const int target = n.component(level);
      if (target == node.component(level)) continue;
      auto it = best_member.find(target);
      if (it == best_member.end() || rem_better(info.rem, paths.at(it->second).rem, policy))
        best_member[target] = n;
    }
    for (const auto& [target, member] : best_member) {
      // Reconstruct the path to find the first hop and the node where a
      // flood from the target side would have entered this node's own group.
      std::vector<Address> path{member};
      while (paths.at(path.back()).has_parent) path.push_back(paths.at(path.back()).parent);
      std::reverse(path.begin(), path.end());  // node .. member
      if (path.size() < 2) continue;
      const Address& gateway = path[1];
      std::optional<GnodeRef> via;
      size_t last_inside = 0;
      for (size_t i = 1; i + 1 < path.size(); ++i)
        if (path[i].same_gnode_above(node, level - 1)) last_inside = i;
      if (last_inside > 0) {
        const auto d = divergence_level(node, path[last_inside]);
        if (d) via = GnodeRef{*d, path[last_inside].component(*d)};
      }
      engine.maps().update_route(
          LearnedRoute{level, target, gateway, paths.at(member).rem, true, 0, via});
    }
    engine.seed_explored(level);
  }
}

}  // namespace fmesh
