#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fmesh/engine.hpp"
#include "fmesh/topology.hpp"

using namespace fmesh;

namespace {

bool connected(const Topology& topo) {
  if (topo.nodes.empty()) return true;
  std::set<Address> seen{topo.nodes.front()};
  std::queue<Address> frontier;
  frontier.push(topo.nodes.front());
  while (!frontier.empty()) {
    Address at = frontier.front();
    frontier.pop();
    for (const auto& [nbr, quality] : topo.neighbors(at)) {
      (void)quality;
      if (seen.insert(nbr).second) frontier.push(nbr);
    }
  }
  return seen.size() == topo.nodes.size();
}

// Independent route oracle: relax every link until nothing improves.
std::map<Address, Rem> relaxation_oracle(const Topology& topo, const Address& src,
                                         const RemPolicy& policy) {
  std::map<Address, Rem> best{{src, Rem::identity()}};
  bool moved = true;
  while (moved) {
    moved = false;
    for (const LinkSpec& link : topo.links) {
      const Rem hop = Rem::from_link(link.quality);
      for (const auto& [from, to] : {std::pair{link.a, link.b}, std::pair{link.b, link.a}}) {
        auto it = best.find(from);
        if (it == best.end()) continue;
        Rem candidate = rem_compose(it->second, hop);
        auto dest = best.find(to);
        if (dest == best.end() || rem_better(candidate, dest->second, policy)) {
          best[to] = candidate;
          moved = true;
        }
      }
    }
  }
  return best;
}

}  // namespace

TEST_CASE("topology text parses, formats canonically and round-trips") {
  const std::string text =
      "# comment\n"
      "group_size=4 levels=2 warm_levels=1\n"
      "\n"
      "node 1.0\n"
      "node 1.1\n"
      "link 1.1 1.0 rtt=10 bw=100\n";
  Topology topo = parse_topology(text);
  CHECK(topo.params.levels == 2);
  CHECK(topo.params.group_size == 4);
  CHECK(topo.warm_levels == 1);
  REQUIRE(topo.nodes.size() == 2);
  REQUIRE(topo.links.size() == 1);
  // Link endpoints are stored in canonical order.
  CHECK(topo.links[0].a.str() == "1.0");
  CHECK(topo.links[0].b.str() == "1.1");
  CHECK(topo.links[0].quality == LinkQuality{10, 100});
  CHECK(topo.has_node(parse_address("1.1", topo.params)));
  CHECK_FALSE(topo.has_node(parse_address("0.0", topo.params)));

  Topology again = parse_topology(format_topology(topo));
  CHECK(format_topology(again) == format_topology(topo));
  CHECK(again.nodes == topo.nodes);

  auto nbrs = topo.neighbors(parse_address("1.0", topo.params));
  REQUIRE(nbrs.size() == 1);
  CHECK(nbrs[0].first.str() == "1.1");
}

TEST_CASE("topology parse errors carry the offending line number") {
  auto check_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_topology(text);
      FAIL_CHECK("expected a parse error for: " << needle);
    } catch (const TopologyError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  check_error("node 1.0\n", "line 1: expected key=value");
  check_error("levels=2\nnode 1.0\n", "levels= and group_size=");
  check_error("levels=2 group_size=4\nnode 1.0\nnode 1.0\n", "line 3: duplicate node");
  check_error("levels=2 group_size=4\nnode 1.0\nlink 1.0 1.0 rtt=1 bw=1\n", "line 3: self-link");
  check_error(
      "levels=2 group_size=4\nnode 1.0\nnode 1.1\n"
      "link 1.0 1.1 rtt=1 bw=1\nlink 1.1 1.0 rtt=2 bw=2\n",
      "line 5: duplicate link");
  check_error("levels=2 group_size=4\nnode 1.0\nlink 1.0 1.1 rtt=1 bw=1\n", "unknown node");
  check_error("levels=2 group_size=4\nnode 9.0\n", "line 2");
  check_error("levels=2 group_size=4 warm_levels=3\nnode 1.0\n", "warm_levels");
  check_error("levels=2 group_size=4\nnode 1.0\nnode 1.1\nlink 1.0 1.1 rtt=x bw=1\n", "line 4");
}

TEST_CASE("generated topologies are valid, connected and seed-deterministic") {
  const TopologyParams params{3, 4};
  for (uint64_t seed : {1ULL, 7ULL, 42ULL}) {
    Topology topo = generate_topology(params, 24, seed);
    CHECK(topo.nodes.size() == 24);
    CHECK(connected(topo));
    CHECK(std::is_sorted(topo.nodes.begin(), topo.nodes.end()));
    std::set<Address> unique_nodes(topo.nodes.begin(), topo.nodes.end());
    CHECK(unique_nodes.size() == topo.nodes.size());
    for (const Address& node : topo.nodes) {
      for (int level = 0; level < params.levels; ++level) {
        CHECK(node.component(level) >= 0);
        CHECK(node.component(level) < params.group_size);
      }
    }
    std::set<std::pair<std::string, std::string>> unique_links;
    for (const LinkSpec& link : topo.links) {
      CHECK(link.a < link.b);
      CHECK(link.quality.rtt_ms >= 1);
      CHECK(link.quality.rtt_ms <= 100);
      CHECK(link.quality.bandwidth >= 10);
      CHECK(link.quality.bandwidth <= 1000);
      CHECK(unique_links.insert({link.a.str(), link.b.str()}).second);
    }

    // Same seed, same network, byte for byte; other seeds differ.
    CHECK(format_topology(generate_topology(params, 24, seed)) == format_topology(topo));
  }
  CHECK(format_topology(generate_topology(params, 24, 1)) !=
        format_topology(generate_topology(params, 24, 2)));

  // Node counts beyond the address space are refused.
  CHECK_THROWS_AS(generate_topology(TopologyParams{1, 4}, 5, 1), TopologyError);
}

TEST_CASE("warm seeding installs neighbours, borders and oracle-grade routes") {
  Topology topo = parse_topology(
      "levels=2 group_size=8 warm_levels=1\n"
      "node 1.0\nnode 1.1\nnode 1.2\nnode 1.3\nnode 2.0\n"
      "link 1.0 1.1 rtt=10 bw=100\n"
      "link 1.1 1.2 rtt=20 bw=50\n"
      "link 1.2 1.3 rtt=10 bw=100\n"
      "link 1.0 1.3 rtt=60 bw=10\n"
      "link 1.3 2.0 rtt=30 bw=40\n");

  EngineConfig config;
  config.params = topo.params;
  Address node = parse_address("1.0", topo.params);
  NodeEngine engine(node, config);
  warm_seed(engine, topo, node);

  // Direct neighbours are pre-confirmed.
  REQUIRE(engine.rnodes().size() == 2);
  CHECK(engine.rnodes().count(parse_address("1.1", topo.params)) == 1);
  CHECK(engine.rnodes().count(parse_address("1.3", topo.params)) == 1);

  // Level-0 routes match the independent relaxation oracle exactly.
  auto oracle = relaxation_oracle(topo, node, config.policy);
  CHECK(engine.maps().best_rem(0, 1) == oracle.at(parse_address("1.1", topo.params)));
  CHECK(engine.maps().best_rem(0, 2) == oracle.at(parse_address("1.2", topo.params)));
  CHECK(engine.maps().best_rem(0, 3) == oracle.at(parse_address("1.3", topo.params)));
  // Frozen values for the same: 1.2 via the 10+20 path, 1.3 via 10+20+10.
  CHECK(engine.maps().best_rem(0, 2) == Rem{30, 50});
  CHECK(engine.maps().best_rem(0, 3) == Rem{40, 50});

  // Warm levels count as explored, the cold top level does not.
  CHECK(engine.explored(0));
  CHECK_FALSE(engine.explored(1));
  // Nothing above the warm horizon: no routes, no second-hand border records.
  CHECK(engine.maps().level_empty(1));
  CHECK(engine.maps().entities_bordering(GnodeRef{1, 2}).empty());

  // The border node itself always records its own crossing.
  NodeEngine border_engine(parse_address("1.3", topo.params), config);
  warm_seed(border_engine, topo, parse_address("1.3", topo.params));
  auto own = border_engine.maps().entities_bordering(GnodeRef{1, 2});
  REQUIRE(own.size() == 1);
  CHECK(own[0] == GnodeRef{0, 3});
}

TEST_CASE("warm seeding above a border installs the record and the route") {
  Topology topo = parse_topology(
      "levels=2 group_size=8 warm_levels=2\n"
      "node 1.0\nnode 1.1\nnode 1.2\nnode 1.3\nnode 2.0\n"
      "link 1.0 1.1 rtt=10 bw=100\n"
      "link 1.1 1.2 rtt=20 bw=50\n"
      "link 1.2 1.3 rtt=10 bw=100\n"
      "link 1.0 1.3 rtt=60 bw=10\n"
      "link 1.3 2.0 rtt=30 bw=40\n");

  EngineConfig config;
  config.params = topo.params;
  Address node = parse_address("1.0", topo.params);
  NodeEngine engine(node, config);
  warm_seed(engine, topo, node);

  // 1.3 borders gnode 2; with the border level warm the other members hold
  // that record too.
  auto owners = engine.maps().entities_bordering(GnodeRef{1, 2});
  REQUIRE(owners.size() == 1);
  CHECK(owners[0] == GnodeRef{0, 3});

  // Route to gnode 2 goes over the best path to any of its members:
  // 1.0-1.1-1.2-1.3-2.0 = 70ms/40, beating the direct-link path's 90ms/10.
  CHECK(engine.maps().best_rem(1, 2) == Rem{70, 40});
  auto entry = engine.maps().targets(1).at(2);
  REQUIRE(entry.routes.size() >= 1);
  CHECK(entry.routes[0].gateway == parse_address("1.1", topo.params));
  CHECK(entry.routes[0].via == GnodeRef{0, 3});
  CHECK(engine.explored(1));
}

TEST_CASE("a fully cold topology seeds nothing") {
  Topology topo = parse_topology(
      "levels=2 group_size=4\n"
      "node 1.0\nnode 1.1\n"
      "link 1.0 1.1 rtt=10 bw=100\n");
  CHECK(topo.warm_levels == 0);

  EngineConfig config;
  config.params = topo.params;
  Address node = parse_address("1.0", topo.params);
  NodeEngine engine(node, config);
  warm_seed(engine, topo, node);
  CHECK(engine.rnodes().empty());
  CHECK(engine.maps().route_target_count() == 0);
  CHECK_FALSE(engine.explored(0));
}
