#include <vector>

#include "doctest.h"
#include "fmesh/maps.hpp"

using namespace fmesh;

namespace {
const TopologyParams kDesk{3, 4};

NodeMaps fresh_maps() {
  return NodeMaps(parse_address("1.1.1", kDesk), kDesk, RemPolicy{}, 3);
}

LearnedRoute route(int level, int target, const char* gw, Rem rem) {
  return LearnedRoute{level, target, parse_address(gw, kDesk), rem, true, 0, std::nullopt};
}

// A fact straight from the target itself, allowed to worsen its own entry.
LearnedRoute firsthand(int level, int target, const char* gw, Rem rem) {
  LearnedRoute r = route(level, target, gw, rem);
  r.authoritative = true;
  return r;
}

LearnedRoute death(int level, int target) {
  return LearnedRoute{level, target, Address(), Rem{}, false, 0, std::nullopt};
}
}  // namespace

TEST_CASE("update_route reports novelty, improvement, change and no-ops") {
  NodeMaps m = fresh_maps();

  CHECK(m.update_route(route(0, 3, "1.1.3", Rem{10, 100})) == MapChange::NewTarget);
  CHECK(m.best_rem(0, 3) == Rem{10, 100});

  // Identical repeat changes nothing; classify agrees with update.
  CHECK(m.classify_route(route(0, 3, "1.1.3", Rem{10, 100})) == MapChange::None);
  CHECK(m.update_route(route(0, 3, "1.1.3", Rem{10, 100})) == MapChange::None);

  // A second gateway with a better measure improves the best.
  CHECK(m.update_route(route(0, 3, "1.1.0", Rem{5, 200})) == MapChange::Improved);
  CHECK(m.best_rem(0, 3) == Rem{5, 200});

  // A relayed fact can never worsen the stored route through its gateway:
  // packets passing third parties may carry stale, longer-path values.
  CHECK(m.update_route(route(0, 3, "1.1.0", Rem{50, 10})) == MapChange::None);
  CHECK(m.best_rem(0, 3) == Rem{5, 200});

  // The target itself reporting its own link worse is believed, and the
  // other gateway becomes best again.
  CHECK(m.update_route(firsthand(0, 3, "1.1.0", Rem{50, 10})) == MapChange::Changed);
  CHECK(m.best_rem(0, 3) == Rem{10, 100});

  CHECK(m.update_route(route(0, 3, "1.1.2", Rem{7, 100})) == MapChange::Improved);
  CHECK(m.best_rem(0, 3) == Rem{7, 100});

  // At capacity (3 routes): a worse-than-worst candidate is ignored...
  CHECK(m.classify_route(route(0, 3, "2.0.0", Rem{100, 1})) == MapChange::None);
  CHECK(m.update_route(route(0, 3, "2.0.0", Rem{100, 1})) == MapChange::None);
  // ...but a better one displaces the worst.
  CHECK(m.update_route(route(0, 3, "2.0.0", Rem{1, 1})) == MapChange::Improved);
  CHECK(m.best_rem(0, 3) == Rem{1, 1});
  CHECK(m.targets(0).at(3).routes.size() == 3);
}

TEST_CASE("the maps never store a route to the owner's own gnode") {
  NodeMaps m = fresh_maps();
  for (int level = 0; level < 3; ++level) {
    CHECK_THROWS_AS(m.update_route(route(level, 1, "1.1.0", Rem{1, 1})), MapError);
  }
  CHECK_THROWS_AS(m.best_gateway(parse_address("1.1.1", kDesk)), MapError);
}

TEST_CASE("death tombstones a target and a live update revives it") {
  NodeMaps m = fresh_maps();
  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));

  auto report = m.kill_entity(0, 3, 1000);
  CHECK(report.was_alive);
  CHECK(m.target_known(0, 3));
  CHECK_FALSE(m.target_alive(0, 3));
  CHECK(m.best_rem(0, 3) == std::nullopt);
  CHECK(m.best_gateway(parse_address("1.1.3", kDesk)) == std::nullopt);
  // Tombstones still occupy a map entry.
  CHECK(m.route_target_count() == 1);

  CHECK(m.update_route(route(0, 3, "1.1.0", Rem{9, 50})) == MapChange::Revived);
  CHECK(m.target_alive(0, 3));
  CHECK(m.best_rem(0, 3) == Rem{9, 50});

  // A death report for a target never heard of still leaves a tombstone, so
  // late route announcements for it stay recognizably stale.
  CHECK(m.update_route(death(1, 2)) == MapChange::Died);
  CHECK(m.target_known(1, 2));
  CHECK_FALSE(m.target_alive(1, 2));
  // Repeating the death changes nothing.
  CHECK(m.update_route(death(1, 2)) == MapChange::None);
}

TEST_CASE("killing a border entity drops the routes that depended on it") {
  NodeMaps m = fresh_maps();
  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));
  LearnedRoute ext = route(1, 2, "1.1.3", Rem{60, 40});
  ext.via = GnodeRef{0, 3};  // learned through bnode 3 of the own gnode
  m.update_route(ext);

  auto report = m.kill_entity(0, 3, 1000);
  CHECK(report.was_alive);
  REQUIRE(report.affected_targets.size() == 1);
  CHECK(report.affected_targets[0] == GnodeRef{1, 2});
  CHECK(m.best_rem(1, 2) == std::nullopt);
}

TEST_CASE("best_gateway resolves at the divergence level, uniformly per gnode") {
  NodeMaps m = fresh_maps();
  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));
  m.update_route(route(1, 2, "1.1.3", Rem{60, 40}));
  m.update_route(route(2, 3, "1.1.0", Rem{100, 10}));

  CHECK(m.best_gateway(parse_address("1.1.3", kDesk)) == parse_address("1.1.3", kDesk));
  CHECK(m.best_gateway(parse_address("1.2.0", kDesk)) == parse_address("1.1.3", kDesk));
  // Every address of gnode 3 resolves through the same level-2 entry.
  CHECK(m.best_gateway(parse_address("3.0.0", kDesk)) == parse_address("1.1.0", kDesk));
  CHECK(m.best_gateway(parse_address("3.3.3", kDesk)) == m.best_gateway(parse_address("3.0.0", kDesk)));
  // No entry for level-1 gnode 3.
  CHECK(m.best_gateway(parse_address("1.3.3", kDesk)) == std::nullopt);
}

TEST_CASE("border records report entity and border novelty") {
  NodeMaps m = fresh_maps();

  auto first = m.record_bnode(0, 3, GnodeRef{2, 3}, Rem{20, 50});
  CHECK(first.new_entity);
  CHECK(first.new_border);

  auto second = m.record_bnode(0, 3, GnodeRef{2, 2}, Rem{30, 50});
  CHECK_FALSE(second.new_entity);
  CHECK(second.new_border);

  auto repeat = m.record_bnode(0, 3, GnodeRef{2, 3}, Rem{25, 50});
  CHECK_FALSE(repeat.new_entity);
  CHECK_FALSE(repeat.new_border);
  // The refresh still updates the stored crossing quality.
  CHECK(m.bnode_entities(0).at(3).borders.at(GnodeRef{2, 3}) == Rem{25, 50});

  CHECK(m.bnode_known(0, 3));
  CHECK_FALSE(m.bnode_known(0, 2));
  auto owners = m.entities_bordering(GnodeRef{2, 3});
  REQUIRE(owners.size() == 1);
  CHECK(owners[0] == GnodeRef{0, 3});

  CHECK(m.remove_border(0, 3, GnodeRef{2, 3}));
  CHECK_FALSE(m.remove_border(0, 3, GnodeRef{2, 3}));
  CHECK(m.entities_bordering(GnodeRef{2, 3}).empty());
}

TEST_CASE("free node ids are the complement of the live members") {
  NodeMaps m = fresh_maps();
  CHECK(m.free_node_ids() == std::vector<int>{0, 2, 3});

  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));
  CHECK(m.free_node_ids() == std::vector<int>{0, 2});

  m.update_route(route(0, 0, "1.1.0", Rem{10, 100}));
  m.update_route(route(0, 2, "1.1.0", Rem{20, 100}));
  CHECK(m.free_node_ids().empty());  // gnode full

  // A dead member's id becomes assignable again.
  m.kill_entity(0, 3, 1000);
  CHECK(m.free_node_ids() == std::vector<int>{3});
}

TEST_CASE("target count spans all levels and respects the structural bound") {
  NodeMaps m = fresh_maps();
  CHECK(m.route_target_count() == 0);
  CHECK(m.level_empty(1));

  // Fill every possible slot: 3 foreign ids per level.
  for (int level = 0; level < 3; ++level) {
    for (int id = 0; id < 4; ++id) {
      if (id == 1) continue;
      m.update_route(route(level, id, "1.1.0", Rem{10, 100}));
    }
  }
  CHECK(m.route_target_count() == 9);
  CHECK(m.route_target_count() <= kDesk.max_map_entries());
  CHECK_FALSE(m.level_empty(1));

  // Out-of-range targets are refused, so the bound cannot be exceeded.
  CHECK_THROWS_AS(m.update_route(route(0, 4, "1.1.0", Rem{1, 1})), MapError);
  CHECK_THROWS_AS(m.update_route(route(3, 0, "1.1.0", Rem{1, 1})), MapError);
}

TEST_CASE("gateway and dependency drops remove matching routes only") {
  NodeMaps m = fresh_maps();
  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));
  m.update_route(route(0, 3, "1.1.0", Rem{20, 100}));
  m.update_route(route(1, 2, "1.1.3", Rem{60, 40}));

  CHECK(m.drop_routes_via_gateway(parse_address("1.1.3", kDesk)) == 2);
  CHECK(m.best_rem(0, 3) == Rem{20, 100});
  CHECK(m.best_rem(1, 2) == std::nullopt);

  CHECK(m.drop_routes_to_target_if(0, 3, [](const RouteEntry&) { return true; }) == 1);
  CHECK(m.best_rem(0, 3) == std::nullopt);
  CHECK(m.target_alive(0, 3));  // dropping routes is not a death
}

TEST_CASE("dump lines use the documented route-entry format") {
  NodeMaps m = fresh_maps();
  m.update_route(route(0, 3, "1.1.3", Rem{10, 100}));
  auto lines = m.dump_lines();
  REQUIRE(lines.size() == 1);
  CHECK(lines[0] == "1.1.1 L0 target=3 gw=1.1.3 rtt=10 bw=100 alive=1");

  m.kill_entity(0, 3, 1000);
  lines = m.dump_lines();
  REQUIRE(lines.size() == 1);
  CHECK(lines[0] == "1.1.1 L0 target=3 gw=- rtt=0 bw=0 alive=0");
}
