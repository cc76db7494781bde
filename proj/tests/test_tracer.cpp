#include <map>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fmesh/maps.hpp"
#include "fmesh/tracer.hpp"

using namespace fmesh;

namespace {
const TopologyParams kTwo{2, 4};
const TopologyParams kWide{3, 64};

Hop gnode_hop(int id, int level, Rem rem = Rem::identity()) {
  Hop h;
  h.id = id;
  h.level = level;
  h.link_rem = rem;
  return h;
}
}  // namespace

TEST_CASE("append maintains the traversed list and rejects revisits") {
  TracerPacket pkt = make_ctp(1);
  append_hop(pkt, gnode_hop(1, 1, Rem{10, 100}));
  append_hop(pkt, gnode_hop(2, 1, Rem{30, 50}));
  CHECK(pkt.traversed == std::vector<int>{1, 2});
  CHECK(has_traversed(pkt, 1));
  CHECK(has_traversed(pkt, 2));
  CHECK_FALSE(has_traversed(pkt, 3));

  CHECK_THROWS_AS(append_hop(pkt, gnode_hop(1, 1)), TracerError);
  // A tolerated revisit is a no-op: the hop list never records a gnode twice.
  append_hop(pkt, gnode_hop(1, 1), /*allow_duplicate=*/true);
  CHECK(pkt.hops.size() == 2);
  CHECK(pkt.traversed == std::vector<int>{1, 2});

  // Hop level must match the packet level.
  TracerPacket other = make_ctp(2);
  CHECK_THROWS_AS(append_hop(other, gnode_hop(1, 1)), TracerError);

  // Death announcements ride along without counting as a traversal.
  TracerPacket death = make_ctp(0);
  Hop dead = gnode_hop(3, 0);
  dead.dead = true;
  append_hop(death, dead);
  CHECK(death.traversed.empty());
}

TEST_CASE("lock freezes the hop list, unlock appends the crossing") {
  TracerPacket pkt = make_ctp(1);
  append_hop(pkt, gnode_hop(2, 1, Rem{10, 100}));

  Address ingress = parse_address("1.1", kTwo);
  TracerPacket locked = lock(pkt, ingress, Rem{30, 50});
  CHECK(locked.kind == PacketKind::Ltp);
  CHECK(locked.lock_ip == ingress);
  CHECK(locked.lock_ingress_rem == Rem{30, 50});
  CHECK(locked.hops == pkt.hops);
  CHECK_THROWS_AS(lock(locked, ingress, Rem{}), TracerError);
  CHECK_THROWS_AS(lock(pkt, Address(), Rem{}), TracerError);

  TracerPacket out = unlock(locked, 1, Rem{40, 50});
  CHECK(out.kind == PacketKind::Ctp);
  CHECK_FALSE(out.lock_ip.has_value());
  // Hop content: the original hops plus the own gnode with the crossing REM.
  REQUIRE(out.hops.size() == 2);
  CHECK(out.hops[0] == pkt.hops[0]);
  CHECK(out.hops[1] == gnode_hop(1, 1, Rem{40, 50}));
  CHECK(out.traversed == std::vector<int>{2, 1});
  CHECK_THROWS_AS(unlock(out, 3, Rem{}), TracerError);

  // A diagnostic flood keeps its refresh flag only when asked to.
  TracerPacket refresh = make_ctp(1);
  refresh.refresh = true;
  append_hop(refresh, gnode_hop(2, 1));
  TracerPacket relocked = lock(refresh, ingress, Rem{});
  CHECK_FALSE(unlock(relocked, 1, Rem{}).refresh);
  CHECK(unlock(relocked, 1, Rem{}, /*keep_refresh=*/true).refresh);
}

TEST_CASE("duplicate detection keys on the route, not on the measures") {
  TracerPacket a = make_ctp(1);
  append_hop(a, gnode_hop(2, 1, Rem{10, 100}));
  append_hop(a, gnode_hop(3, 1, Rem{30, 50}));
  TracerPacket b = make_ctp(1);
  append_hop(b, gnode_hop(2, 1, Rem{99, 1}));
  append_hop(b, gnode_hop(3, 1, Rem{70, 5}));

  // Same high-level route, different measured quality: duplicates.
  CHECK(dedup_key(a) == dedup_key(b));
  CHECK(dedup_key(a) == "L1|ctp|h2@1|h3@1");

  // A different lock marks a different flood.
  TracerPacket la = lock(a, parse_address("1.0", kTwo), Rem{});
  TracerPacket lb = lock(a, parse_address("1.1", kTwo), Rem{});
  CHECK(dedup_key(la) != dedup_key(lb));
  CHECK(dedup_key(la) != dedup_key(a));

  // Hop order matters; so do death flags and the level.
  TracerPacket rev = make_ctp(1);
  append_hop(rev, gnode_hop(3, 1));
  append_hop(rev, gnode_hop(2, 1));
  CHECK(dedup_key(rev) != dedup_key(a));
  TracerPacket dead = make_ctp(1);
  Hop d = gnode_hop(2, 1);
  d.dead = true;
  append_hop(dead, d);
  append_hop(dead, gnode_hop(3, 1));
  CHECK(dedup_key(dead) != dedup_key(a));
}

TEST_CASE("wire form round-trips and matches the frozen layout") {
  // Level-1 announcement with one hop, 10ms / 100 units.
  TracerPacket pkt = make_ctp(1);
  append_hop(pkt, gnode_hop(1, 1, Rem{10, 100}));
  CHECK(packet_hex(pkt, kTwo) == "00010100ff010a0000006400000000");
  CHECK(packet_from_hex("00010100ff010a0000006400000000", kTwo) == pkt);

  // The refresh flag lives in the top bit of the first byte.
  TracerPacket refresh = pkt;
  refresh.refresh = true;
  CHECK(packet_hex(refresh, kTwo) == "80010100ff010a0000006400000000");

  // Locked level-2 packet: one identity hop for gnode 11, locked by 22.3.3
  // with a 60ms / 40 units ingress crossing.
  TracerPacket ltp = make_ctp(2);
  append_hop(ltp, gnode_hop(11, 2));
  ltp = lock(ltp, parse_address("22.3.3", kWide), Rem{60, 40});
  CHECK(packet_hex(ltp, kWide) == "01020100ffff0b00000000ffffffff000303163c00000028000000");
  CHECK(packet_from_hex("01020100ffff0b00000000ffffffff000303163c00000028000000", kWide) == ltp);

  // Death flag in the hop flags byte.
  TracerPacket death = make_ctp(0);
  Hop dead = gnode_hop(2, 0, Rem{10, 100});
  dead.dead = true;
  append_hop(death, dead);
  CHECK(packet_hex(death, kTwo) == "0000010002ff0a0000006400000001");

  // Lost-border hop: full losing address, lost gnode id in the first value
  // field, border level in the upper flag bits.
  TracerPacket lost = make_ctp(1);
  Hop lb;
  lb.level = 1;
  lb.lost_border = true;
  lb.bnode_addr = parse_address("33.2.2", kWide);
  lb.border = GnodeRef{2, 22};
  append_hop(lost, lb);
  CHECK(packet_hex(lost, kWide) == "0001010002022116000000000000000a");
  CHECK(packet_from_hex("0001010002022116000000000000000a", kWide) == lost);

  // Damaged input is refused.
  CHECK_THROWS_AS(packet_from_hex("0001", kTwo), TracerError);
  CHECK_THROWS_AS(packet_from_hex("zz", kTwo), TracerError);
}

TEST_CASE("random packets survive the wire form unchanged") {
  std::mt19937 rng(20260823);
  for (int round = 0; round < 200; ++round) {
    const int level = static_cast<int>(rng() % 3);
    TracerPacket pkt = make_ctp(level);
    pkt.refresh = (rng() % 2) == 0;
    std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7};
    const int hop_count = static_cast<int>(rng() % 5);
    for (int i = 0; i < hop_count; ++i) {
      const int pick = static_cast<int>(rng() % ids.size());
      const int id = ids[static_cast<size_t>(pick)];
      ids.erase(ids.begin() + pick);
      const int flavor = static_cast<int>(rng() % 5);
      if (flavor == 0) {
        Hop dead = gnode_hop(id, level);
        dead.dead = true;
        append_hop(pkt, dead);
      } else if (flavor == 1) {
        Hop lb;
        lb.level = level;  // senders keep hop levels aligned with the packet
        lb.lost_border = true;
        lb.bnode_addr = Address({static_cast<int>(rng() % 64), static_cast<int>(rng() % 64),
                                 static_cast<int>(rng() % 64)},
                                kWide);
        lb.border = GnodeRef{static_cast<int>(rng() % 3), static_cast<int>(rng() % 64)};
        append_hop(pkt, lb);
      } else {
        const double rtt = static_cast<double>(rng() % 1000);
        const double bw = flavor == 2 ? std::numeric_limits<double>::infinity()
                                      : static_cast<double>(1 + rng() % 1000);
        append_hop(pkt, gnode_hop(id, level, Rem{rtt, bw}));
      }
    }
    if (rng() % 2 == 0) {
      pkt = lock(pkt,
                 Address({static_cast<int>(rng() % 64), static_cast<int>(rng() % 64),
                          static_cast<int>(rng() % 64)},
                         kWide),
                 Rem{static_cast<double>(rng() % 500), static_cast<double>(1 + rng() % 500)});
    }
    TracerPacket back = packet_from_hex(packet_hex(pkt, kWide), kWide);
    CHECK(back == pkt);
  }
}

TEST_CASE("a received announcement teaches routes priced backwards from the link") {
  NodeMaps maps(parse_address("1.0", kTwo), kTwo, RemPolicy{}, 3);
  Address from = parse_address("1.1", kTwo);

  TracerPacket pkt = make_ctp(1);
  append_hop(pkt, gnode_hop(2, 1, Rem{10, 100}));
  append_hop(pkt, gnode_hop(3, 1, Rem{20, 50}));

  PacketFacts facts = extract_facts(pkt, maps, from, Rem{5, 100});
  REQUIRE(facts.routes.size() == 2);
  // Facts come newest hop first: the nearest hop costs just the link, the
  // one before it adds the segment the nearest hop recorded.
  CHECK(facts.routes[0].level == 1);
  CHECK(facts.routes[0].target_id == 3);
  CHECK(facts.routes[0].rem == Rem{5, 100});
  CHECK(facts.routes[0].gateway == from);
  CHECK(facts.routes[1].target_id == 2);
  CHECK(facts.routes[1].rem == Rem{25, 50});  // link + the 3->2 segment
  CHECK(facts.base_known);

  CHECK(is_interesting(pkt, maps, from, Rem{5, 100}));
  for (const RouteFact& fact : facts.routes) {
    maps.update_route(LearnedRoute{fact.level, fact.target_id, fact.gateway, fact.rem, true, 0,
                                   fact.via});
  }
  // The identical packet now reports nothing new.
  CHECK_FALSE(is_interesting(pkt, maps, from, Rem{5, 100}));
  // A better link makes the same announcement interesting again.
  CHECK(is_interesting(pkt, maps, from, Rem{1, 100}));
}

TEST_CASE("a locked flood prices routes through the ingress crossing") {
  NodeMaps maps(parse_address("1.0", kTwo), kTwo, RemPolicy{}, 3);
  Address from = parse_address("1.1", kTwo);
  Address ingress = from;  // the neighbour is the gnode's ingress here

  TracerPacket pkt = make_ctp(1);
  append_hop(pkt, gnode_hop(2, 1));
  pkt = lock(pkt, ingress, Rem{30, 50});

  // Without a route to the ingress node the crossing cannot be priced yet;
  // the border record still comes through.
  PacketFacts blind = extract_facts(pkt, maps, from, Rem{10, 100});
  CHECK_FALSE(blind.base_known);
  CHECK(blind.routes.empty());
  REQUIRE(blind.bnodes.size() == 1);
  CHECK(blind.bnodes[0].entity_level == 0);
  CHECK(blind.bnodes[0].entity_id == 1);
  CHECK(blind.bnodes[0].borders_on == GnodeRef{1, 2});
  CHECK(is_interesting(pkt, maps, from, Rem{10, 100}));  // new border node

  // A direct link to the ingress serves as fallback pricing.
  std::map<Address, LinkQuality> links{{ingress, LinkQuality{10, 100}}};
  PacketFacts direct = extract_facts(pkt, maps, from, Rem{10, 100}, &links);
  CHECK(direct.base_known);
  REQUIRE(direct.routes.size() == 1);
  CHECK(direct.routes[0].rem == Rem{40, 50});
  CHECK(direct.routes[0].via == GnodeRef{0, 1});

  // With a stored route to the ingress the map itself prices the crossing.
  maps.update_route(LearnedRoute{0, 1, from, Rem{10, 100}, true, 0, std::nullopt});
  PacketFacts priced = extract_facts(pkt, maps, from, Rem{10, 100});
  CHECK(priced.base_known);
  REQUIRE(priced.routes.size() == 1);
  CHECK(priced.routes[0].rem == Rem{40, 50});
}

TEST_CASE("death announcements are news while anything would still change") {
  NodeMaps maps(parse_address("1.0", kTwo), kTwo, RemPolicy{}, 3);
  Address from = parse_address("1.1", kTwo);

  TracerPacket pkt = make_ctp(0);
  Hop dead = gnode_hop(3, 0);
  dead.dead = true;
  append_hop(pkt, dead);
  append_hop(pkt, gnode_hop(1, 0, Rem{10, 100}));

  PacketFacts facts = extract_facts(pkt, maps, from, Rem{10, 100});
  REQUIRE(facts.deaths.size() == 1);
  CHECK(facts.deaths[0].level == 0);
  CHECK(facts.deaths[0].id == 3);

  // Unknown target: the tombstone itself is a change worth forwarding.
  CHECK(is_interesting(pkt, maps, from, Rem{10, 100}));

  maps.update_route(LearnedRoute{0, 1, from, Rem{10, 100}, true, 0, std::nullopt});
  maps.update_route(LearnedRoute{0, 3, from, Rem{20, 100}, true, 0, std::nullopt});
  CHECK(is_interesting(pkt, maps, from, Rem{10, 100}));  // death of a live member

  NodeMaps applied = maps;
  applied.kill_entity(0, 3, 0);
  // Everything the packet reports is already on file.
  CHECK_FALSE(is_interesting(pkt, applied, from, Rem{10, 100}));
}

TEST_CASE("interest is exactly map change: boring packets change nothing when applied") {
  // Randomized cross-check between the interest predicate and an actual
  // application of the packet's facts.
  std::mt19937 rng(907);
  const TopologyParams params{2, 4};
  Address owner = parse_address("1.0", params);
  Address from = parse_address("1.1", params);

  // Border-quality refreshes below the level's change threshold update the
  // stored measure silently (deliberately not news), so the snapshot compares
  // routes and border structure, not the crossing measures.
  auto snapshot = [](const NodeMaps& m) {
    std::ostringstream state;
    for (const std::string& line : m.dump_lines()) state << line << '\n';
    for (int level = 0; level < m.params().levels; ++level) {
      for (const auto& [id, entry] : m.bnode_entities(level)) {
        for (const auto& [border, rem] : entry.borders) {
          (void)rem;
          state << 'B' << level << ':' << id << '>' << border.level << ':' << border.id << '\n';
        }
      }
    }
    return state.str();
  };

  NodeMaps maps(owner, params, RemPolicy{}, 3);
  int boring_seen = 0;
  for (int round = 0; round < 400; ++round) {
    TracerPacket pkt = make_ctp(1);
    std::vector<int> ids{0, 2, 3};
    const int hop_count = 1 + static_cast<int>(rng() % 2);
    for (int i = 0; i < hop_count; ++i) {
      const int pick = static_cast<int>(rng() % ids.size());
      const int id = ids[static_cast<size_t>(pick)];
      ids.erase(ids.begin() + pick);
      Hop hop = gnode_hop(id, 1, Rem{static_cast<double>(10 * (1 + rng() % 3)), 100});
      hop.dead = (rng() % 8) == 0;
      append_hop(pkt, hop);
    }
    if (rng() % 3 == 0) pkt = lock(pkt, from, Rem{static_cast<double>(10 * (1 + rng() % 2)), 50});
    Rem link{static_cast<double>(10 * (1 + rng() % 2)), 100};
    std::map<Address, LinkQuality> links{{from, LinkQuality{10, 100}}};

    const bool interesting = is_interesting(pkt, maps, from, link, &links);
    const std::string before = snapshot(maps);

    PacketFacts facts = extract_facts(pkt, maps, from, link, &links);
    for (const DeathFact& death : facts.deaths) maps.kill_entity(death.level, death.id, round);
    for (const BnodeFact& fact : facts.bnodes)
      maps.record_bnode(fact.entity_level, fact.entity_id, fact.borders_on, fact.rem);
    for (const RouteFact& fact : facts.routes) {
      maps.update_route(LearnedRoute{fact.level, fact.target_id, fact.gateway, fact.rem, true,
                                     round, fact.via, fact.authoritative});
    }

    if (!interesting) {
      ++boring_seen;
      CHECK(snapshot(maps) == before);
    }
  }
  // The stream must actually exercise the boring path.
  CHECK(boring_seen > 50);
}
