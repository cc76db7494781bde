#include <optional>
#include <vector>

#include "doctest.h"
#include "fmesh/addressing.hpp"

using namespace fmesh;

namespace {
const TopologyParams kDeep{4, 256};
const TopologyParams kDesk{3, 64};

Address mk(std::vector<int> comps, const TopologyParams& params) {
  return Address(std::move(comps), params);
}
}  // namespace

TEST_CASE("address text is highest level first, storage lowest level first") {
  Address a = parse_address("33.2.2", kDesk);
  CHECK(a.components() == std::vector<int>{2, 2, 33});
  CHECK(a.component(0) == 2);
  CHECK(a.component(1) == 2);
  CHECK(a.component(2) == 33);
  CHECK(a.levels() == 3);
  CHECK(a.str() == "33.2.2");

  TopologyParams flat{1, 8};
  Address s = parse_address("5", flat);
  CHECK(s.components() == std::vector<int>{5});
  CHECK(s.str() == "5");
}

TEST_CASE("address parse and construction reject malformed input") {
  CHECK_THROWS_AS(parse_address("1.2", kDesk), AddressError);        // too few parts
  CHECK_THROWS_AS(parse_address("1.2.3.4", kDesk), AddressError);    // too many parts
  CHECK_THROWS_AS(parse_address("64.0.0", kDesk), AddressError);     // component ≥ group size
  CHECK_THROWS_AS(parse_address("-1.0.0", kDesk), AddressError);     // negative component
  CHECK_THROWS_AS(parse_address("a.b.c", kDesk), AddressError);      // not numbers
  CHECK_THROWS_AS(parse_address("", kDesk), AddressError);           // empty
  CHECK_THROWS_AS(parse_address("1..2", kDesk), AddressError);       // empty part

  CHECK_THROWS_AS(mk({4, 0, 0}, {3, 4}), AddressError);  // component out of range
  CHECK_THROWS_AS(mk({1, 2}, kDesk), AddressError);      // wrong component count
  CHECK(Address().empty());
  CHECK_FALSE(parse_address("0.0.0", kDesk).empty());
}

TEST_CASE("divergence level is the highest differing component") {
  Address a = mk({1, 2, 3, 4}, kDeep);  // prints 4.3.2.1

  CHECK(divergence_level(a, mk({1, 2, 3, 4}, kDeep)) == std::nullopt);
  CHECK(divergence_level(a, mk({9, 2, 3, 4}, kDeep)) == 0);
  CHECK(divergence_level(a, mk({9, 9, 3, 4}, kDeep)) == 1);
  CHECK(divergence_level(a, mk({1, 2, 9, 4}, kDeep)) == 2);
  CHECK(divergence_level(a, mk({1, 2, 3, 9}, kDeep)) == 3);
  // Highest difference wins even when lower components differ too.
  CHECK(divergence_level(a, mk({9, 2, 9, 4}, kDeep)) == 2);
  CHECK(divergence_level(a, mk({9, 9, 9, 9}, kDeep)) == 3);
  // Symmetric.
  CHECK(divergence_level(mk({9, 2, 9, 4}, kDeep), a) == 2);
}

TEST_CASE("same_gnode_above compares only the components above the given level") {
  Address a = mk({1, 2, 3, 4}, kDeep);
  Address b = mk({9, 9, 3, 4}, kDeep);  // diverges at level 1

  CHECK(a.same_gnode_above(b, 1));
  CHECK(a.same_gnode_above(b, 2));
  CHECK_FALSE(a.same_gnode_above(b, 0));
  CHECK_FALSE(a.same_gnode_above(b, -1));
  // level -1 means full equality.
  CHECK(a.same_gnode_above(a, -1));

  // Consistency with divergence_level: the two addresses share the gnode
  // above `k` exactly when they do not diverge above it.
  for (int k = -1; k < 4; ++k) {
    auto div = divergence_level(a, b);
    CHECK(a.same_gnode_above(b, k) == (!div || *div <= k));
  }
}

TEST_CASE("map entry capacity is levels times group size") {
  CHECK(TopologyParams{4, 256}.max_map_entries() == 1024);
  CHECK(TopologyParams{3, 4}.max_map_entries() == 12);
  CHECK(TopologyParams{1, 16}.max_map_entries() == 16);
  CHECK(TopologyParams{5, 4}.max_map_entries() == 20);
}
