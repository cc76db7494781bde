#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fmesh {

// Shape of the hierarchy: `levels` significant levels with up to `group_size`
// members per gnode. The implicit top level (the whole network, id 0) is never
// stored. The default profile gives group_size^levels = 256^4 = 2^32 addresses.
struct TopologyParams {
  int levels = 4;
  int group_size = 256;

  bool valid() const { return levels >= 1 && group_size >= 2; }
  // Total address space, as a double (can exceed 2^63 for large profiles).
  double address_space() const;
  // Per-node map entry bound: at most group_size targets per level.
  long long max_map_entries() const {
    return static_cast<long long>(levels) * group_size;
  }
  friend bool operator==(const TopologyParams&, const TopologyParams&) = default;
};

class AddressError : public std::runtime_error {
 public:
  explicit AddressError(const std::string& what) : std::runtime_error(what) {}
};

// A node identity: one gnode id per level. Components are stored level 0
// first; the textual form is highest level first, dot separated, so with 4
// levels "3.41.5.12" has g3=3, g2=41, g1=5, g0=12.
class Address {
 public:
  Address() = default;
  // components are level 0 first; validated against params.
  Address(std::vector<int> components, const TopologyParams& params);

  int levels() const { return static_cast<int>(comps_.size()); }
  // Gnode id of this address at `level` (level 0 = the node id itself).
  int component(int level) const;
  const std::vector<int>& components() const { return comps_; }

  bool empty() const { return comps_.empty(); }
  std::string str() const;

  // True when both addresses lie in the same gnode of level `level+1`,
  // i.e. all components strictly above `level` match.
  bool same_gnode_above(const Address& other, int level) const;

  // Copy with all components below `level` set to 0 (the gnode identity).
  Address gnode_prefix(int level) const;

  friend bool operator==(const Address&, const Address&) = default;
  // Orders by highest level first, matching the textual form.
  std::strong_ordering operator<=>(const Address& other) const;

 private:
  std::vector<int> comps_;  // level 0 first
};

// Parse "g_{n-1}.….g1.g0" against params; throws AddressError on malformed
// text, wrong component count or out-of-range components.
Address parse_address(std::string_view text, const TopologyParams& params);
std::string format_address(const Address& addr);

// Gnode id of `addr` at `level`; throws AddressError if out of range.
int gnode_id_at(const Address& addr, int level, const TopologyParams& params);

// Highest level whose components differ, or nullopt for identical addresses.
// Two nodes in the same gnode of level l+1 but different gnodes of level l
// diverge at l; querying a route to a destination uses exactly this level.
std::optional<int> divergence_level(const Address& a, const Address& b);

}  // namespace fmesh
