#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmesh/addressing.hpp"
#include "fmesh/rem.hpp"

namespace fmesh {

class MapError : public std::runtime_error {
 public:
  explicit MapError(const std::string& what) : std::runtime_error(what) {}
};

// (level, gnode id) pair naming a gnode somewhere in the hierarchy.
struct GnodeRef {
  int level = 0;
  int id = 0;
  auto operator<=>(const GnodeRef&) const = default;
};

// One stored route towards a target: the neighbouring gateway to hand the
// packet to, the measured quality, and (for routes learned through a locked
// flood) the border entity the route depends on.
struct RouteEntry {
  Address gateway;
  Rem rem;
  int64_t learned_at_us = 0;
  std::optional<GnodeRef> via;  // supporting border entity, if any
};

struct TargetEntry {
  bool alive = true;
  int64_t died_at_us = -1;
  std::vector<RouteEntry> routes;  // sorted best first
};

// Input to update_route.
struct LearnedRoute {
  int level = 0;
  int target_id = 0;
  Address gateway;
  Rem rem;
  bool alive = true;
  int64_t now_us = 0;
  std::optional<GnodeRef> via;
  // True when the fact comes from the target itself announcing its own link
  // (the sender's final hop). Only such first-hand facts may worsen a stored
  // route through the same gateway; relayed values can be stale.
  bool authoritative = false;
};

enum class MapChange { None, NewTarget, Improved, Changed, Died, Revived };

// Border records for one entity (a member node at level 0 or a contained
// gnode at higher levels) that is known to border foreign gnodes.
struct BnodeEntry {
  std::map<GnodeRef, Rem> borders;
};

// Everything one node knows: per-level route tables (level 0 is the internal
// map of its own gnode, levels >= 1 the external maps) plus the border-node
// map. Per level at most group_size distinct targets can exist, which keeps
// the whole structure within levels*group_size entries regardless of network
// size - the point of the hierarchical scheme.
class NodeMaps {
 public:
  NodeMaps() = default;
  NodeMaps(Address owner, TopologyParams params, RemPolicy policy, int max_routes = 3);

  const Address& owner() const { return owner_; }
  const TopologyParams& params() const { return params_; }
  const RemPolicy& policy() const { return policy_; }
  int max_routes() const { return max_routes_; }

  // Applies one learned route (or death when !alive) and reports what, if
  // anything, the update changed. Throws MapError for targets equal to the
  // owner's own id at that level: the external map never stores the own gnode.
  MapChange update_route(const LearnedRoute& route);

  // What update_route would report, without mutating anything. update_route
  // is implemented on top of this, so the interest rule and the actual update
  // can never disagree.
  MapChange classify_route(const LearnedRoute& route) const;

  // Gateway of the best live route towards dest, resolved at the divergence
  // level (internal map for members of the own gnode, external map above).
  // Throws MapError when dest == owner; nullopt when no live route exists.
  std::optional<Address> best_gateway(const Address& dest) const;
  std::optional<Rem> best_rem(const Address& dest) const;
  std::optional<Rem> best_rem(int level, int target_id) const;

  bool target_known(int level, int target_id) const;
  bool target_alive(int level, int target_id) const;
  const std::map<int, TargetEntry>& targets(int level) const;

  // Border-node records. Reports novelty so the interest rule can tell a new
  // bnode or a new border from a plain refresh (refreshes update the stored
  // REM silently).
  struct BnodeReport {
    bool new_entity = false;
    bool new_border = false;
  };
  BnodeReport record_bnode(int entity_level, int entity_id, const GnodeRef& borders_on,
                           const Rem& rem);
  const std::map<int, BnodeEntry>& bnode_entities(int level) const;
  bool bnode_known(int entity_level, int entity_id) const;
  // Entities (at any level) recorded as bordering `border`.
  std::vector<GnodeRef> entities_bordering(const GnodeRef& border) const;
  // Removes one border record; true when the record existed.
  bool remove_border(int entity_level, int entity_id, const GnodeRef& border);

  // Death of a node (level 0) or gnode (level >= 1): tombstones the target,
  // purges its routes, removes its border records and drops every route that
  // depended on it. Lists the targets whose route set was affected.
  struct DeathReport {
    bool was_alive = false;
    std::vector<GnodeRef> affected_targets;
  };
  DeathReport kill_entity(int level, int id, int64_t now_us);

  // Drop all routes through a gateway that stopped being an rnode; returns
  // the number of removed entries.
  int drop_routes_via_gateway(const Address& gateway);
  // Drop all routes that depended on a given border entity.
  int drop_routes_via_entity(const GnodeRef& entity, std::vector<GnodeRef>* affected = nullptr);
  // Drop routes to one target matching a predicate; returns the removed count.
  int drop_routes_to_target_if(int level, int target_id,
                               const std::function<bool(const RouteEntry&)>& pred);

  // Purge tombstones older than keep_us.
  void purge_tombstones(int64_t now_us, int64_t keep_us);

  // Free member ids of the own gnode: ids in [0, group_size) that are not the
  // owner and have no live internal entry. Empty result = gnode full.
  std::vector<int> free_node_ids() const;

  // Total number of distinct route targets across all levels (tombstones
  // included); bounded by levels * group_size.
  long long route_target_count() const;
  bool level_empty(int level) const;

  // One line per route entry (and per dead target), dump-maps format.
  std::vector<std::string> dump_lines() const;

 private:
  void sort_routes(TargetEntry& entry) const;
  bool route_less(const RouteEntry& a, const RouteEntry& b) const;

  Address owner_;
  TopologyParams params_;
  RemPolicy policy_;
  int max_routes_ = 3;
  std::vector<std::map<int, TargetEntry>> targets_;  // [level][id]
  std::vector<std::map<int, BnodeEntry>> bnodes_;    // [entity level][entity id]
};

}  // namespace fmesh
