#include "fmesh/maps.hpp"

#include <algorithm>
#include <sstream>

namespace fmesh {

NodeMaps::NodeMaps(Address owner, TopologyParams params, RemPolicy policy, int max_routes)
    : owner_(std::move(owner)),
      params_(params),
      policy_(policy),
      max_routes_(max_routes),
      targets_(static_cast<size_t>(params.levels)),
      bnodes_(static_cast<size_t>(params.levels)) {
  if (!params_.valid()) throw MapError("invalid topology params");
  if (owner_.levels() != params_.levels) throw MapError("owner depth mismatch");
  if (max_routes_ < 1) throw MapError("max_routes must be >= 1");
}

bool NodeMaps::route_less(const RouteEntry& a, const RouteEntry& b) const {
  if (rem_better(a.rem, b.rem, policy_)) return true;
  if (rem_better(b.rem, a.rem, policy_)) return false;
  return a.gateway < b.gateway;  // deterministic order among equals
}

void NodeMaps::sort_routes(TargetEntry& entry) const {
  std::stable_sort(entry.routes.begin(), entry.routes.end(),
                   [this](const RouteEntry& a, const RouteEntry& b) { return route_less(a, b); });
}

MapChange NodeMaps::classify_route(const LearnedRoute& route) const {
  if (route.level < 0 || route.level >= params_.levels)
    throw MapError("route level out of range");
  if (route.target_id < 0 || route.target_id >= params_.group_size)
    throw MapError("route target out of range");
  if (route.target_id == owner_.component(route.level))
    throw MapError("refusing route entry for the owner's own id at level " +
                   std::to_string(route.level));

  const auto& table = targets_[static_cast<size_t>(route.level)];
  auto it = table.find(route.target_id);

  if (!route.alive)
    return (it != table.end() && it->second.alive) || it == table.end() ? MapChange::Died
                                                                        : MapChange::None;

  if (route.gateway.empty()) throw MapError("live route without gateway");
  if (it == table.end()) return MapChange::NewTarget;

  const TargetEntry& entry = it->second;
  if (!entry.alive) return MapChange::Revived;

  const Rem previous_best = entry.routes.empty() ? Rem{} : entry.routes.front().rem;
  const bool had_routes = !entry.routes.empty();
  auto improved_or_changed = [&](const Rem& new_best) {
    if (had_routes && rem_better(new_best, previous_best, policy_)) return MapChange::Improved;
    return MapChange::Changed;
  };

  auto same_gw = std::find_if(entry.routes.begin(), entry.routes.end(),
                              [&](const RouteEntry& r) { return r.gateway == route.gateway; });
  if (same_gw != entry.routes.end()) {
    if (same_gw->rem == route.rem) return MapChange::None;
    if (!route.authoritative && !rem_better(route.rem, same_gw->rem, policy_))
      return MapChange::None;
    Rem new_best = route.rem;
    for (const RouteEntry& r : entry.routes)
      if (r.gateway != route.gateway && rem_better(r.rem, new_best, policy_)) new_best = r.rem;
    return improved_or_changed(new_best);
  }

  if (static_cast<int>(entry.routes.size()) >= max_routes_ &&
      !rem_better(route.rem, entry.routes.back().rem, policy_))
    return MapChange::None;
  Rem new_best = route.rem;
  if (had_routes && rem_better(previous_best, new_best, policy_)) new_best = previous_best;
  return improved_or_changed(new_best);
}

MapChange NodeMaps::update_route(const LearnedRoute& route) {
  const MapChange change = classify_route(route);
  auto& table = targets_[static_cast<size_t>(route.level)];

  switch (change) {
    case MapChange::None: {
      // Refresh timestamps on an identical same-gateway route.
      auto it = table.find(route.target_id);
      if (route.alive && it != table.end() && it->second.alive) {
        for (RouteEntry& r : it->second.routes) {
          if (r.gateway == route.gateway && r.rem == route.rem) {
            r.learned_at_us = route.now_us;
            r.via = route.via;
          }
        }
      }
      return change;
    }
    case MapChange::Died:
      kill_entity(route.level, route.target_id, route.now_us);
      return change;
    case MapChange::NewTarget: {
      TargetEntry entry;
      entry.alive = true;
      entry.routes.push_back(RouteEntry{route.gateway, route.rem, route.now_us, route.via});
      table.emplace(route.target_id, std::move(entry));
      return change;
    }
    case MapChange::Revived: {
      TargetEntry& entry = table[route.target_id];
      entry.alive = true;
      entry.died_at_us = -1;
      entry.routes.clear();
      entry.routes.push_back(RouteEntry{route.gateway, route.rem, route.now_us, route.via});
      return change;
    }
    case MapChange::Improved:
    case MapChange::Changed: {
      TargetEntry& entry = table[route.target_id];
      auto same_gw = std::find_if(entry.routes.begin(), entry.routes.end(),
                                  [&](const RouteEntry& r) { return r.gateway == route.gateway; });
      if (same_gw != entry.routes.end()) {
        same_gw->rem = route.rem;
        same_gw->learned_at_us = route.now_us;
        same_gw->via = route.via;
      } else if (static_cast<int>(entry.routes.size()) < max_routes_) {
        entry.routes.push_back(RouteEntry{route.gateway, route.rem, route.now_us, route.via});
      } else {
        entry.routes.back() = RouteEntry{route.gateway, route.rem, route.now_us, route.via};
      }
      sort_routes(entry);
      return change;
    }
  }
  return MapChange::None;
}

std::optional<Address> NodeMaps::best_gateway(const Address& dest) const {
  auto level = divergence_level(owner_, dest);
  if (!level) throw MapError("best_gateway queried for the owner itself");
  const auto& table = targets_[static_cast<size_t>(*level)];
  auto it = table.find(dest.component(*level));
  if (it == table.end() || !it->second.alive || it->second.routes.empty()) return std::nullopt;
  return it->second.routes.front().gateway;
}

std::optional<Rem> NodeMaps::best_rem(const Address& dest) const {
  auto level = divergence_level(owner_, dest);
  if (!level) return Rem::identity();
  return best_rem(*level, dest.component(*level));
}

std::optional<Rem> NodeMaps::best_rem(int level, int target_id) const {
  if (level < 0 || level >= params_.levels) throw MapError("level out of range");
  const auto& table = targets_[static_cast<size_t>(level)];
  auto it = table.find(target_id);
  if (it == table.end() || !it->second.alive || it->second.routes.empty()) return std::nullopt;
  return it->second.routes.front().rem;
}

bool NodeMaps::target_known(int level, int target_id) const {
  if (level < 0 || level >= params_.levels) return false;
  return targets_[static_cast<size_t>(level)].count(target_id) > 0;
}

bool NodeMaps::target_alive(int level, int target_id) const {
  if (level < 0 || level >= params_.levels) return false;
  const auto& table = targets_[static_cast<size_t>(level)];
  auto it = table.find(target_id);
  return it != table.end() && it->second.alive;
}

const std::map<int, TargetEntry>& NodeMaps::targets(int level) const {
  if (level < 0 || level >= params_.levels) throw MapError("level out of range");
  return targets_[static_cast<size_t>(level)];
}

NodeMaps::BnodeReport NodeMaps::record_bnode(int entity_level, int entity_id,
                                             const GnodeRef& borders_on, const Rem& rem) {
  if (entity_level < 0 || entity_level >= params_.levels)
    throw MapError("bnode entity level out of range");
  if (entity_id < 0 || entity_id >= params_.group_size)
    throw MapError("bnode entity id out of range");
  if (borders_on.level <= entity_level || borders_on.level > params_.levels)
    throw MapError("border level must be above the entity level");

  BnodeReport report;
  auto& table = bnodes_[static_cast<size_t>(entity_level)];
  auto [it, inserted] = table.try_emplace(entity_id);
  report.new_entity = inserted;
  auto [bit, border_inserted] = it->second.borders.insert_or_assign(borders_on, rem);
  (void)bit;
  report.new_border = border_inserted;
  return report;
}

const std::map<int, BnodeEntry>& NodeMaps::bnode_entities(int level) const {
  if (level < 0 || level >= params_.levels) throw MapError("level out of range");
  return bnodes_[static_cast<size_t>(level)];
}

bool NodeMaps::bnode_known(int entity_level, int entity_id) const {
  if (entity_level < 0 || entity_level >= params_.levels) return false;
  return bnodes_[static_cast<size_t>(entity_level)].count(entity_id) > 0;
}

std::vector<GnodeRef> NodeMaps::entities_bordering(const GnodeRef& border) const {
  std::vector<GnodeRef> out;
  for (int level = 0; level < params_.levels; ++level) {
    for (const auto& [id, entry] : bnodes_[static_cast<size_t>(level)]) {
      if (entry.borders.count(border)) out.push_back(GnodeRef{level, id});
    }
  }
  return out;
}

bool NodeMaps::remove_border(int entity_level, int entity_id, const GnodeRef& border) {
  if (entity_level < 0 || entity_level >= params_.levels) return false;
  auto& table = bnodes_[static_cast<size_t>(entity_level)];
  auto it = table.find(entity_id);
  if (it == table.end()) return false;
  bool erased = it->second.borders.erase(border) > 0;
  if (it->second.borders.empty()) table.erase(it);
  return erased;
}

NodeMaps::DeathReport NodeMaps::kill_entity(int level, int id, int64_t now_us) {
  if (level < 0 || level >= params_.levels) throw MapError("level out of range");
  DeathReport report;

  auto& table = targets_[static_cast<size_t>(level)];
  auto it = table.find(id);
  if (it != table.end() && it->second.alive) {
    report.was_alive = true;
    it->second.alive = false;
    it->second.died_at_us = now_us;
    it->second.routes.clear();
  } else if (it == table.end() && id != owner_.component(level)) {
    // Death of a target never heard of: tombstone it anyway so the fact is
    // remembered exactly once.
    TargetEntry entry;
    entry.alive = false;
    entry.died_at_us = now_us;
    table.emplace(id, std::move(entry));
    report.was_alive = true;
  }

  // The dead entity can no longer serve as a border: drop its records and
  // every route that depended on it.
  auto& bnode_table = bnodes_[static_cast<size_t>(level)];
  if (bnode_table.erase(id) > 0 || report.was_alive)
    drop_routes_via_entity(GnodeRef{level, id}, &report.affected_targets);
  return report;
}

int NodeMaps::drop_routes_via_gateway(const Address& gateway) {
  int removed = 0;
  for (auto& table : targets_) {
    for (auto& [id, entry] : table) {
      auto end = std::remove_if(entry.routes.begin(), entry.routes.end(),
                                [&](const RouteEntry& r) { return r.gateway == gateway; });
      removed += static_cast<int>(entry.routes.end() - end);
      entry.routes.erase(end, entry.routes.end());
    }
  }
  return removed;
}

int NodeMaps::drop_routes_via_entity(const GnodeRef& entity, std::vector<GnodeRef>* affected) {
  int removed = 0;
  for (int level = 0; level < params_.levels; ++level) {
    for (auto& [id, entry] : targets_[static_cast<size_t>(level)]) {
      auto end = std::remove_if(entry.routes.begin(), entry.routes.end(), [&](const RouteEntry& r) {
        return r.via && *r.via == entity;
      });
      int dropped = static_cast<int>(entry.routes.end() - end);
      if (dropped > 0 && affected) affected->push_back(GnodeRef{level, id});
      removed += dropped;
      entry.routes.erase(end, entry.routes.end());
    }
  }
  return removed;
}

int NodeMaps::drop_routes_to_target_if(int level, int target_id,
                                       const std::function<bool(const RouteEntry&)>& pred) {
  if (level < 0 || level >= params_.levels) throw MapError("level out of range");
  auto& table = targets_[static_cast<size_t>(level)];
  auto it = table.find(target_id);
  if (it == table.end()) return 0;
  auto& routes = it->second.routes;
  auto end = std::remove_if(routes.begin(), routes.end(), pred);
  int removed = static_cast<int>(routes.end() - end);
  routes.erase(end, routes.end());
  return removed;
}

void NodeMaps::purge_tombstones(int64_t now_us, int64_t keep_us) {
  for (auto& table : targets_) {
    for (auto it = table.begin(); it != table.end();) {
      if (!it->second.alive && it->second.died_at_us >= 0 &&
          now_us - it->second.died_at_us > keep_us) {
        it = table.erase(it);
      } else {
        ++it;
      }
    }
  }
}

std::vector<int> NodeMaps::free_node_ids() const {
  std::vector<int> out;
  const auto& internal = targets_[0];
  for (int id = 0; id < params_.group_size; ++id) {
    if (id == owner_.component(0)) continue;
    auto it = internal.find(id);
    if (it != internal.end() && it->second.alive) continue;
    out.push_back(id);
  }
  return out;
}

long long NodeMaps::route_target_count() const {
  long long total = 0;
  for (const auto& table : targets_) total += static_cast<long long>(table.size());
  return total;
}

bool NodeMaps::level_empty(int level) const {
  if (level < 0 || level >= params_.levels) return true;
  return targets_[static_cast<size_t>(level)].empty();
}

std::vector<std::string> NodeMaps::dump_lines() const {
  std::vector<std::string> lines;
  const std::string owner_text = owner_.str();
  for (int level = 0; level < params_.levels; ++level) {
    for (const auto& [id, entry] : targets_[static_cast<size_t>(level)]) {
      if (!entry.alive) {
        std::ostringstream line;
        line << owner_text << " L" << level << " target=" << id
             << " gw=- rtt=0 bw=0 alive=0";
        lines.push_back(line.str());
        continue;
      }
      for (const RouteEntry& route : entry.routes) {
        std::ostringstream line;
        line << owner_text << " L" << level << " target=" << id << " gw=" << route.gateway.str()
             << " rtt=" << format_number(route.rem.total_rtt_ms)
             << " bw=" << format_number(route.rem.bottleneck_bw) << " alive=1";
        lines.push_back(line.str());
      }
    }
  }
  return lines;
}

}  // namespace fmesh
