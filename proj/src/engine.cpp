#include "fmesh/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>

namespace fmesh {

namespace {

std::string parse_error(const std::string& what) { return "control payload: " + what; }

double parse_number(const std::string& text) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  size_t used = 0;
  double value = std::stod(text, &used);
  if (used != text.size()) throw EngineError(parse_error("bad number '" + text + "'"));
  return value;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, sep)) out.push_back(token);
  return out;
}

Hop regular_hop(int id, int level, const Rem& link_rem, bool dead = false) {
  Hop hop;
  hop.id = id;
  hop.level = level;
  hop.link_rem = link_rem;
  hop.dead = dead;
  return hop;
}

}  // namespace

void EngineOutput::merge(EngineOutput&& other) {
  for (auto& m : other.msgs) msgs.push_back(std::move(m));
  for (auto& c : other.ctrl) ctrl.push_back(std::move(c));
  for (auto& t : other.timers) timers.push_back(t);
  for (auto& n : other.notes) notes.push_back(std::move(n));
}

NodeEngine::NodeEngine(const Address& addr, const EngineConfig& config)
    : config_(config), mode_(NodeMode::Active), addr_(addr) {
  if (!config_.params.valid()) throw EngineError("invalid topology parameters");
  if (addr.levels() != config_.params.levels) throw EngineError("address depth mismatch");
  maps_.emplace(addr, config_.params, config_.policy, config_.max_routes);
  explored_.assign(static_cast<size_t>(config_.params.levels), false);
  ctp_queue_.resize(static_cast<size_t>(config_.params.levels));
}

NodeEngine::NodeEngine(std::string boot_label, const EngineConfig& config)
    : config_(config), mode_(NodeMode::Hooking), boot_label_(std::move(boot_label)) {
  if (!config_.params.valid()) throw EngineError("invalid topology parameters");
  if (boot_label_.empty()) throw EngineError("empty bootstrap label");
  explored_.assign(static_cast<size_t>(config_.params.levels), false);
  ctp_queue_.resize(static_cast<size_t>(config_.params.levels));
}

std::string NodeEngine::label() const { return addr_ ? addr_->str() : boot_label_; }

const NodeMaps& NodeEngine::maps() const {
  if (!maps_) throw EngineError("node has no maps yet (still hooking)");
  return *maps_;
}

NodeMaps& NodeEngine::maps() {
  if (!maps_) throw EngineError("node has no maps yet (still hooking)");
  return *maps_;
}

bool NodeEngine::explored(int level) const {
  if (level < 0 || level >= config_.params.levels) throw EngineError("level out of range");
  return explored_[static_cast<size_t>(level)];
}

int NodeEngine::queued_packet_count(int level) const {
  if (level < 0 || level >= config_.params.levels) throw EngineError("level out of range");
  return static_cast<int>(ctp_queue_[static_cast<size_t>(level)].size());
}

void NodeEngine::seed_rnode(const Address& neighbor, const LinkQuality& quality) {
  if (mode_ != NodeMode::Active || !maps_) throw EngineError("can only seed an active node");
  rnodes_[neighbor] = quality;
  last_announced_[neighbor] = quality;
  const auto div = divergence_level(self(), neighbor);
  if (!div) throw EngineError("cannot seed a link to self");
  if (*div >= 1)
    maps_->record_bnode(0, own_component(0), GnodeRef{*div, neighbor.component(*div)},
                        Rem::from_link(quality));
}

void NodeEngine::seed_explored(int level) {
  if (level < 0 || level >= config_.params.levels) throw EngineError("level out of range");
  explored_[static_cast<size_t>(level)] = true;
}

const Address& NodeEngine::self() const {
  if (!addr_) throw EngineError("node has no address yet");
  return *addr_;
}

int NodeEngine::own_component(int level) const { return self().component(level); }

std::optional<Rem> NodeEngine::resolve_rem(const Address& dest) const {
  if (dest == self()) return Rem::identity();
  if (maps_) {
    if (auto rem = maps_->best_rem(dest)) return rem;
  }
  auto it = rnodes_.find(dest);
  if (it != rnodes_.end()) return Rem::from_link(it->second);
  return std::nullopt;
}

// Exploration-order gate: a level-k packet may only move once every level
// below k was explored or is vacuous for this node (no neighbour diverging
// there and nothing on record).
bool NodeEngine::gate_open(int level) const {
  for (int j = 0; j < level; ++j) {
    if (explored_[static_cast<size_t>(j)]) continue;
    if (!level_vacuous(j)) return false;
  }
  return true;
}

bool NodeEngine::level_vacuous(int level) const {
  for (const auto& [addr, q] : rnodes_) {
    const auto div = divergence_level(self(), addr);
    if (div && *div == level) return false;
  }
  if (!maps_) return true;
  if (!maps_->level_empty(level)) return false;
  // Border records about other entities imply siblings whose floods will
  // arrive at this level. Records about the own entity are radar-derived and
  // say nothing about pending exploration, so they must not hold the gate.
  for (const auto& [id, entry] : maps_->bnode_entities(level))
    if (id != own_component(level)) return false;
  return true;
}

// --- Pending-change machinery ----------------------------------------------

void NodeEngine::arm_pending(PendingChange change, int64_t now_us, EngineOutput& out) {
  if (pending_keys_.count(change.key)) return;
  pending_keys_.insert(change.key);
  const int token = next_token_++;
  pending_changes_[token] = std::move(change);
  out.timers.push_back(TimerRequest{now_us + config_.pending_delay_us, token});
}

EngineOutput NodeEngine::on_timer(int token, int64_t now_us) {
  EngineOutput out;
  auto it = pending_changes_.find(token);
  if (it == pending_changes_.end()) return out;
  PendingChange change = std::move(it->second);
  pending_changes_.erase(it);
  pending_keys_.erase(change.key);
  if (mode_ == NodeMode::Dead || mode_ == NodeMode::Failed) return out;
  out.merge(confirm_pending(change, now_us));
  drain_ready(now_us, out);
  return out;
}

EngineOutput NodeEngine::confirm_pending(const PendingChange& change, int64_t now_us) {
  EngineOutput out;
  switch (change.kind) {
    case PendingChange::Kind::NewRnode: {
      auto it = rnodes_.find(change.peer);
      if (it == rnodes_.end()) break;  // flapped away before confirmation
      last_announced_[change.peer] = it->second;
      const auto div = divergence_level(self(), change.peer);
      if (div && *div >= 1)
        maps_->record_bnode(0, own_component(0), GnodeRef{*div, change.peer.component(*div)},
                            Rem::from_link(it->second));
      out.merge(on_node_join_neighbor(change.peer, now_us));
      break;
    }
    case PendingChange::Kind::LostRnode: {
      if (rnodes_.count(change.peer)) break;  // came back
      last_announced_.erase(change.peer);
      if (maps_->drop_routes_via_gateway(change.peer) > 0) ++mutation_count_;
      const auto div = divergence_level(self(), change.peer);
      if (!div) break;
      if (*div == 0) {
        out.merge(on_node_death(change.peer, now_us));
      } else {
        const GnodeRef border{*div, change.peer.component(*div)};
        bool still_bordering = false;
        for (const auto& [addr, q] : rnodes_) {
          const auto d = divergence_level(self(), addr);
          if (d && *d == border.level && addr.component(border.level) == border.id) {
            still_bordering = true;
            break;
          }
        }
        if (!still_bordering) out.merge(on_border_loss(border, now_us));
      }
      break;
    }
    case PendingChange::Kind::QualityShift: {
      auto it = rnodes_.find(change.peer);
      if (it == rnodes_.end()) break;
      auto last = last_announced_.find(change.peer);
      const auto div = divergence_level(self(), change.peer);
      if (!div) break;
      if (last != last_announced_.end() &&
          !delta_exceeds(Rem::from_link(last->second), Rem::from_link(it->second), *div,
                         config_.policy))
        break;  // drifted back below the threshold
      last_announced_[change.peer] = it->second;
      if (*div >= 1) {
        maps_->record_bnode(0, own_component(0), GnodeRef{*div, change.peer.component(*div)},
                            Rem::from_link(it->second));
        ++mutation_count_;
      }
      // The peer measures the new link quality itself on ingress; a directed
      // packet is enough to make it re-announce inward if that is news.
      send_directed(*div, change.peer, now_us, out);
      break;
    }
    case PendingChange::Kind::BorderRemShift: {
      const auto base = maps_->best_rem(change.entity.level, change.entity.id);
      if (!base) break;
      const auto& entities = maps_->bnode_entities(change.entity.level);
      auto ent = entities.find(change.entity.id);
      if (ent == entities.end()) break;
      auto border_it = ent->second.borders.find(change.border);
      if (border_it == ent->second.borders.end()) break;
      const Rem transit = rem_compose(*base, border_it->second);
      auto baseline = transit_baselines_.find({change.entity, change.border});
      if (baseline == transit_baselines_.end()) break;
      if (!delta_exceeds(baseline->second, transit, change.border.level, config_.policy)) break;
      baseline->second = transit;
      bool has_external = false;
      for (const auto& [addr, q] : rnodes_) {
        const auto d = divergence_level(self(), addr);
        if (d && *d == change.border.level) {
          has_external = true;
          break;
        }
      }
      if (!has_external) break;
      // Two hops: the gnode beyond the border, then the own gnode carrying
      // the refreshed transit measure, so receivers re-price routes that run
      // through this gnode.
      std::vector<Hop> hops{regular_hop(change.border.id, change.border.level, Rem::identity())};
      originate(change.border.level, std::move(hops), false, true, transit, now_us, out);
      break;
    }
    case PendingChange::Kind::BorderLossEscalation: {
      if (!maps_->entities_bordering(change.border).empty()) break;
      bool has_external = false;
      for (const auto& [addr, q] : rnodes_) {
        const auto d = divergence_level(self(), addr);
        if (d && *d == change.border.level) {
          has_external = true;
          break;
        }
      }
      if (!has_external) break;
      std::vector<Hop> hops{Hop{.id = 0,
                                .level = change.border.level,
                                .link_rem = Rem::identity(),
                                .dead = false,
                                .lost_border = true,
                                .bnode_addr = self(),
                                .border = change.border}};
      originate(change.border.level, std::move(hops), false, true, Rem::identity(), now_us, out);
      break;
    }
    case PendingChange::Kind::HookTimeout: {
      if (mode_ != NodeMode::Hooking) break;
      if (change.hook_seq != hook_seq_) break;  // that exchange completed
      ++hook_index_;
      hook_try_candidate(now_us, out);
      break;
    }
  }
  return out;
}

// --- Radar -----------------------------------------------------------------

EngineOutput NodeEngine::on_radar_reply(const Address& neighbor, const LinkQuality& quality,
                                        int64_t /*now_us*/) {
  EngineOutput out;
  if (mode_ == NodeMode::Dead || mode_ == NodeMode::Failed) return out;
  round_[neighbor] = quality;
  round_active_ = true;
  return out;
}

EngineOutput NodeEngine::finish_radar_round(int64_t now_us) {
  EngineOutput out;
  std::map<Address, LinkQuality> snapshot = std::move(round_);
  round_.clear();
  round_active_ = false;
  if (mode_ == NodeMode::Dead || mode_ == NodeMode::Failed) return out;
  if (mode_ == NodeMode::Hooking) return handle_hook_radar(snapshot, now_us);

  for (const auto& [neighbor, quality] : snapshot) {
    auto it = rnodes_.find(neighbor);
    if (it == rnodes_.end()) {
      rnodes_[neighbor] = quality;
      ++mutation_count_;
      const auto div = divergence_level(self(), neighbor);
      if (!div) continue;
      if (*div >= 1) {
        maps_->record_bnode(0, own_component(0), GnodeRef{*div, neighbor.component(*div)},
                            Rem::from_link(quality));
      }
      arm_pending(PendingChange{PendingChange::Kind::NewRnode, neighbor, GnodeRef{}, GnodeRef{},
                                "new:" + neighbor.str(), 0},
                  now_us, out);
    } else if (!(it->second == quality)) {
      it->second = quality;
      ++mutation_count_;
      const auto div = divergence_level(self(), neighbor);
      auto last = last_announced_.find(neighbor);
      if (div && last != last_announced_.end() &&
          delta_exceeds(Rem::from_link(last->second), Rem::from_link(quality), *div,
                        config_.policy)) {
        arm_pending(PendingChange{PendingChange::Kind::QualityShift, neighbor, GnodeRef{},
                                  GnodeRef{}, "quality:" + neighbor.str(), 0},
                    now_us, out);
      }
    }
  }
  std::vector<Address> lost;
  for (const auto& [neighbor, quality] : rnodes_)
    if (!snapshot.count(neighbor)) lost.push_back(neighbor);
  for (const Address& neighbor : lost) {
    rnodes_.erase(neighbor);
    ++mutation_count_;
    arm_pending(PendingChange{PendingChange::Kind::LostRnode, neighbor, GnodeRef{}, GnodeRef{},
                              "lost:" + neighbor.str(), 0},
                now_us, out);
  }
  rule6_scan(now_us, out);
  drain_ready(now_us, out);
  return out;
}

// --- Packet handling -------------------------------------------------------

EngineOutput NodeEngine::on_receive(const Address& from, const TracerPacket& pkt, int64_t now_us) {
  EngineOutput out = process_packet(from, pkt, now_us);
  drain_ready(now_us, out);
  return out;
}

EngineOutput NodeEngine::process_packet(const Address& from, const TracerPacket& pkt,
                                        int64_t now_us) {
  EngineOutput out;
  if (mode_ != NodeMode::Active) {
    out.notes.push_back(EngineNote{"drop-stray", "not active"});
    return out;
  }
  if (pkt.level < 0 || pkt.level >= config_.params.levels) {
    out.notes.push_back(EngineNote{"drop-stray", "level out of range"});
    return out;
  }
  if (!rnodes_.count(from)) {
    out.notes.push_back(EngineNote{"drop-stray", "sender is not an rnode"});
    return out;
  }
  if (pkt.level == 0) return on_receive_level0(from, pkt, now_us);
  if (pkt.kind == PacketKind::Ctp) return on_receive_ctp_high(from, pkt, now_us);
  return on_receive_ltp(from, pkt, now_us);
}

EngineOutput NodeEngine::on_receive_level0(const Address& from, const TracerPacket& pkt,
                                           int64_t now_us) {
  EngineOutput out;
  const auto div = divergence_level(self(), from);
  if (!div || *div != 0) {
    out.notes.push_back(EngineNote{"drop-stray", "level-0 packet across a border"});
    return out;
  }
  if (config_.loop_check && has_traversed(pkt, own_component(0))) {
    out.notes.push_back(EngineNote{"drop-loop", dedup_key(pkt)});
    return out;
  }
  const Rem ingress = Rem::from_link(rnodes_.at(from));
  const bool interesting = is_interesting(pkt, *maps_, from, ingress, &rnodes_);
  const PacketFacts facts = extract_facts(pkt, *maps_, from, ingress, &rnodes_);
  apply_facts(facts, now_us, out);
  const std::string key = dedup_key(pkt);
  const bool refresh_pass = pkt.refresh && !seen_keys_.count(key);
  if (!interesting && !refresh_pass) {
    out.notes.push_back(EngineNote{seen_keys_.count(key) ? "drop-dup" : "drop-boring", key});
    return out;
  }
  if (config_.loop_check) {
    // One forward per key, even when later copies still look interesting;
    // copies of one flood differing only in measured REM count as duplicates.
    if (seen_keys_.count(key)) {
      out.notes.push_back(EngineNote{"drop-dup", key});
      return out;
    }
    seen_keys_.insert(key);
  }
  TracerPacket fwd = pkt;
  append_hop(fwd, regular_hop(own_component(0), 0, ingress), !config_.loop_check);
  explored_[0] = true;
  for (const auto& [neighbor, quality] : rnodes_) {
    if (neighbor == from) continue;
    const auto d = divergence_level(self(), neighbor);
    if (!d || *d != 0) continue;  // never across the border at level 0
    if (config_.loop_check && has_traversed(pkt, neighbor.component(0))) continue;
    out.msgs.push_back(OutgoingMessage{neighbor, fwd, now_us, true});
  }
  return out;
}

EngineOutput NodeEngine::on_receive_ctp_high(const Address& from, const TracerPacket& pkt,
                                             int64_t now_us) {
  EngineOutput out;
  const auto div = divergence_level(self(), from);
  if (!div || *div != pkt.level) {
    out.notes.push_back(EngineNote{"drop-stray", "unlocked packet from a non-matching border"});
    return out;
  }
  if (!gate_open(pkt.level)) {
    ctp_queue_[static_cast<size_t>(pkt.level)].emplace_back(from, pkt);
    char buf[32];
    std::snprintf(buf, sizeof buf, "L%d", pkt.level);
    out.notes.push_back(EngineNote{"queue", buf});
    return out;
  }
  if (config_.loop_check && has_traversed(pkt, own_component(pkt.level))) {
    out.notes.push_back(EngineNote{"drop-loop", dedup_key(pkt)});
    return out;
  }
  const Rem ingress = Rem::from_link(rnodes_.at(from));
  const bool interesting = is_interesting(pkt, *maps_, from, ingress, &rnodes_);
  const PacketFacts facts = extract_facts(pkt, *maps_, from, ingress, &rnodes_);
  apply_facts(facts, now_us, out);
  const std::string key = dedup_key(pkt);
  const bool refresh_pass = pkt.refresh && !seen_keys_.count(key);
  if (!interesting && !refresh_pass) {
    out.notes.push_back(EngineNote{seen_keys_.count(key) ? "drop-dup" : "drop-boring", key});
    return out;
  }
  if (config_.loop_check) {
    if (seen_keys_.count(key)) {
      out.notes.push_back(EngineNote{"drop-dup", key});
      return out;
    }
    seen_keys_.insert(key);
  }
  const TracerPacket ltp = lock(pkt, self(), ingress);
  flood_interior_and_egress(ltp, std::nullopt, now_us, out);

  // Dead-end check: when every exit of this gnode at the packet's level is
  // already traversed, reflect a fresh packet back so the wander can retrace.
  if (config_.loop_check) {
    bool exit_left = false;
    for (const auto& [neighbor, quality] : rnodes_) {
      const auto d = divergence_level(self(), neighbor);
      if (d && *d == pkt.level && !has_traversed(pkt, neighbor.component(pkt.level))) {
        exit_left = true;
        break;
      }
    }
    if (!exit_left) {
      for (int j = 0; j < config_.params.levels && !exit_left; ++j) {
        for (const auto& [id, entry] : maps_->bnode_entities(j)) {
          for (const auto& [border, rem] : entry.borders) {
            if (border.level == pkt.level && !has_traversed(pkt, border.id)) {
              exit_left = true;
              break;
            }
          }
          if (exit_left) break;
        }
      }
    }
    if (!exit_left) {
      TracerPacket bounce = make_ctp(pkt.level);
      append_hop(bounce, regular_hop(own_component(pkt.level), pkt.level, Rem::identity()));
      out.msgs.push_back(OutgoingMessage{from, bounce, now_us, false});
      explored_[static_cast<size_t>(pkt.level)] = true;
    }
  }
  return out;
}

EngineOutput NodeEngine::on_receive_ltp(const Address& from, const TracerPacket& pkt,
                                        int64_t now_us) {
  EngineOutput out;
  const auto div = divergence_level(self(), from);
  if (!div || *div >= pkt.level) {
    out.notes.push_back(EngineNote{"drop-stray", "locked packet from outside the gnode"});
    return out;
  }
  if (!pkt.lock_ip) {
    out.notes.push_back(EngineNote{"drop-stray", "locked packet without a lock address"});
    return out;
  }
  if (*pkt.lock_ip == self()) {
    out.notes.push_back(EngineNote{"drop-loop", "own flood returned"});
    return out;
  }
  if (!gate_open(pkt.level)) {
    ctp_queue_[static_cast<size_t>(pkt.level)].emplace_back(from, pkt);
    char buf[32];
    std::snprintf(buf, sizeof buf, "L%d", pkt.level);
    out.notes.push_back(EngineNote{"queue", buf});
    return out;
  }
  if (config_.loop_check && has_traversed(pkt, own_component(pkt.level))) {
    out.notes.push_back(EngineNote{"drop-loop", dedup_key(pkt)});
    return out;
  }
  const Rem ingress = Rem::from_link(rnodes_.at(from));
  const bool interesting = is_interesting(pkt, *maps_, from, ingress, &rnodes_);
  const PacketFacts facts = extract_facts(pkt, *maps_, from, ingress, &rnodes_);
  apply_facts(facts, now_us, out);
  const std::string key = dedup_key(pkt);
  const bool refresh_pass = pkt.refresh && !seen_keys_.count(key);
  if (!interesting && !refresh_pass) {
    out.notes.push_back(EngineNote{seen_keys_.count(key) ? "drop-dup" : "drop-boring", key});
    return out;
  }
  if (config_.loop_check) {
    if (seen_keys_.count(key)) {
      out.notes.push_back(EngineNote{"drop-dup", key});
      return out;
    }
    seen_keys_.insert(key);
  }
  flood_interior_and_egress(pkt, from, now_us, out);
  return out;
}

// Relay a locked flood to the gnode interior and unlock it towards every
// external gnode not yet traversed.
void NodeEngine::flood_interior_and_egress(const TracerPacket& ltp,
                                           const std::optional<Address>& skip, int64_t now_us,
                                           EngineOutput& out) {
  explored_[static_cast<size_t>(ltp.level)] = true;
  for (const auto& [neighbor, quality] : rnodes_) {
    if (skip && neighbor == *skip) continue;
    const auto d = divergence_level(self(), neighbor);
    if (d && *d < ltp.level) out.msgs.push_back(OutgoingMessage{neighbor, ltp, now_us, true});
  }
  const auto rem_to_lock = resolve_rem(*ltp.lock_ip);
  if (!rem_to_lock) return;  // cannot price the crossing yet; no egress
  const Rem across = rem_compose(*rem_to_lock, ltp.lock_ingress_rem);
  std::optional<TracerPacket> unlocked;
  for (const auto& [neighbor, quality] : rnodes_) {
    const auto d = divergence_level(self(), neighbor);
    if (!d || *d != ltp.level) continue;
    if (config_.loop_check && has_traversed(ltp, neighbor.component(ltp.level))) continue;
    if (!unlocked) {
      unlocked = unlock(ltp, own_component(ltp.level), across, !config_.loop_check,
                        !config_.loop_check);
      if (config_.loop_check) {
        // Copies of one flood that entered the gnode through different borders
        // carry different locks, so the ingress filter passes both; after the
        // unlock they converge to one packet, and only the first may leave.
        const std::string egress_key = dedup_key(*unlocked);
        if (seen_keys_.count(egress_key)) return;
        seen_keys_.insert(egress_key);
      }
    }
    out.msgs.push_back(OutgoingMessage{neighbor, *unlocked, now_us, true});
  }
}

// --- Learning --------------------------------------------------------------

bool NodeEngine::apply_facts(const PacketFacts& facts, int64_t now_us, EngineOutput& out) {
  bool changed = false;
  for (const DeathFact& death : facts.deaths) {
    const bool relevant = maps_->target_alive(death.level, death.id) ||
                          !maps_->target_known(death.level, death.id) ||
                          maps_->bnode_known(death.level, death.id);
    if (!relevant) continue;
    maps_->kill_entity(death.level, death.id, now_us);
    changed = true;
  }
  for (const LostBorderFact& lost : facts.lost_borders) {
    const auto div = divergence_level(self(), lost.bnode_addr);
    if (!div) continue;
    if (*div < lost.border.level) {
      // Inside the gnode that lost the border: clear the record at the own
      // granularity and every route that exited through the loser.
      const int entity_id = lost.bnode_addr.component(*div);
      if (maps_->remove_border(*div, entity_id, lost.border)) changed = true;
      if (lost.border.id != own_component(lost.border.level)) {
        const int dropped = maps_->drop_routes_to_target_if(
            lost.border.level, lost.border.id, [&](const RouteEntry& route) {
              if (route.via && *route.via == GnodeRef{*div, entity_id}) return true;
              return route.gateway.same_gnode_above(lost.bnode_addr, *div - 1);
            });
        if (dropped > 0) changed = true;
      }
      escalation_check(lost.border, now_us, out);
    } else {
      // Outside: routes to the lost gnode that exit through the announcer's
      // gnode are gone.
      if (lost.border.id == own_component(lost.border.level)) continue;
      if (!maps_->target_known(lost.border.level, lost.border.id)) continue;
      const int dropped = maps_->drop_routes_to_target_if(
          lost.border.level, lost.border.id, [&](const RouteEntry& route) {
            return route.gateway.same_gnode_above(lost.bnode_addr, *div - 1);
          });
      if (dropped > 0) changed = true;
    }
  }
  for (const BnodeFact& fact : facts.bnodes) {
    std::optional<Rem> before;
    const auto& entities = maps_->bnode_entities(fact.entity_level);
    auto ent = entities.find(fact.entity_id);
    if (ent != entities.end()) {
      auto border_it = ent->second.borders.find(fact.borders_on);
      if (border_it != ent->second.borders.end()) before = border_it->second;
    }
    const auto report =
        maps_->record_bnode(fact.entity_level, fact.entity_id, fact.borders_on, fact.rem);
    if (report.new_entity || report.new_border || (before && !(*before == fact.rem)))
      changed = true;
  }
  if (facts.base_known) {
    for (const RouteFact& fact : facts.routes) {
      const MapChange change = maps_->update_route(LearnedRoute{
          fact.level, fact.target_id, fact.gateway, fact.rem, true, now_us, fact.via,
          fact.authoritative});
      if (change != MapChange::None) changed = true;
    }
  }
  if (changed) ++mutation_count_;
  rule6_scan(now_us, out);
  return changed;
}

// Watch the transit quality across every recorded border of the own gnode's
// bnodes; a considerable shift arms a delayed announcement.
void NodeEngine::rule6_scan(int64_t now_us, EngineOutput& out) {
  for (int level = 0; level < config_.params.levels; ++level) {
    for (const auto& [entity_id, entry] : maps_->bnode_entities(level)) {
      if (entity_id == own_component(level)) continue;  // own crossings are radar business
      const auto base = maps_->best_rem(level, entity_id);
      if (!base) continue;
      for (const auto& [border, border_rem] : entry.borders) {
        const Rem transit = rem_compose(*base, border_rem);
        const GnodeRef entity{level, entity_id};
        auto it = transit_baselines_.find({entity, border});
        if (it == transit_baselines_.end()) {
          transit_baselines_.emplace(std::make_pair(entity, border), transit);
          continue;
        }
        if (!(it->second == transit))
          out.merge(on_rem_change(entity, border, it->second, transit, now_us));
      }
    }
  }
}

EngineOutput NodeEngine::on_rem_change(const GnodeRef& entity, const GnodeRef& border,
                                       const Rem& old_transit, const Rem& new_transit,
                                       int64_t now_us) {
  EngineOutput out;
  if (!delta_exceeds(old_transit, new_transit, border.level, config_.policy)) return out;
  std::ostringstream key;
  key << "transit:" << entity.level << ":" << entity.id << ">" << border.level << ":" << border.id;
  arm_pending(PendingChange{PendingChange::Kind::BorderRemShift, Address{}, entity, border,
                            key.str(), 0},
              now_us, out);
  return out;
}

void NodeEngine::escalation_check(const GnodeRef& border, int64_t now_us, EngineOutput& out) {
  if (!maps_->entities_bordering(border).empty()) return;
  bool has_external = false;
  for (const auto& [addr, q] : rnodes_) {
    const auto d = divergence_level(self(), addr);
    if (d && *d == border.level) {
      has_external = true;
      break;
    }
  }
  if (!has_external) return;
  std::ostringstream key;
  key << "escalate:" << border.level << ":" << border.id;
  arm_pending(PendingChange{PendingChange::Kind::BorderLossEscalation, Address{}, GnodeRef{},
                            border, key.str(), 0},
              now_us, out);
}

// --- Dynamics entry points -------------------------------------------------

EngineOutput NodeEngine::on_node_death(const Address& dead, int64_t now_us) {
  EngineOutput out;
  if (mode_ != NodeMode::Active) return out;
  const auto div = divergence_level(self(), dead);
  if (!div || *div != 0) return out;
  const int dead_id = dead.component(0);
  std::vector<GnodeRef> carried;
  {
    const auto& entities = maps_->bnode_entities(0);
    auto it = entities.find(dead_id);
    if (it != entities.end())
      for (const auto& [border, rem] : it->second.borders) carried.push_back(border);
  }
  maps_->kill_entity(0, dead_id, now_us);
  ++mutation_count_;
  std::vector<Hop> hops{regular_hop(dead_id, 0, Rem::identity(), true)};
  originate(0, std::move(hops), false, false, Rem::identity(), now_us, out);
  for (const GnodeRef& border : carried) escalation_check(border, now_us, out);
  return out;
}

EngineOutput NodeEngine::on_node_join_neighbor(const Address& joined, int64_t now_us) {
  EngineOutput out;
  if (mode_ != NodeMode::Active) return out;
  const auto div = divergence_level(self(), joined);
  if (!div) return out;
  send_directed(*div, joined, now_us, out);
  return out;
}

EngineOutput NodeEngine::on_border_loss(const GnodeRef& border, int64_t now_us) {
  EngineOutput out;
  if (mode_ != NodeMode::Active) return out;
  if (maps_->remove_border(0, own_component(0), border)) ++mutation_count_;
  const Hop loss{.id = 0,
                 .level = 0,
                 .link_rem = Rem::identity(),
                 .dead = false,
                 .lost_border = true,
                 .bnode_addr = self(),
                 .border = border};
  if (border.level - 1 >= 0) {
    Hop hop = loss;
    hop.level = border.level - 1;
    originate(border.level - 1, std::vector<Hop>{hop}, false, false, Rem::identity(), now_us, out);
  }
  escalation_check(border, now_us, out);
  return out;
}

EngineOutput NodeEngine::inject_flood(int level, int64_t now_us) {
  EngineOutput out;
  if (mode_ != NodeMode::Active) return out;
  if (level < 0 || level >= config_.params.levels) throw EngineError("level out of range");
  originate(level, {}, true, false, Rem::identity(), now_us, out);
  drain_ready(now_us, out);
  return out;
}

void NodeEngine::begin_epoch() { seen_keys_.clear(); }

// --- Origination -----------------------------------------------------------

void NodeEngine::originate(int level, std::vector<Hop> announce_hops, bool refresh,
                           bool externals_only, const Rem& own_hop_rem, int64_t now_us,
                           EngineOutput& out) {
  HeldOrigination held{level, std::move(announce_hops), refresh, externals_only, own_hop_rem,
                       std::nullopt};
  if (!gate_open(level)) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "origination L%d", level);
    out.notes.push_back(EngineNote{"queue", buf});
    held_originations_.push_back(std::move(held));
    return;
  }
  emit_origination(held, now_us, out);
}

void NodeEngine::send_directed(int level, const Address& to, int64_t now_us, EngineOutput& out) {
  HeldOrigination held{level, {}, false, false, Rem::identity(), to};
  if (!gate_open(level)) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "directed L%d", level);
    out.notes.push_back(EngineNote{"queue", buf});
    held_originations_.push_back(std::move(held));
    return;
  }
  emit_origination(held, now_us, out);
}

void NodeEngine::emit_origination(const HeldOrigination& held, int64_t now_us, EngineOutput& out) {
  if (held.directed) {
    if (!rnodes_.count(*held.directed)) return;  // gone while held
    TracerPacket ctp = make_ctp(held.level);
    append_hop(ctp, regular_hop(own_component(held.level), held.level, Rem::identity()));
    explored_[static_cast<size_t>(held.level)] = true;
    out.msgs.push_back(OutgoingMessage{*held.directed, ctp, now_us, false});
    return;
  }
  TracerPacket base = make_ctp(held.level);
  base.refresh = held.refresh;
  for (const Hop& hop : held.announce_hops) append_hop(base, hop);
  explored_[static_cast<size_t>(held.level)] = true;

  if (!held.externals_only && held.level >= 1) {
    const TracerPacket ltp = lock(base, self(), Rem::identity());
    for (const auto& [neighbor, quality] : rnodes_) {
      const auto d = divergence_level(self(), neighbor);
      if (d && *d < held.level) out.msgs.push_back(OutgoingMessage{neighbor, ltp, now_us, false});
    }
  }
  TracerPacket ctp = base;
  append_hop(ctp, regular_hop(own_component(held.level), held.level, held.own_hop_rem));
  for (const auto& [neighbor, quality] : rnodes_) {
    const auto d = divergence_level(self(), neighbor);
    if (!d || *d != held.level) continue;
    if (config_.loop_check && has_traversed(ctp, neighbor.component(held.level))) continue;
    out.msgs.push_back(OutgoingMessage{neighbor, ctp, now_us, false});
  }
}

void NodeEngine::drain_ready(int64_t now_us, EngineOutput& out) {
  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (size_t i = 0; i < held_originations_.size();) {
      if (gate_open(held_originations_[i].level)) {
        HeldOrigination held = std::move(held_originations_[i]);
        held_originations_.erase(held_originations_.begin() + static_cast<long>(i));
        char buf[48];
        std::snprintf(buf, sizeof buf, held.directed ? "directed L%d" : "origination L%d",
                      held.level);
        out.notes.push_back(EngineNote{"release", buf});
        emit_origination(held, now_us, out);
        progressed = true;
      } else {
        ++i;
      }
    }
    for (int level = 1; level < config_.params.levels; ++level) {
      auto& queue = ctp_queue_[static_cast<size_t>(level)];
      if (queue.empty() || !gate_open(level)) continue;
      while (!queue.empty() && gate_open(level)) {
        auto [from, pkt] = std::move(queue.front());
        queue.pop_front();
        char buf[32];
        std::snprintf(buf, sizeof buf, "L%d", level);
        out.notes.push_back(EngineNote{"release", buf});
        out.merge(process_packet(from, pkt, now_us));
        progressed = true;
      }
    }
  }
}

// --- Hooking ---------------------------------------------------------------

EngineOutput NodeEngine::handle_hook_radar(const std::map<Address, LinkQuality>& snapshot,
                                           int64_t now_us) {
  EngineOutput out;
  hook_snapshot_ = snapshot;
  if (hook_stage_ != HookStage::FirstRadar) return out;  // an exchange is in flight
  if (snapshot.empty()) {
    // Nobody around: found a gnode of its own.
    adopt_address(Address(std::vector<int>(static_cast<size_t>(config_.params.levels), 0),
                          config_.params),
                  now_us, out);
    return out;
  }
  hook_candidates_.clear();
  for (const auto& [addr, q] : snapshot) hook_candidates_.push_back(addr);
  std::sort(hook_candidates_.begin(), hook_candidates_.end(),
            [&](const Address& a, const Address& b) {
              const LinkQuality& qa = snapshot.at(a);
              const LinkQuality& qb = snapshot.at(b);
              if (qa.rtt_ms != qb.rtt_ms) return qa.rtt_ms < qb.rtt_ms;
              return a < b;
            });
  hook_index_ = 0;
  hook_stage_ = HookStage::AwaitFreeIds;
  hook_try_candidate(now_us, out);
  return out;
}

void NodeEngine::hook_try_candidate(int64_t now_us, EngineOutput& out) {
  if (hook_index_ >= hook_candidates_.size()) {
    mode_ = NodeMode::Failed;
    out.notes.push_back(EngineNote{"hook-failed", "all rnodes rejected"});
    return;
  }
  hook_stage_ = HookStage::AwaitFreeIds;
  ++hook_seq_;
  out.ctrl.push_back(ControlMessage{hook_candidates_[hook_index_].str(), "free_ids?"});
  arm_pending(PendingChange{PendingChange::Kind::HookTimeout, Address{}, GnodeRef{}, GnodeRef{},
                            "hook:" + std::to_string(hook_seq_), hook_seq_},
              now_us, out);
}

EngineOutput NodeEngine::on_control(const std::string& from, const std::string& body,
                                    int64_t now_us) {
  EngineOutput out;
  if (mode_ == NodeMode::Dead || mode_ == NodeMode::Failed) return out;

  if (body == "free_ids?") {
    if (mode_ != NodeMode::Active) return out;
    const std::vector<int> ids = maps_->free_node_ids();
    if (ids.empty()) {
      out.ctrl.push_back(ControlMessage{from, "reject"});
    } else {
      std::ostringstream reply;
      reply << "free_ids ";
      for (size_t i = 0; i < ids.size(); ++i) {
        if (i) reply << ",";
        reply << ids[i];
      }
      out.ctrl.push_back(ControlMessage{from, reply.str()});
    }
    return out;
  }
  if (body == "get_maps?") {
    if (mode_ != NodeMode::Active) return out;
    out.ctrl.push_back(ControlMessage{from, "maps " + serialize_maps()});
    return out;
  }

  if (mode_ != NodeMode::Hooking) return out;
  if (hook_index_ >= hook_candidates_.size()) return out;
  if (from != hook_candidates_[hook_index_].str()) return out;  // not the current counterpart

  if (body == "reject" && hook_stage_ == HookStage::AwaitFreeIds) {
    ++hook_seq_;  // invalidate the timeout
    ++hook_index_;
    hook_try_candidate(now_us, out);
    return out;
  }
  if (body.rfind("free_ids ", 0) == 0 && hook_stage_ == HookStage::AwaitFreeIds) {
    ++hook_seq_;
    std::vector<int> ids;
    for (const std::string& token : split(body.substr(9), ','))
      if (!token.empty()) ids.push_back(std::stoi(token));
    if (ids.empty()) {
      ++hook_index_;
      hook_try_candidate(now_us, out);
      return out;
    }
    const int chosen = *std::min_element(ids.begin(), ids.end());
    std::vector<int> comps = hook_candidates_[hook_index_].components();
    comps[0] = chosen;
    hook_chosen_ = Address(comps, config_.params);
    hook_stage_ = HookStage::AwaitMaps;
    out.ctrl.push_back(ControlMessage{from, "get_maps?"});
    arm_pending(PendingChange{PendingChange::Kind::HookTimeout, Address{}, GnodeRef{}, GnodeRef{},
                              "hook:" + std::to_string(hook_seq_), hook_seq_},
                now_us, out);
    return out;
  }
  if (body.rfind("maps ", 0) == 0 && hook_stage_ == HookStage::AwaitMaps && hook_chosen_) {
    ++hook_seq_;
    const Address server = hook_candidates_[hook_index_];
    const Address chosen = *hook_chosen_;
    adopt_address(chosen, now_us, out);
    install_downloaded_maps(body.substr(5), server, now_us);
    drain_ready(now_us, out);
    return out;
  }
  return out;
}

void NodeEngine::adopt_address(const Address& chosen, int64_t now_us, EngineOutput& out) {
  addr_ = chosen;
  maps_.emplace(chosen, config_.params, config_.policy, config_.max_routes);
  rnodes_ = hook_snapshot_;
  last_announced_ = hook_snapshot_;
  for (const auto& [neighbor, quality] : rnodes_) {
    const auto div = divergence_level(chosen, neighbor);
    if (div && *div >= 1)
      maps_->record_bnode(0, chosen.component(0), GnodeRef{*div, neighbor.component(*div)},
                          Rem::from_link(quality));
  }
  // The joiner inherits a settled view; all levels count as explored.
  std::fill(explored_.begin(), explored_.end(), true);
  mode_ = NodeMode::Active;
  ++mutation_count_;
  out.notes.push_back(EngineNote{"adopt", chosen.str()});
  // The newcomer stays silent. Each neighbour discovers it by radar and sends
  // a directed packet; forwarding those through the newcomer appends its hop,
  // which is how the rest of the network learns it exists.
  (void)now_us;
}

void NodeEngine::install_downloaded_maps(const std::string& payload, const Address& server,
                                         int64_t now_us) {
  auto link_it = rnodes_.find(server);
  if (link_it == rnodes_.end()) return;
  const Rem link_rem = Rem::from_link(link_it->second);
  for (const std::string& line : split(payload, ';')) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, ' ');
    try {
      if (f[0] == "R" && f.size() == 5) {
        const int level = std::stoi(f[1]);
        const int id = std::stoi(f[2]);
        if (level < 0 || level >= config_.params.levels) continue;
        if (id == own_component(level)) continue;
        const Rem rem{parse_number(f[3]), parse_number(f[4])};
        maps_->update_route(LearnedRoute{level, id, server, rem_compose(rem, link_rem), true,
                                         now_us, std::nullopt});
      } else if (f[0] == "D" && f.size() == 3) {
        const int level = std::stoi(f[1]);
        const int id = std::stoi(f[2]);
        if (level < 0 || level >= config_.params.levels) continue;
        if (id == own_component(level)) continue;
        maps_->kill_entity(level, id, now_us);
      } else if (f[0] == "B" && f.size() == 7) {
        const int elevel = std::stoi(f[1]);
        const int eid = std::stoi(f[2]);
        const GnodeRef border{std::stoi(f[3]), std::stoi(f[4])};
        const Rem rem{parse_number(f[5]), parse_number(f[6])};
        if (elevel < 0 || elevel >= config_.params.levels) continue;
        maps_->record_bnode(elevel, eid, border, rem);
      }
    } catch (const std::exception&) {
      continue;  // skip damaged lines, keep the rest
    }
  }
  ++mutation_count_;
}

std::string NodeEngine::serialize_maps() const {
  std::ostringstream out;
  bool first = true;
  auto sep = [&]() {
    if (!first) out << ";";
    first = false;
  };
  for (int level = 0; level < config_.params.levels; ++level) {
    for (const auto& [id, entry] : maps_->targets(level)) {
      if (!entry.alive) {
        sep();
        out << "D " << level << " " << id;
        continue;
      }
      if (entry.routes.empty()) continue;
      const RouteEntry& best = entry.routes.front();
      sep();
      out << "R " << level << " " << id << " " << format_number(best.rem.total_rtt_ms) << " "
          << format_number(best.rem.bottleneck_bw);
    }
  }
  for (int level = 0; level < config_.params.levels; ++level) {
    for (const auto& [id, entry] : maps_->bnode_entities(level)) {
      for (const auto& [border, rem] : entry.borders) {
        sep();
        out << "B " << level << " " << id << " " << border.level << " " << border.id << " "
            << format_number(rem.total_rtt_ms) << " " << format_number(rem.bottleneck_bw);
      }
    }
  }
  return out.str();
}

}  // namespace fmesh
