#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmesh/addressing.hpp"
#include "fmesh/maps.hpp"
#include "fmesh/rem.hpp"
#include "fmesh/tracer.hpp"

namespace fmesh {

class EngineError : public std::runtime_error {
 public:
  explicit EngineError(const std::string& what) : std::runtime_error(what) {}
};

// Timing and policy knobs of one node's protocol machine.
struct EngineConfig {
  TopologyParams params;
  RemPolicy policy;
  int max_routes = 3;
  // Neighbour radar period, and the confirmation delay between detecting a
  // change and announcing it (the change must persist for the whole delay).
  int64_t radar_period_us = 500'000;
  int64_t pending_delay_us = 1'000'000;
  // Traversed-gnode check on forwarding. Disabling it reproduces the historic
  // endless-flood failure mode; diagnostics only.
  bool loop_check = true;
};

// A tracer packet handed to one neighbour. `forwarded` distinguishes the
// relay of a received packet from an origination (trace bookkeeping only).
struct OutgoingMessage {
  Address dest;
  TracerPacket pkt;
  int64_t send_time_us = 0;
  bool forwarded = false;
};

// Out-of-band request/reply used while a node hooks into the network (id
// assignment, map download). Routed by textual label because the requesting
// node does not own an address yet.
struct ControlMessage {
  std::string dest;
  std::string body;
};

struct TimerRequest {
  int64_t fire_at_us = 0;
  int token = 0;
};

// A local event worth a trace line: a drop, a queueing decision, an adoption.
struct EngineNote {
  std::string kind;
  std::string detail;
};

// Everything one event handler wants sent, scheduled or logged.
struct EngineOutput {
  std::vector<OutgoingMessage> msgs;
  std::vector<ControlMessage> ctrl;
  std::vector<TimerRequest> timers;
  std::vector<EngineNote> notes;

  bool empty() const { return msgs.empty() && ctrl.empty() && timers.empty() && notes.empty(); }
  void merge(EngineOutput&& other);
};

enum class NodeMode { Hooking, Active, Dead, Failed };

// Per-node protocol state machine. All interaction happens through delivered
// events (radar replies, packets, timers, control messages); each handler
// returns the messages to transmit and the timers to schedule. Engines share
// nothing with each other.
class NodeEngine {
 public:
  // An already-addressed member (simulation bootstrap).
  NodeEngine(const Address& addr, const EngineConfig& config);
  // A node that still needs an address; it acquires one through the hooking
  // procedure, driven by radar rounds and control replies.
  NodeEngine(std::string boot_label, const EngineConfig& config);

  NodeMode mode() const { return mode_; }
  const EngineConfig& config() const { return config_; }
  const std::optional<Address>& addr() const { return addr_; }
  // Stable identity for traces and control routing: the address text once
  // adopted, the bootstrap label before.
  std::string label() const;

  bool has_maps() const { return maps_.has_value(); }
  const NodeMaps& maps() const;
  NodeMaps& maps();
  const std::map<Address, LinkQuality>& rnodes() const { return rnodes_; }
  bool explored(int level) const;
  int queued_packet_count(int level) const;
  // Bumped whenever this node's knowledge changes; the simulator watches it
  // to detect settled radar rounds.
  uint64_t mutation_count() const { return mutation_count_; }

  // Warm-start seeding (topology loader); call only before the first event.
  void seed_rnode(const Address& neighbor, const LinkQuality& quality);
  void seed_explored(int level);

  // --- Event entry points -------------------------------------------------
  // One radar reply per reachable neighbour, then a round finalizer that
  // diffs the collected picture against the known rnodes. New rnode, lost
  // rnode and link-quality shifts each arm a pending-change timer instead of
  // announcing immediately.
  EngineOutput on_radar_reply(const Address& neighbor, const LinkQuality& quality, int64_t now_us);
  EngineOutput finish_radar_round(int64_t now_us);
  // Tracer packet from a neighbour; dispatches on level and kind.
  EngineOutput on_receive(const Address& from, const TracerPacket& pkt, int64_t now_us);
  EngineOutput on_timer(int token, int64_t now_us);
  EngineOutput on_control(const std::string& from, const std::string& body, int64_t now_us);
  // Diagnostic flood origination at `level`; refresh-flagged, so receivers
  // forward it even where its facts are already known.
  EngineOutput inject_flood(int level, int64_t now_us);
  // New convergence epoch (scenario phase): forwarded-key dedup state resets.
  void begin_epoch();
  void kill() { mode_ = NodeMode::Dead; }

  // --- Protocol reactions, also exposed for scripted tests ----------------
  // Level-0 flood: interest check, map update, append own hop, forward inside
  // the gnode only.
  EngineOutput on_receive_level0(const Address& from, const TracerPacket& pkt, int64_t now_us);
  // Level >= 1 packet from an external rnode: lock, flood the gnode interior,
  // egress or bounce.
  EngineOutput on_receive_ctp_high(const Address& from, const TracerPacket& pkt, int64_t now_us);
  // Locked flood from a same-gnode rnode: learn, relay unchanged, egress at
  // own borders.
  EngineOutput on_receive_ltp(const Address& from, const TracerPacket& pkt, int64_t now_us);
  // Confirmed death of a directly linked member of the own gnode.
  EngineOutput on_node_death(const Address& dead, int64_t now_us);
  // Confirmed new rnode: one tracer packet directed solely at it.
  EngineOutput on_node_join_neighbor(const Address& joined, int64_t now_us);
  // Transit quality through one of the own gnode's recorded borders shifted;
  // arms the delayed announcement if the shift exceeds the level's delta.
  EngineOutput on_rem_change(const GnodeRef& entity, const GnodeRef& border, const Rem& old_transit,
                             const Rem& new_transit, int64_t now_us);
  // This node's own physical border link is gone: record removal, loss flood
  // one level below, escalation check.
  EngineOutput on_border_loss(const GnodeRef& border, int64_t now_us);

 private:
  struct PendingChange {
    enum class Kind {
      NewRnode,
      LostRnode,
      QualityShift,
      BorderRemShift,
      BorderLossEscalation,
      HookTimeout
    };
    Kind kind = Kind::NewRnode;
    Address peer;
    GnodeRef entity;
    GnodeRef border;
    std::string key;
    int hook_seq = 0;
  };

  // A flood origination held back by the exploration-order gate.
  struct HeldOrigination {
    int level = 0;
    std::vector<Hop> announce_hops;
    bool refresh = false;
    bool externals_only = false;
    Rem own_hop_rem = Rem::identity();
    std::optional<Address> directed;
  };

  enum class HookStage { FirstRadar, AwaitFreeIds, AwaitMaps };

  const Address& self() const;
  int own_component(int level) const;
  std::optional<Rem> resolve_rem(const Address& dest) const;
  bool gate_open(int level) const;
  bool level_vacuous(int level) const;

  void arm_pending(PendingChange change, int64_t now_us, EngineOutput& out);
  EngineOutput confirm_pending(const PendingChange& change, int64_t now_us);

  EngineOutput process_packet(const Address& from, const TracerPacket& pkt, int64_t now_us);
  bool apply_facts(const PacketFacts& facts, int64_t now_us, EngineOutput& out);
  void rule6_scan(int64_t now_us, EngineOutput& out);
  void escalation_check(const GnodeRef& border, int64_t now_us, EngineOutput& out);
  void flood_interior_and_egress(const TracerPacket& ltp, const std::optional<Address>& skip,
                                 int64_t now_us, EngineOutput& out);
  // Flood origination: locked copy to interior rnodes (unless externals
  // only), announcement + own hop to external rnodes at `level`. Held back
  // when the exploration gate for `level` is closed.
  void originate(int level, std::vector<Hop> announce_hops, bool refresh, bool externals_only,
                 const Rem& own_hop_rem, int64_t now_us, EngineOutput& out);
  void send_directed(int level, const Address& to, int64_t now_us, EngineOutput& out);
  void emit_origination(const HeldOrigination& held, int64_t now_us, EngineOutput& out);
  void drain_ready(int64_t now_us, EngineOutput& out);

  EngineOutput handle_hook_radar(const std::map<Address, LinkQuality>& snapshot, int64_t now_us);
  void hook_try_candidate(int64_t now_us, EngineOutput& out);
  void adopt_address(const Address& chosen, int64_t now_us, EngineOutput& out);
  void install_downloaded_maps(const std::string& payload, const Address& server, int64_t now_us);
  std::string serialize_maps() const;

  EngineConfig config_;
  NodeMode mode_ = NodeMode::Active;
  std::optional<Address> addr_;
  std::string boot_label_;
  std::optional<NodeMaps> maps_;

  std::map<Address, LinkQuality> rnodes_;
  std::map<Address, LinkQuality> last_announced_;
  std::map<Address, LinkQuality> round_;
  bool round_active_ = false;

  std::vector<bool> explored_;
  std::set<std::string> seen_keys_;
  std::vector<std::deque<std::pair<Address, TracerPacket>>> ctp_queue_;
  std::vector<HeldOrigination> held_originations_;

  std::map<int, PendingChange> pending_changes_;
  std::set<std::string> pending_keys_;
  int next_token_ = 1;

  std::map<std::pair<GnodeRef, GnodeRef>, Rem> transit_baselines_;

  // Hooking state.
  HookStage hook_stage_ = HookStage::FirstRadar;
  std::map<Address, LinkQuality> hook_snapshot_;
  std::vector<Address> hook_candidates_;
  size_t hook_index_ = 0;
  int hook_seq_ = 0;
  std::optional<Address> hook_chosen_;

  uint64_t mutation_count_ = 0;
};

}  // namespace fmesh
