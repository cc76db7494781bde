#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fmesh/engine.hpp"
#include "fmesh/topology.hpp"

namespace fmesh {

class SimError : public std::runtime_error {
 public:
  explicit SimError(const std::string& what) : std::runtime_error(what) {}
};

enum class RunStatus { Quiescent, NonQuiescent };

struct SimConfig {
  EngineConfig engine;
  uint64_t seed = 0;  // recorded in the report; all scenario draws derive from it
  int64_t max_time_us = 600'000'000;  // 10 virtual minutes
  uint64_t max_messages = 1'000'000;  // delivered-message budget (livelock brake)
  // Fault hook: duplicates the first forwarded packet transmission, which a
  // clean run never does; exists so the flood-once checker can be proven able
  // to fail.
  bool inject_dup_forward = false;
};

struct ProbeResult {
  enum class Status { Ok, NoRoute, ForwardingLoop };
  Status status = Status::NoRoute;
  std::vector<Address> hops;  // src..dst inclusive when Ok
};

struct ProbeRecord {
  std::string src;
  std::string dst;
  ProbeResult result;
};

// Deterministic discrete-event network. Nodes live in creation-order slots;
// links connect slots symmetrically. Events (packet deliveries, control
// messages, timers, radar rounds, scenario steps) execute in (time, insertion
// sequence) order, so identical inputs replay identical traces, byte for
// byte. One-way delivery latency is rtt/2 of the link at send time.
//
// The radar is driven globally: one tick polls every living node, replies
// come only from addressed (active) neighbours, and ticks stop rescheduling
// after three consecutive rounds without any knowledge change anywhere (and
// re-arm at every scenario step), which makes quiescence decidable.
class SimNetwork {
 public:
  SimNetwork(const Topology& topo, const SimConfig& config);
  SimNetwork(const SimNetwork&) = delete;
  SimNetwork& operator=(const SimNetwork&) = delete;

  // Scenario text: `<time_ms> <action> <args...>` per line, `#` comments.
  // Actions: inject_tracer <node> <level>; set_link <a> <b> rtt=<ms>
  // bw=<units>; cut_link <a> <b>; kill_node <node>; add_node <addr|auto>
  // [link <nbr> rtt=<ms> bw=<units>]...; probe <src> <dst> (runs after
  // quiescence). Nodes are referenced by address or, for auto-added joiners,
  // by their boot label (joiner1, joiner2, ...).
  void load_scenario(const std::string& text);

  RunStatus run();

  const std::string& trace() const { return trace_; }
  std::string report();

  // Hop-by-hop forwarding walk using each node's best gateway, with direct
  // neighbours inside the destination's gnode as fallback.
  ProbeResult probe_route(const Address& src, const Address& dst) const;

  int64_t now_us() const { return now_us_; }
  uint64_t delivered_messages() const { return delivered_; }
  long long max_entries_seen() const { return max_entries_; }
  std::vector<Address> active_addresses() const;
  const NodeEngine* engine(const Address& addr) const;
  NodeEngine* engine(const Address& addr);
  const NodeEngine* engine_by_label(const std::string& label) const;

 private:
  struct SimNode {
    std::unique_ptr<NodeEngine> engine;
    bool alive = true;
  };

  struct DeliverEv {
    size_t src_slot = 0;
    Address src;
    Address dst;
    TracerPacket pkt;
  };
  struct CtrlEv {
    size_t src_slot = 0;
    std::string src;
    std::string dst;
    std::string body;
  };
  struct TimerEv {
    size_t slot = 0;
    int token = 0;
  };
  struct RadarEv {
    uint64_t gen = 0;
  };
  struct StepEv {
    size_t index = 0;
  };
  using EventBody = std::variant<DeliverEv, CtrlEv, TimerEv, RadarEv, StepEv>;
  struct Event {
    int64_t at = 0;
    uint64_t seq = 0;
    EventBody body;
  };
  struct EventOrder {
    bool operator()(const Event& a, const Event& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  struct ScenarioStep {
    int64_t at_us = 0;
    std::vector<std::string> args;
  };

  void push(int64_t at, EventBody body);
  size_t add_slot(std::unique_ptr<NodeEngine> engine);
  std::optional<size_t> slot_of(const std::string& ref) const;
  void set_link_slots(size_t a, size_t b, const LinkQuality& q);
  std::optional<LinkQuality> link_between(size_t a, size_t b) const;

  void dispatch(size_t slot, EngineOutput&& out, int64_t now);
  void deliver(const DeliverEv& ev, int64_t now);
  void deliver_ctrl(const CtrlEv& ev, int64_t now);
  void run_radar_round(int64_t now, uint64_t gen);
  void execute_step(const ScenarioStep& step, int64_t now);
  void note_trace(int64_t at, const std::string& kind, const std::string& src,
                  const std::string& dst, const std::string& payload);
  void touch(size_t slot);
  void arm_radar(int64_t at);
  void force_radar(int64_t at);

  SimConfig config_;
  TopologyParams params_;

  std::vector<SimNode> slots_;
  std::map<Address, size_t> by_addr_;
  std::map<std::string, size_t> by_label_;
  std::map<std::pair<size_t, size_t>, LinkQuality> links_;

  std::priority_queue<Event, std::vector<Event>, EventOrder> queue_;
  uint64_t next_seq_ = 0;
  int64_t now_us_ = 0;
  int64_t last_event_us_ = 0;

  std::vector<ScenarioStep> steps_;
  std::vector<std::pair<std::string, std::string>> probes_;
  int joiner_counter_ = 0;

  bool radar_armed_ = false;
  uint64_t radar_gen_ = 0;
  int quiet_rounds_ = 0;
  uint64_t last_mutation_sum_ = 0;

  std::string trace_;
  std::map<std::string, uint64_t> counts_;               // per trace kind
  std::map<std::pair<std::string, int>, uint64_t> level_counts_;  // (kind, level)
  uint64_t delivered_ = 0;
  long long max_entries_ = 0;
  bool dup_injected_ = false;
  RunStatus status_ = RunStatus::Quiescent;
  bool ran_ = false;
  // Per level: gnode-id sequences of delivered unlocked packets (traversed
  // path plus the receiving gnode), for the route-section of the report.
  std::map<int, std::set<std::vector<int>>> ctp_paths_;
  std::vector<ProbeRecord> probe_records_;
};

std::string format_time_ms(int64_t us);

}  // namespace fmesh
