#include "fmesh/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fmesh/tracer.hpp"

namespace fmesh {

namespace {

double parse_positive(const std::string& token, const std::string& what) {
  size_t used = 0;
  double value = 0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != token.size() || !(value > 0) || !std::isfinite(value))
    throw SimError("bad " + what + " '" + token + "'");
  return value;
}

LinkQuality parse_quality(const std::string& rtt_tok, const std::string& bw_tok) {
  if (rtt_tok.rfind("rtt=", 0) != 0 || bw_tok.rfind("bw=", 0) != 0)
    throw SimError("expected rtt=<ms> bw=<units>, got '" + rtt_tok + " " + bw_tok + "'");
  return LinkQuality{parse_positive(rtt_tok.substr(4), "rtt"),
                     parse_positive(bw_tok.substr(3), "bw")};
}

int64_t latency_us(const LinkQuality& q) {
  return std::llround(q.rtt_ms * 1000.0 / 2.0);  // one-way = rtt/2
}

std::string join_args(const std::vector<std::string>& args) {
  std::string out;
  for (size_t i = 0; i < args.size(); ++i) {
    if (i) out += " ";
    out += args[i];
  }
  return out;
}

}  // namespace

std::string format_time_ms(int64_t us) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%lld.%03lld", static_cast<long long>(us / 1000),
                static_cast<long long>(us % 1000));
  std::string text(buf);
  while (!text.empty() && text.back() == '0') text.pop_back();
  if (!text.empty() && text.back() == '.') text.pop_back();
  return text;
}

SimNetwork::SimNetwork(const Topology& topo, const SimConfig& config)
    : config_(config), params_(topo.params) {
  config_.engine.params = topo.params;  // the topology file governs the shape
  for (const Address& addr : topo.nodes)
    add_slot(std::make_unique<NodeEngine>(addr, config_.engine));
  for (const LinkSpec& link : topo.links)
    set_link_slots(by_addr_.at(link.a), by_addr_.at(link.b), link.quality);
  for (const Address& addr : topo.nodes) {
    warm_seed(*slots_[by_addr_.at(addr)].engine, topo, addr);
    touch(by_addr_.at(addr));
  }
  arm_radar(0);
}

void SimNetwork::push(int64_t at, EventBody body) {
  queue_.push(Event{at, next_seq_++, std::move(body)});
}

size_t SimNetwork::add_slot(std::unique_ptr<NodeEngine> engine) {
  const size_t slot = slots_.size();
  const std::string label = engine->label();
  if (by_label_.count(label)) throw SimError("duplicate node " + label);
  if (engine->addr()) by_addr_[*engine->addr()] = slot;
  by_label_[label] = slot;
  slots_.push_back(SimNode{std::move(engine), true});
  return slot;
}

std::optional<size_t> SimNetwork::slot_of(const std::string& ref) const {
  auto it = by_label_.find(ref);
  if (it != by_label_.end()) return it->second;
  return std::nullopt;
}

void SimNetwork::set_link_slots(size_t a, size_t b, const LinkQuality& q) {
  if (a == b) throw SimError("self-link");
  links_[std::minmax(a, b)] = q;
}

std::optional<LinkQuality> SimNetwork::link_between(size_t a, size_t b) const {
  auto it = links_.find(std::minmax(a, b));
  if (it == links_.end()) return std::nullopt;
  return it->second;
}

void SimNetwork::note_trace(int64_t at, const std::string& kind, const std::string& src,
                            const std::string& dst, const std::string& payload) {
  trace_ += format_time_ms(at);
  trace_ += " ";
  trace_ += kind;
  trace_ += " ";
  trace_ += src;
  trace_ += " ";
  trace_ += dst;
  trace_ += " ";
  trace_ += payload;
  trace_ += "\n";
  ++counts_[kind];
}

void SimNetwork::touch(size_t slot) {
  const NodeEngine& engine = *slots_[slot].engine;
  if (!engine.has_maps()) return;
  const long long entries = engine.maps().route_target_count();
  if (entries > max_entries_) max_entries_ = entries;
}

void SimNetwork::arm_radar(int64_t at) {
  if (radar_armed_) return;
  radar_armed_ = true;
  quiet_rounds_ = 0;
  push(at, RadarEv{++radar_gen_});
}

// Starts a fresh radar chain right now, superseding any scheduled tick (the
// stale chain dies on the generation check). Used when a node adopts an
// address: its neighbours must learn it answers the radar before its
// self-announcement crosses the link, or they would drop it as a stray.
void SimNetwork::force_radar(int64_t at) {
  radar_armed_ = true;
  quiet_rounds_ = 0;
  push(at, RadarEv{++radar_gen_});
}

void SimNetwork::dispatch(size_t slot, EngineOutput&& out, int64_t now) {
  const std::string src_label = slots_[slot].engine->label();
  for (const EngineNote& note : out.notes) {
    note_trace(now, note.kind, src_label, "-", note.detail);
    if (note.kind == "adopt") {
      const auto& addr = slots_[slot].engine->addr();
      if (addr) {
        by_addr_[*addr] = slot;
        by_label_[addr->str()] = slot;
      }
      force_radar(now);
    }
  }
  for (const OutgoingMessage& msg : out.msgs) {
    const std::string kind = msg.forwarded ? "fwd" : "orig";
    const std::string hex = packet_hex(msg.pkt, params_);
    note_trace(now, kind, src_label, msg.dest.str(), hex);
    ++level_counts_[{kind, msg.pkt.level}];
    int copies = 1;
    if (config_.inject_dup_forward && msg.forwarded && !dup_injected_) {
      dup_injected_ = true;
      note_trace(now, kind, src_label, msg.dest.str(), hex);
      ++level_counts_[{kind, msg.pkt.level}];
      copies = 2;
    }
    auto dst_it = by_addr_.find(msg.dest);
    if (dst_it == by_addr_.end() || !link_between(slot, dst_it->second)) {
      note_trace(now, "lost", src_label, msg.dest.str(), hex);
      continue;
    }
    const int64_t lat = latency_us(*link_between(slot, dst_it->second));
    const Address src_addr = *slots_[slot].engine->addr();
    for (int c = 0; c < copies; ++c)
      push(now + lat, DeliverEv{slot, src_addr, msg.dest, msg.pkt});
  }
  for (const ControlMessage& msg : out.ctrl) {
    const bool request = !msg.body.empty() && msg.body.back() == '?';
    note_trace(now, request ? "ctrl-req" : "ctrl-rep", src_label, msg.dest, msg.body);
    const auto dst = slot_of(msg.dest);
    if (!dst || !link_between(slot, *dst)) {
      note_trace(now, "lost", src_label, msg.dest, msg.body);
      continue;
    }
    const int64_t lat = latency_us(*link_between(slot, *dst));
    push(now + lat, CtrlEv{slot, src_label, msg.dest, msg.body});
  }
  for (const TimerRequest& timer : out.timers)
    push(std::max(timer.fire_at_us, now), TimerEv{slot, timer.token});
}

void SimNetwork::deliver(const DeliverEv& ev, int64_t now) {
  const std::string hex = packet_hex(ev.pkt, params_);
  if (!slots_[ev.src_slot].alive) {  // sender was silenced mid-flight
    note_trace(now, "lost", ev.src.str(), ev.dst.str(), hex);
    return;
  }
  auto it = by_addr_.find(ev.dst);
  if (it == by_addr_.end() || !slots_[it->second].alive ||
      slots_[it->second].engine->mode() != NodeMode::Active ||
      !link_between(ev.src_slot, it->second)) {
    note_trace(now, "lost", ev.src.str(), ev.dst.str(), hex);
    return;
  }
  ++delivered_;
  note_trace(now, "dlv", ev.src.str(), ev.dst.str(), hex);
  ++level_counts_[{"dlv", ev.pkt.level}];
  if (ev.pkt.kind == PacketKind::Ctp) {
    std::vector<int> path = ev.pkt.traversed;
    path.push_back(ev.dst.component(ev.pkt.level));
    ctp_paths_[ev.pkt.level].insert(std::move(path));
  }
  const size_t dst_slot = it->second;
  dispatch(dst_slot, slots_[dst_slot].engine->on_receive(ev.src, ev.pkt, now), now);
  touch(dst_slot);
}

void SimNetwork::deliver_ctrl(const CtrlEv& ev, int64_t now) {
  if (!slots_[ev.src_slot].alive) return;
  const auto dst = slot_of(ev.dst);
  if (!dst || !slots_[*dst].alive || !link_between(ev.src_slot, *dst)) {
    note_trace(now, "lost", ev.src, ev.dst, ev.body);
    return;
  }
  dispatch(*dst, slots_[*dst].engine->on_control(ev.src, ev.body, now), now);
  touch(*dst);
}

void SimNetwork::run_radar_round(int64_t now, uint64_t gen) {
  if (gen != radar_gen_) return;  // superseded by a forced chain
  // Adjacency by slot, deterministic order.
  std::map<size_t, std::vector<std::pair<size_t, LinkQuality>>> adj;
  for (const auto& [pair, quality] : links_) {
    adj[pair.first].emplace_back(pair.second, quality);
    adj[pair.second].emplace_back(pair.first, quality);
  }
  for (size_t i = 0; i < slots_.size(); ++i) {
    SimNode& node = slots_[i];
    if (!node.alive) continue;
    const NodeMode mode = node.engine->mode();
    if (mode != NodeMode::Active && mode != NodeMode::Hooking) continue;
    auto it = adj.find(i);
    if (it != adj.end()) {
      std::sort(it->second.begin(), it->second.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      for (const auto& [j, quality] : it->second) {
        if (!slots_[j].alive || slots_[j].engine->mode() != NodeMode::Active) continue;
        dispatch(i, node.engine->on_radar_reply(*slots_[j].engine->addr(), quality, now), now);
      }
    }
    dispatch(i, node.engine->finish_radar_round(now), now);
    touch(i);
  }
  uint64_t sum = 0;
  for (const SimNode& node : slots_) sum += node.engine->mutation_count();
  if (sum == last_mutation_sum_) {
    ++quiet_rounds_;
  } else {
    quiet_rounds_ = 0;
    last_mutation_sum_ = sum;
  }
  if (quiet_rounds_ >= 3) {
    radar_armed_ = false;  // settled; scenario steps re-arm
    return;
  }
  push(now + config_.engine.radar_period_us, RadarEv{gen});
}

void SimNetwork::load_scenario(const std::string& text) {
  if (ran_) throw SimError("scenario loaded after the run");
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const size_t hash = raw.find('#');
    std::string line = hash == std::string::npos ? raw : raw.substr(0, hash);
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;
    if (tokens.size() < 2)
      throw SimError("scenario line " + std::to_string(line_no) + ": need time and action");
    int64_t at_us = 0;
    try {
      at_us = std::llround(std::stod(tokens[0]) * 1000.0);
    } catch (const std::exception&) {
      throw SimError("scenario line " + std::to_string(line_no) + ": bad time '" + tokens[0] +
                     "'");
    }
    if (at_us < 0)
      throw SimError("scenario line " + std::to_string(line_no) + ": negative time");
    std::vector<std::string> args(tokens.begin() + 1, tokens.end());
    const std::string& verb = args[0];
    if (verb == "probe") {
      if (args.size() != 3)
        throw SimError("scenario line " + std::to_string(line_no) + ": probe <src> <dst>");
      probes_.emplace_back(args[1], args[2]);
      continue;
    }
    if (verb != "inject_tracer" && verb != "set_link" && verb != "cut_link" &&
        verb != "kill_node" && verb != "add_node")
      throw SimError("scenario line " + std::to_string(line_no) + ": unknown action '" + verb +
                     "'");
    steps_.push_back(ScenarioStep{at_us, std::move(args)});
    push(at_us, StepEv{steps_.size() - 1});
  }
}

void SimNetwork::execute_step(const ScenarioStep& step, int64_t now) {
  note_trace(now, "step", "-", "-", join_args(step.args));
  arm_radar(now);
  for (SimNode& node : slots_) {
    if (!node.alive) continue;
    const NodeMode mode = node.engine->mode();
    if (mode == NodeMode::Active || mode == NodeMode::Hooking) node.engine->begin_epoch();
  }
  const std::vector<std::string>& a = step.args;
  const std::string& verb = a[0];
  auto need_slot = [&](const std::string& ref) {
    const auto slot = slot_of(ref);
    if (!slot) throw SimError("scenario references unknown node " + ref);
    return *slot;
  };
  if (verb == "inject_tracer") {
    if (a.size() != 3) throw SimError("inject_tracer <node> <level>");
    const size_t slot = need_slot(a[1]);
    const int level = std::stoi(a[2]);
    dispatch(slot, slots_[slot].engine->inject_flood(level, now), now);
    touch(slot);
  } else if (verb == "set_link") {
    if (a.size() != 5) throw SimError("set_link <a> <b> rtt=<ms> bw=<units>");
    set_link_slots(need_slot(a[1]), need_slot(a[2]), parse_quality(a[3], a[4]));
  } else if (verb == "cut_link") {
    if (a.size() != 3) throw SimError("cut_link <a> <b>");
    links_.erase(std::minmax(need_slot(a[1]), need_slot(a[2])));
  } else if (verb == "kill_node") {
    if (a.size() != 2) throw SimError("kill_node <node>");
    const size_t slot = need_slot(a[1]);
    slots_[slot].engine->kill();
    slots_[slot].alive = false;
  } else if (verb == "add_node") {
    if (a.size() < 2) throw SimError("add_node <addr|auto> [link <nbr> rtt= bw=]...");
    size_t slot = 0;
    if (a[1] == "auto") {
      const std::string label = "joiner" + std::to_string(++joiner_counter_);
      slot = add_slot(std::make_unique<NodeEngine>(label, config_.engine));
    } else {
      const Address addr = parse_address(a[1], params_);
      if (by_addr_.count(addr) && slots_[by_addr_.at(addr)].alive)
        throw SimError("add_node: address " + a[1] + " already in use");
      slot = add_slot(std::make_unique<NodeEngine>(addr, config_.engine));
    }
    size_t i = 2;
    while (i < a.size()) {
      if (a[i] != "link" || i + 3 >= a.size())
        throw SimError("add_node: expected link <nbr> rtt=<ms> bw=<units>");
      set_link_slots(slot, need_slot(a[i + 1]), parse_quality(a[i + 2], a[i + 3]));
      i += 4;
    }
  }
}

RunStatus SimNetwork::run() {
  if (ran_) throw SimError("network already ran");
  ran_ = true;
  while (!queue_.empty()) {
    Event ev = queue_.top();
    queue_.pop();
    if (ev.at > config_.max_time_us) {
      status_ = RunStatus::NonQuiescent;
      note_trace(ev.at, "halt", "-", "-", "time budget exceeded");
      break;
    }
    now_us_ = ev.at;
    if (!std::holds_alternative<RadarEv>(ev.body)) last_event_us_ = ev.at;
    std::visit(
        [&](auto&& body) {
          using T = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<T, DeliverEv>) deliver(body, ev.at);
          else if constexpr (std::is_same_v<T, CtrlEv>) deliver_ctrl(body, ev.at);
          else if constexpr (std::is_same_v<T, TimerEv>) {
            if (slots_[body.slot].alive) {
              dispatch(body.slot, slots_[body.slot].engine->on_timer(body.token, ev.at), ev.at);
              touch(body.slot);
            }
          } else if constexpr (std::is_same_v<T, RadarEv>) run_radar_round(ev.at, body.gen);
          else if constexpr (std::is_same_v<T, StepEv>) execute_step(steps_[body.index], ev.at);
        },
        ev.body);
    if (delivered_ > config_.max_messages) {
      status_ = RunStatus::NonQuiescent;
      note_trace(now_us_, "halt", "-", "-", "message budget exceeded");
      break;
    }
  }
  if (status_ == RunStatus::Quiescent) {
    for (const auto& [src_ref, dst_ref] : probes_) {
      ProbeRecord record{src_ref, dst_ref, ProbeResult{}};
      const auto src_slot = slot_of(src_ref);
      const auto dst_slot = slot_of(dst_ref);
      if (src_slot && dst_slot && slots_[*src_slot].engine->addr() &&
          slots_[*dst_slot].engine->addr()) {
        record.result = probe_route(*slots_[*src_slot].engine->addr(),
                                    *slots_[*dst_slot].engine->addr());
      }
      probe_records_.push_back(std::move(record));
    }
  }
  return status_;
}

ProbeResult SimNetwork::probe_route(const Address& src, const Address& dst) const {
  ProbeResult result;
  result.hops.push_back(src);
  if (src == dst) {
    result.status = ProbeResult::Status::Ok;
    return result;
  }
  std::set<Address> visited{src};
  Address cur = src;
  for (size_t step = 0; step <= slots_.size(); ++step) {
    auto cur_it = by_addr_.find(cur);
    if (cur_it == by_addr_.end() || !slots_[cur_it->second].alive ||
        slots_[cur_it->second].engine->mode() != NodeMode::Active)
      return result;  // NoRoute
    const NodeEngine& engine = *slots_[cur_it->second].engine;
    const auto d = divergence_level(cur, dst);
    if (!d) return result;
    std::optional<Address> next = engine.maps().best_gateway(dst);
    if (!next) {
      // No stored route: a direct neighbour inside the destination's gnode
      // still carries the packet (border links are not route entries).
      for (const auto& [rnode, quality] : engine.rnodes()) {
        if (rnode.same_gnode_above(dst, *d - 1)) {
          next = rnode;
          break;
        }
      }
    }
    if (!next) return result;
    auto next_it = by_addr_.find(*next);
    if (next_it == by_addr_.end() || !slots_[next_it->second].alive ||
        !link_between(cur_it->second, next_it->second))
      return result;
    if (visited.count(*next)) {
      result.status = ProbeResult::Status::ForwardingLoop;
      result.hops.push_back(*next);
      return result;
    }
    visited.insert(*next);
    result.hops.push_back(*next);
    if (*next == dst) {
      result.status = ProbeResult::Status::Ok;
      return result;
    }
    cur = *next;
  }
  result.status = ProbeResult::Status::ForwardingLoop;
  return result;
}

std::vector<Address> SimNetwork::active_addresses() const {
  std::vector<Address> out;
  for (const auto& [addr, slot] : by_addr_) {
    if (!slots_[slot].alive) continue;
    const NodeEngine& engine = *slots_[slot].engine;
    if (engine.mode() == NodeMode::Active && engine.addr() && *engine.addr() == addr)
      out.push_back(addr);
  }
  return out;
}

const NodeEngine* SimNetwork::engine(const Address& addr) const {
  auto it = by_addr_.find(addr);
  if (it == by_addr_.end()) return nullptr;
  return slots_[it->second].engine.get();
}

NodeEngine* SimNetwork::engine(const Address& addr) {
  auto it = by_addr_.find(addr);
  if (it == by_addr_.end()) return nullptr;
  return slots_[it->second].engine.get();
}

const NodeEngine* SimNetwork::engine_by_label(const std::string& label) const {
  auto it = by_label_.find(label);
  if (it == by_label_.end()) return nullptr;
  return slots_[it->second].engine.get();
}

std::string SimNetwork::report() {
  std::ostringstream r;
  r << "status=" << (status_ == RunStatus::Quiescent ? "quiescent" : "nonquiescent") << "\n";
  r << "seed=" << config_.seed << "\n";
  r << "quiescence_time_ms=" << format_time_ms(last_event_us_) << "\n";
  r << "messages_delivered=" << delivered_ << "\n";
  for (const auto& [kind, count] : counts_) r << "count." << kind << "=" << count << "\n";
  for (const auto& [key, count] : level_counts_)
    r << "count." << key.first << ".L" << key.second << "=" << count << "\n";
  r << "memory.max_entries=" << max_entries_ << "\n";
  r << "memory.limit=" << params_.max_map_entries() << "\n";
  for (const auto& [label, slot] : by_label_) {
    const NodeEngine& engine = *slots_[slot].engine;
    const char* mode = engine.mode() == NodeMode::Active    ? "active"
                       : engine.mode() == NodeMode::Hooking ? "hooking"
                       : engine.mode() == NodeMode::Dead    ? "dead"
                                                            : "failed";
    r << "node." << label << ".mode=" << mode << "\n";
    if (engine.has_maps()) {
      int queued = 0;
      for (int level = 0; level < params_.levels; ++level)
        queued += engine.queued_packet_count(level);
      r << "node." << label << ".entries=" << engine.maps().route_target_count() << "\n";
      r << "node." << label << ".queued=" << queued << "\n";
    }
  }
  if (status_ == RunStatus::Quiescent) {
    const std::vector<Address> actives = active_addresses();
    uint64_t pairs = 0, ok = 0;
    for (const Address& src : actives) {
      for (const Address& dst : actives) {
        if (src == dst) continue;
        ++pairs;
        if (probe_route(src, dst).status == ProbeResult::Status::Ok) ++ok;
      }
    }
    r << "reach.pairs=" << pairs << "\n";
    r << "reach.ok=" << ok << "\n";
  } else {
    r << "reach.skipped=1\n";
  }
  // Longest delivered announcement paths per level: the gnode sequences the
  // unlocked packets actually walked (prefixes folded away).
  for (const auto& [level, paths] : ctp_paths_) {
    for (const auto& path : paths) {
      bool is_prefix = false;
      for (const auto& other : paths) {
        if (other.size() <= path.size()) continue;
        if (std::equal(path.begin(), path.end(), other.begin())) {
          is_prefix = true;
          break;
        }
      }
      if (is_prefix) continue;
      r << "path.L" << level << "=";
      for (size_t i = 0; i < path.size(); ++i) {
        if (i) r << ">";
        r << path[i];
      }
      r << "\n";
    }
  }
  for (size_t i = 0; i < probe_records_.size(); ++i) {
    const ProbeRecord& record = probe_records_[i];
    r << "probe." << i << "=" << record.src << ">" << record.dst << ":";
    switch (record.result.status) {
      case ProbeResult::Status::Ok: {
        r << "ok:";
        for (size_t h = 0; h < record.result.hops.size(); ++h) {
          if (h) r << ">";
          r << record.result.hops[h].str();
        }
        break;
      }
      case ProbeResult::Status::NoRoute:
        r << "no-route";
        break;
      case ProbeResult::Status::ForwardingLoop:
        r << "forwarding-loop";
        break;
    }
    r << "\n";
  }
  return r.str();
}

}  // namespace fmesh
