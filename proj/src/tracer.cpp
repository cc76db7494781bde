#include "fmesh/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace fmesh {

namespace {

constexpr uint32_t kUnboundedBw = 0xFFFFFFFFu;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

uint32_t encode_ms(double ms) {
  if (!(ms > 0.0)) return 0;
  if (ms >= 4294967295.0) return kUnboundedBw;
  return static_cast<uint32_t>(std::llround(ms));
}

uint32_t encode_bw(double bw) {
  if (std::isinf(bw)) return kUnboundedBw;
  if (!(bw > 0.0)) return 0;
  if (bw >= 4294967294.0) return kUnboundedBw - 1;
  return static_cast<uint32_t>(std::llround(bw));
}

double decode_bw(uint32_t v) {
  if (v == kUnboundedBw) return std::numeric_limits<double>::infinity();
  return static_cast<double>(v);
}

void put_address(std::vector<uint8_t>& out, const Address& addr, const TopologyParams& params) {
  if (addr.levels() != params.levels)
    throw TracerError("address depth does not match topology in packet encoding");
  for (int level = 0; level < params.levels; ++level)
    out.push_back(static_cast<uint8_t>(addr.component(level)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& bytes) : bytes_(bytes) {}

  uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(bytes_[pos_]) |
                 (static_cast<uint32_t>(bytes_[pos_ + 1]) << 8) |
                 (static_cast<uint32_t>(bytes_[pos_ + 2]) << 16) |
                 (static_cast<uint32_t>(bytes_[pos_ + 3]) << 24);
    pos_ += 4;
    return v;
  }
  std::vector<uint8_t> raw(size_t count) {
    need(count);
    std::vector<uint8_t> out(bytes_.begin() + static_cast<long>(pos_),
                             bytes_.begin() + static_cast<long>(pos_ + count));
    pos_ += count;
    return out;
  }
  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t count) {
    if (pos_ + count > bytes_.size()) throw TracerError("truncated packet");
  }
  const std::vector<uint8_t>& bytes_;
  size_t pos_ = 0;
};

}  // namespace

TracerPacket make_ctp(int level) {
  if (level < 0) throw TracerError("negative packet level");
  TracerPacket pkt;
  pkt.level = level;
  return pkt;
}

void append_hop(TracerPacket& pkt, const Hop& hop, bool allow_duplicate) {
  if (hop.dead && hop.lost_border) throw TracerError("hop cannot be both dead and lost-border");
  if (!hop.lost_border && hop.level != pkt.level)
    throw TracerError("hop level " + std::to_string(hop.level) +
                      " does not match packet level " + std::to_string(pkt.level));
  if (!hop.dead && !hop.lost_border) {
    const bool seen = has_traversed(pkt, hop.id);
    if (seen) {
      if (!allow_duplicate)
        throw TracerError("gnode " + std::to_string(hop.id) + " already traversed at level " +
                          std::to_string(pkt.level));
      return;  // tolerated revisit: a packet never records the same gnode twice
    }
    pkt.traversed.push_back(hop.id);
  }
  pkt.hops.push_back(hop);
}

TracerPacket lock(const TracerPacket& pkt, const Address& ingress, const Rem& ingress_link_rem) {
  if (pkt.kind != PacketKind::Ctp) throw TracerError("cannot lock an already locked packet");
  if (ingress.empty()) throw TracerError("lock requires the ingress node's address");
  TracerPacket out = pkt;
  out.kind = PacketKind::Ltp;
  out.lock_ip = ingress;
  out.lock_ingress_rem = ingress_link_rem;
  return out;
}

TracerPacket unlock(const TracerPacket& pkt, int own_gnode_id, const Rem& rem_across,
                    bool keep_refresh, bool allow_duplicate) {
  if (pkt.kind != PacketKind::Ltp) throw TracerError("cannot unlock a packet that is not locked");
  TracerPacket out = pkt;
  out.kind = PacketKind::Ctp;
  out.lock_ip.reset();
  out.lock_ingress_rem = Rem::identity();
  out.refresh = pkt.refresh && keep_refresh;
  Hop hop;
  hop.id = own_gnode_id;
  hop.level = pkt.level;
  hop.link_rem = rem_across;
  append_hop(out, hop, allow_duplicate);
  return out;
}

bool has_traversed(const TracerPacket& pkt, int gnode_id) {
  return std::find(pkt.traversed.begin(), pkt.traversed.end(), gnode_id) != pkt.traversed.end();
}

std::string dedup_key(const TracerPacket& pkt) {
  std::ostringstream key;
  key << 'L' << pkt.level << '|' << (pkt.kind == PacketKind::Ltp ? "ltp" : "ctp");
  for (const Hop& hop : pkt.hops) {
    key << '|';
    if (hop.lost_border) {
      key << 'x' << hop.bnode_addr.str() << '>' << hop.border.level << ':' << hop.border.id;
    } else {
      key << (hop.dead ? 'd' : 'h') << hop.id << '@' << hop.level;
    }
  }
  if (pkt.lock_ip) key << "|lock=" << pkt.lock_ip->str();
  return key.str();
}

std::vector<uint8_t> encode_packet(const TracerPacket& pkt, const TopologyParams& params) {
  if (!params.valid()) throw TracerError("invalid topology params");
  if (params.group_size > 256) throw TracerError("binary packet form stores one byte per level");
  if (pkt.level < 0 || pkt.level >= params.levels)
    throw TracerError("packet level out of range for topology");
  if (pkt.hops.size() > 0xFFFF) throw TracerError("too many hops to encode");
  if (pkt.kind == PacketKind::Ltp && !pkt.lock_ip)
    throw TracerError("locked packet without lock address");

  std::vector<uint8_t> out;
  uint8_t kind_byte = pkt.kind == PacketKind::Ltp ? 0x01 : 0x00;
  if (pkt.refresh) kind_byte |= 0x80;
  out.push_back(kind_byte);
  out.push_back(static_cast<uint8_t>(pkt.level));
  put_u16(out, static_cast<uint16_t>(pkt.hops.size()));

  for (const Hop& hop : pkt.hops) {
    if (hop.lost_border) {
      if (hop.border.level < 0 || hop.border.level > 63)
        throw TracerError("lost-border level does not fit the flags byte");
      put_address(out, hop.bnode_addr, params);
      put_u32(out, static_cast<uint32_t>(hop.border.id));
      put_u32(out, 0);
      out.push_back(static_cast<uint8_t>(0x02 | (hop.border.level << 2)));
    } else {
      if (hop.id < 0 || hop.id >= params.group_size) throw TracerError("hop id out of range");
      for (int level = 0; level < params.levels; ++level)
        out.push_back(level == hop.level ? static_cast<uint8_t>(hop.id) : 0xFF);
      put_u32(out, encode_ms(hop.link_rem.total_rtt_ms));
      put_u32(out, encode_bw(hop.link_rem.bottleneck_bw));
      out.push_back(hop.dead ? 0x01 : 0x00);
    }
  }

  if (pkt.kind == PacketKind::Ltp) {
    put_address(out, *pkt.lock_ip, params);
    put_u32(out, encode_ms(pkt.lock_ingress_rem.total_rtt_ms));
    put_u32(out, encode_bw(pkt.lock_ingress_rem.bottleneck_bw));
  }
  return out;
}

TracerPacket decode_packet(const std::vector<uint8_t>& bytes, const TopologyParams& params) {
  if (!params.valid()) throw TracerError("invalid topology params");
  if (params.group_size > 256) throw TracerError("binary packet form stores one byte per level");
  ByteReader reader(bytes);

  const uint8_t kind_byte = reader.u8();
  if ((kind_byte & 0x7E) != 0) throw TracerError("unknown bits set in packet kind");
  TracerPacket pkt;
  pkt.kind = (kind_byte & 0x01) != 0 ? PacketKind::Ltp : PacketKind::Ctp;
  pkt.refresh = (kind_byte & 0x80) != 0;
  pkt.level = reader.u8();
  if (pkt.level >= params.levels) throw TracerError("packet level out of range for topology");
  const uint16_t hop_count = reader.u16();

  auto read_address = [&](const char* what) {
    std::vector<uint8_t> raw = reader.raw(static_cast<size_t>(params.levels));
    std::vector<int> comps(raw.begin(), raw.end());
    try {
      return Address(std::move(comps), params);
    } catch (const AddressError&) {
      throw TracerError(std::string(what) + " carries an invalid address");
    }
  };

  for (uint16_t i = 0; i < hop_count; ++i) {
    std::vector<uint8_t> id_bytes = reader.raw(static_cast<size_t>(params.levels));
    const uint32_t rtt_field = reader.u32();
    const uint32_t bw_field = reader.u32();
    const uint8_t flags = reader.u8();

    Hop hop;
    hop.level = pkt.level;
    if ((flags & 0x02) != 0) {
      hop.lost_border = true;
      std::vector<int> comps(id_bytes.begin(), id_bytes.end());
      try {
        hop.bnode_addr = Address(std::move(comps), params);
      } catch (const AddressError&) {
        throw TracerError("lost-border hop carries an invalid address");
      }
      hop.border = GnodeRef{flags >> 2, static_cast<int>(rtt_field)};
    } else {
      if ((flags & ~uint8_t{0x01}) != 0) throw TracerError("unknown bits set in hop flags");
      hop.dead = (flags & 0x01) != 0;
      hop.id = id_bytes[static_cast<size_t>(pkt.level)];
      if (hop.id >= params.group_size) throw TracerError("hop id out of range");
      hop.link_rem = Rem{static_cast<double>(rtt_field), decode_bw(bw_field)};
    }
    if (!hop.dead && !hop.lost_border && !has_traversed(pkt, hop.id))
      pkt.traversed.push_back(hop.id);
    pkt.hops.push_back(hop);
  }

  if (pkt.kind == PacketKind::Ltp) {
    pkt.lock_ip = read_address("lock");
    pkt.lock_ingress_rem = Rem{static_cast<double>(reader.u32()), decode_bw(reader.u32())};
  }
  if (!reader.exhausted()) throw TracerError("trailing bytes after packet");
  return pkt;
}

std::string packet_hex(const TracerPacket& pkt, const TopologyParams& params) {
  static const char* digits = "0123456789abcdef";
  std::vector<uint8_t> bytes = encode_packet(pkt, params);
  std::string out;
  out.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0x0F]);
  }
  return out;
}

TracerPacket packet_from_hex(const std::string& hex, const TopologyParams& params) {
  if (hex.size() % 2 != 0) throw TracerError("odd-length hex packet");
  auto nibble = [](char ch) -> int {
    if (ch >= '0' && ch <= '9') return ch - '0';
    if (ch >= 'a' && ch <= 'f') return ch - 'a' + 10;
    if (ch >= 'A' && ch <= 'F') return ch - 'A' + 10;
    throw TracerError("invalid hex digit in packet");
  };
  std::vector<uint8_t> bytes;
  bytes.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2)
    bytes.push_back(static_cast<uint8_t>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
  return decode_packet(bytes, params);
}

PacketFacts extract_facts(const TracerPacket& pkt, const NodeMaps& maps, const Address& from,
                          const Rem& ingress_link_rem,
                          const std::map<Address, LinkQuality>* direct_links) {
  const Address& owner = maps.owner();
  const TopologyParams& params = maps.params();
  if (pkt.level < 0 || pkt.level >= params.levels)
    throw TracerError("packet level out of range for the receiver's topology");

  PacketFacts facts;

  // Death and lost-border records are positional announcements, outside the
  // REM chain of crossed segments.
  for (const Hop& hop : pkt.hops) {
    if (hop.dead) {
      if (hop.id != owner.component(hop.level)) facts.deaths.push_back(DeathFact{hop.level, hop.id});
    } else if (hop.lost_border) {
      if (divergence_level(owner, hop.bnode_addr))  // skip the receiver's own announcement
        facts.lost_borders.push_back(LostBorderFact{hop.bnode_addr, hop.border});
    }
  }

  // Base of the chain: the cost of reaching the last hop, and the gateway
  // that realizes it.
  Rem base = ingress_link_rem;
  Address gateway = from;
  std::optional<GnodeRef> via;
  bool have_base = true;

  if (pkt.kind == PacketKind::Ltp) {
    if (!pkt.lock_ip) throw TracerError("locked packet without lock address");
    const Address& lock_addr = *pkt.lock_ip;
    const auto div = divergence_level(owner, lock_addr);
    if (!div) {
      // The ingress node itself; it learned everything from the unlocked form.
      have_base = false;
    } else {
      const GnodeRef entity{*div, lock_addr.component(*div)};
      via = entity;
      // The lock entity is a border of the receiver's own gnode towards the
      // gnode the packet last crossed.
      if (*div < pkt.level) {
        for (auto it = pkt.hops.rbegin(); it != pkt.hops.rend(); ++it) {
          if (it->dead || it->lost_border) continue;
          // The receiver's own gnode cannot be one of its borders.
          if (it->id != owner.component(pkt.level))
            facts.bnodes.push_back(BnodeFact{entity.level, entity.id, GnodeRef{pkt.level, it->id},
                                             pkt.lock_ingress_rem});
          break;
        }
      }
      const auto rem_to_lock = maps.best_rem(lock_addr);
      const auto gw_to_lock = maps.best_gateway(lock_addr);
      if (rem_to_lock && gw_to_lock) {
        base = rem_compose(*rem_to_lock, pkt.lock_ingress_rem);
        gateway = *gw_to_lock;
      } else if (direct_links && direct_links->count(lock_addr)) {
        base = rem_compose(Rem::from_link(direct_links->at(lock_addr)), pkt.lock_ingress_rem);
        gateway = lock_addr;
      } else {
        have_base = false;
      }
    }
  }

  facts.base_known = have_base;
  if (!have_base) return facts;

  // Walk the hops newest first: each regular hop is reachable at the
  // accumulated cost, which then grows by the segment that hop recorded.
  // The newest hop of an unlocked packet is the sender speaking about itself;
  // that one fact is first-hand and may worsen a stored route.
  Rem acc = base;
  bool newest = true;
  for (auto it = pkt.hops.rbegin(); it != pkt.hops.rend(); ++it) {
    const Hop& hop = *it;
    if (hop.dead || hop.lost_border) continue;
    const bool firsthand =
        newest && pkt.kind == PacketKind::Ctp && hop.id == from.component(hop.level);
    newest = false;
    if (hop.id != owner.component(hop.level))
      facts.routes.push_back(RouteFact{hop.level, hop.id, acc, gateway, via, firsthand});
    acc = rem_compose(acc, hop.link_rem);
  }
  return facts;
}

bool is_interesting(const TracerPacket& pkt, const NodeMaps& maps, const Address& from,
                    const Rem& ingress_link_rem,
                    const std::map<Address, LinkQuality>* direct_links) {
  const PacketFacts facts = extract_facts(pkt, maps, from, ingress_link_rem, direct_links);
  const Address& owner = maps.owner();
  const TopologyParams& params = maps.params();

  for (const DeathFact& death : facts.deaths) {
    if (maps.target_alive(death.level, death.id)) return true;
    if (!maps.target_known(death.level, death.id)) return true;  // a tombstone would appear
    if (maps.bnode_known(death.level, death.id)) return true;    // border records would drop
  }

  for (const LostBorderFact& lost : facts.lost_borders) {
    const auto div = divergence_level(owner, lost.bnode_addr);
    if (!div) continue;
    // Inside the loser's gnode: the border record is still on file.
    const int entity_id = lost.bnode_addr.component(*div);
    const auto& entities = maps.bnode_entities(*div);
    const auto entity_it = entities.find(entity_id);
    if (entity_it != entities.end() && entity_it->second.borders.count(lost.border)) return true;
    // Outside: a stored route to the lost gnode exits through the loser's gnode.
    if (lost.border.level < params.levels && lost.border.id != owner.component(lost.border.level) &&
        maps.target_known(lost.border.level, lost.border.id)) {
      for (const RouteEntry& route : maps.targets(lost.border.level).at(lost.border.id).routes) {
        if (route.gateway.same_gnode_above(lost.bnode_addr, *div - 1)) return true;
      }
    }
  }

  for (const BnodeFact& fact : facts.bnodes) {
    const auto& entities = maps.bnode_entities(fact.entity_level);
    const auto entity_it = entities.find(fact.entity_id);
    if (entity_it == entities.end()) return true;
    const auto border_it = entity_it->second.borders.find(fact.borders_on);
    if (border_it == entity_it->second.borders.end()) return true;
    // A known crossing whose quality moved beyond the level's delta is news.
    if (delta_exceeds(border_it->second, fact.rem, fact.borders_on.level, maps.policy()))
      return true;
  }

  if (facts.base_known) {
    for (const RouteFact& fact : facts.routes) {
      const LearnedRoute route{fact.level, fact.target_id, fact.gateway, fact.rem,
                               true,       0,              fact.via,     fact.authoritative};
      if (maps.classify_route(route) != MapChange::None) return true;
    }
  }
  return false;
}

}  // namespace fmesh
