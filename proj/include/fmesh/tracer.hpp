#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmesh/addressing.hpp"
#include "fmesh/maps.hpp"
#include "fmesh/rem.hpp"

namespace fmesh {

class TracerError : public std::runtime_error {
 public:
  explicit TracerError(const std::string& what) : std::runtime_error(what) {}
};

enum class PacketKind : uint8_t { Ctp = 0, Ltp = 1 };

// One collected hop. Regular hops carry the id of the node (level 0) or
// gnode (level >= 1) that was crossed and the REM of the segment ending at
// that hop. A dead hop announces the death of that entity. A lost-border hop
// announces that a border node lost its link towards `border`; it carries the
// full address of the losing bnode so receivers can project it to their own
// divergence level.
struct Hop {
  int id = 0;
  int level = 0;
  Rem link_rem = Rem::identity();
  bool dead = false;
  bool lost_border = false;
  Address bnode_addr;  // lost-border hops only
  GnodeRef border;     // lost-border hops only

  friend bool operator==(const Hop&, const Hop&) = default;
};

// A tracer packet exploring one level. A CTP (continuous tracer packet)
// travels between gnodes of `level`; when it enters a gnode, the ingress
// border node locks it into an LTP (locked tracer packet) that floods the
// gnode interior unchanged, carrying the ingress node's full address and the
// REM of the crossed border link. `refresh` marks a diagnostic flood that is
// forwarded regardless of the interest rule.
struct TracerPacket {
  int level = 0;
  PacketKind kind = PacketKind::Ctp;
  bool refresh = false;
  std::vector<Hop> hops;  // oldest first
  std::optional<Address> lock_ip;
  Rem lock_ingress_rem = Rem::identity();
  std::vector<int> traversed;  // gnode ids at `level` already crossed

  friend bool operator==(const TracerPacket&, const TracerPacket&) = default;
};

TracerPacket make_ctp(int level);

// Appends a hop and maintains `traversed`. Appending an id already traversed
// at the packet's level is a protocol error unless explicitly tolerated, in
// which case the call is a no-op: a packet never records the same gnode
// twice, even in the loop-check-disabled mode where it keeps circulating.
void append_hop(TracerPacket& pkt, const Hop& hop, bool allow_duplicate = false);

// CTP -> LTP at the ingress border node. Hop list unchanged; the packet
// additionally records the ingress address and the REM of the border link it
// just crossed, so interior nodes can price the crossing.
TracerPacket lock(const TracerPacket& pkt, const Address& ingress, const Rem& ingress_link_rem);

// LTP -> CTP at an egress border node: drops the lock and appends the egress
// node's own gnode id with the REM measured from border to border (the
// "segment ending at this gnode"). The refresh flag does not survive an
// unlock unless `keep_refresh` (loop-check-disabled mode).
TracerPacket unlock(const TracerPacket& pkt, int own_gnode_id, const Rem& rem_across,
                    bool keep_refresh = false, bool allow_duplicate = false);

bool has_traversed(const TracerPacket& pkt, int gnode_id);

// Key identifying the high-level route a packet has taken: level, the full
// hop identity sequence (REMs excluded - copies of one flood differing only
// in measured REM are duplicates) and the lock. Used for flood-once
// deduplication.
std::string dedup_key(const TracerPacket& pkt);

// Binary wire form, little endian:
//   u8 kind (bit0: CTP=0/LTP=1, bit7: refresh), u8 level, u16 hop count;
//   per hop: `levels` id bytes (component per level, 0xFF padding above the
//   hop level; lost-border hops carry the full bnode address), u32 rtt ms,
//   u32 bandwidth (0xFFFFFFFF = unbounded; lost-border hops carry the lost
//   gnode id in the rtt field), u8 flags (bit0 dead, bit1 lost-border,
//   bits2..7 border level);
//   LTPs append the lock address (`levels` bytes) and the ingress link REM
//   (u32 rtt ms, u32 bandwidth).
std::vector<uint8_t> encode_packet(const TracerPacket& pkt, const TopologyParams& params);
TracerPacket decode_packet(const std::vector<uint8_t>& bytes, const TopologyParams& params);
std::string packet_hex(const TracerPacket& pkt, const TopologyParams& params);
TracerPacket packet_from_hex(const std::string& hex, const TopologyParams& params);

// --- Facts a packet teaches a specific receiver ---------------------------

struct RouteFact {
  int level = 0;
  int target_id = 0;
  Rem rem;
  Address gateway;
  std::optional<GnodeRef> via;
  // Set when the fact is the sender's own final hop: the sender speaking
  // about itself (or its own gnode). First-hand facts may worsen a stored
  // same-gateway route; relayed ones may not.
  bool authoritative = false;
};

struct BnodeFact {
  int entity_level = 0;
  int entity_id = 0;
  GnodeRef borders_on;
  Rem rem;
};

struct DeathFact {
  int level = 0;
  int id = 0;
};

struct LostBorderFact {
  Address bnode_addr;
  GnodeRef border;
};

struct PacketFacts {
  std::vector<RouteFact> routes;
  std::vector<BnodeFact> bnodes;
  std::vector<DeathFact> deaths;
  std::vector<LostBorderFact> lost_borders;
  // False when an LTP's lock entity cannot be priced yet (no route to it);
  // route facts are then unavailable, the rest still applies.
  bool base_known = true;
};

// Computes what `pkt`, as received from `from` over a link of quality
// `ingress_link_rem`, teaches the owner of `maps`. For a CTP the route REMs
// chain backwards from the receiving link; for an LTP they chain from the
// receiver's own route to the lock entity composed with the recorded border
// crossing, which is exactly how interior nodes price routes they learn from
// a locked flood. When the receiver has no map route to the lock entity yet
// but a direct link to it (early exploration), `direct_links` supplies the
// link table used as a fallback.
PacketFacts extract_facts(const TracerPacket& pkt, const NodeMaps& maps, const Address& from,
                          const Rem& ingress_link_rem,
                          const std::map<Address, LinkQuality>* direct_links = nullptr);

// The interest rule: a packet is interesting iff applying its facts would
// change the receiver's maps - a new bnode, a known bnode with a new border,
// a border whose recorded crossing quality shifted beyond the level's delta,
// the death of something still considered alive, a lost border still on
// record, an unknown target, or a route whose stored measure would change.
// Exact duplicates therefore evaluate to false. Deduplication by key is the
// caller's business.
bool is_interesting(const TracerPacket& pkt, const NodeMaps& maps, const Address& from,
                    const Rem& ingress_link_rem,
                    const std::map<Address, LinkQuality>* direct_links = nullptr);

}  // namespace fmesh
