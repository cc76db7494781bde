#include "fmesh/rem.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace fmesh {

Rem rem_compose(const Rem& a, const Rem& b) {
  return Rem{a.total_rtt_ms + b.total_rtt_ms, std::min(a.bottleneck_bw, b.bottleneck_bw)};
}

bool rem_better(const Rem& a, const Rem& b, const RemPolicy& policy) {
  switch (policy.mode) {
    case RemCompareMode::BandwidthFirst:
      if (a.bottleneck_bw != b.bottleneck_bw) return a.bottleneck_bw > b.bottleneck_bw;
      return a.total_rtt_ms < b.total_rtt_ms;
    case RemCompareMode::RttFirst:
    default:
      if (a.total_rtt_ms != b.total_rtt_ms) return a.total_rtt_ms < b.total_rtt_ms;
      return a.bottleneck_bw > b.bottleneck_bw;
  }
}

double rem_scalar(const Rem& r) { return r.total_rtt_ms; }

double delta_threshold(int level, const RemPolicy& policy) {
  return policy.delta_base_ms * (level + 1);
}

bool delta_exceeds(const Rem& old_rem, const Rem& new_rem, int level, const RemPolicy& policy) {
  return std::fabs(rem_scalar(new_rem) - rem_scalar(old_rem)) > delta_threshold(level, policy);
}

std::string format_number(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  double rounded = std::nearbyint(value);
  if (value == rounded && std::fabs(value) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(rounded));
    return buf;
  }
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  return buf;
}

}  // namespace fmesh
