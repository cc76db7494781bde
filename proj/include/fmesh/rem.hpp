#pragma once

#include <limits>
#include <string>

namespace fmesh {

// Raw quality of one physical link.
struct LinkQuality {
  double rtt_ms = 0.0;
  double bandwidth = 0.0;  // abstract units/sec

  friend bool operator==(const LinkQuality&, const LinkQuality&) = default;
};

// Route Efficiency Measure of a (partial) route: total rtt accumulates by
// addition, bandwidth is the bottleneck (minimum) along the segments. The
// empty route is the composition identity: zero rtt, unbounded bandwidth.
struct Rem {
  double total_rtt_ms = 0.0;
  double bottleneck_bw = std::numeric_limits<double>::infinity();

  static Rem identity() { return Rem{}; }
  static Rem from_link(const LinkQuality& q) { return Rem{q.rtt_ms, q.bandwidth}; }

  friend bool operator==(const Rem&, const Rem&) = default;
};

enum class RemCompareMode {
  RttFirst,        // lower total rtt wins, bandwidth breaks ties (default)
  BandwidthFirst,  // higher bottleneck bandwidth wins, rtt breaks ties
};

struct RemPolicy {
  RemCompareMode mode = RemCompareMode::RttFirst;
  double delta_base_ms = 10.0;  // base of the per-level change threshold
};

// Composition of consecutive segments: rtts add, bandwidth bottlenecks.
Rem rem_compose(const Rem& a, const Rem& b);

// Strict "a is a better route than b" under the policy; equal measures are
// not better than each other.
bool rem_better(const Rem& a, const Rem& b, const RemPolicy& policy);

// The rtt-based scalar used for change thresholds.
double rem_scalar(const Rem& r);

// Change threshold for `level`: delta_base * (level + 1). Higher levels
// aggregate more traffic, so they demand proportionally larger changes.
double delta_threshold(int level, const RemPolicy& policy);

// True iff |scalar(new) - scalar(old)| strictly exceeds the level threshold.
bool delta_exceeds(const Rem& old_rem, const Rem& new_rem, int level, const RemPolicy& policy);

// Stable text for traces/dumps: integral values print without decimals.
std::string format_number(double value);

}  // namespace fmesh
