#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "qpskit/errors.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::events {

// One epoch-to-epoch change of the observable vector. `vector` stacks the
// per-sensor pairs as (f_par_0, f_perp_0, f_par_1, f_perp_1, ...); `valid[i]`
// marks sensors for which both endpoints of the difference existed. Entries
// of invalid sensors are zero and carry no information.
struct DiffEvent {
  int epoch = 0;  // epoch of the later endpoint
  Eigen::VectorXd vector;
  std::vector<std::uint8_t> valid;
  bool folded = false;
  int fold_sign = +1;

  int sensor_count() const { return static_cast<int>(valid.size()); }
  int valid_sensors() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
  int valid_components() const { return 2 * valid_sensors(); }
};

// Preference order of sensors for the sign-folding pivot. An empty order
// means "per event, the valid sensor with the largest |f_par| entry".
struct FoldPivot {
  std::vector<int> sensor_order;
};

struct DetectorConfig {
  double jump_threshold_sigma = 4.0;   // detection threshold on the event norm
  double cluster_radius_sigma = 3.0;   // per-component clustering radius
  int min_repeats = 3;                 // minimum cluster population
  int min_valid_components = 4;        // below this an event cannot be associated
  double min_alternation = 0.8;        // required sign-alternation fraction
  int min_alternation_pairs = 4;       // consecutive pairs needed to judge it
  FoldPivot fold_pivot;                // empty -> automatic per-event pivot

  void validate() const {
    if (!(jump_threshold_sigma > 0.0))
      throw ConfigInvalid("detector.jump_threshold_sigma: must be > 0");
    if (!(cluster_radius_sigma > 0.0))
      throw ConfigInvalid("detector.cluster_radius_sigma: must be > 0");
    if (min_repeats < 2) throw ConfigInvalid("detector.min_repeats: must be >= 2");
    if (min_valid_components < 2)
      throw ConfigInvalid("detector.min_valid_components: must be >= 2");
    if (!(min_alternation >= 0.0 && min_alternation <= 1.0))
      throw ConfigInvalid("detector.min_alternation: must be in [0, 1]");
    if (min_alternation_pairs < 1)
      throw ConfigInvalid("detector.min_alternation_pairs: must be >= 1");
  }
};

// A group of mutually consistent jump events attributed to one two-state
// source. Component statistics are taken over the members in which the
// corresponding sensor was valid.
struct DefectCluster {
  int id = 0;
  std::vector<int> member_indices;   // indices into the folded event list
  std::vector<int> member_epochs;
  Eigen::VectorXd mean_vector;       // per-component mean; 0 where count == 0
  Eigen::VectorXd vector_std;        // per-component sample std; 0 where count < 2
  std::vector<int> component_count;  // members contributing to each component
  int count_plus = 0;                // members folded with sign +1
  int count_minus = 0;               // members folded with sign -1

  int size() const { return static_cast<int>(member_indices.size()); }
};

struct ClusterResult {
  std::vector<DefectCluster> clusters;
  std::vector<int> unassociated;  // event indices not in any cluster
};

// Verdict of nearest-cluster assignment for one jump event.
struct EventAssignment {
  int event_index = -1;
  int epoch = 0;
  int cluster_id = -1;  // -1 when no cluster is within the radius
  int direction = 0;    // fold_sign of the event; the sign of the step
  bool ambiguous = false;  // more than one cluster within the radius
};

// Noise scale of one differenced component: each endpoint carries sigma_f.
inline double diff_component_sigma(const sim::NoiseModel& noise) {
  return std::sqrt(2.0) * noise.sigma_f_mhz;
}

// Fraction of consecutive member pairs (in epoch order) whose fold signs
// alternate. A single two-state source must alternate between charging and
// discharging, so its clusters score near 1; interleaved mixtures of several
// sources hover near 1/2. `pairs_out` receives the number of pairs judged.
inline double sign_alternation(const DefectCluster& cluster,
                               const std::vector<DiffEvent>& folded, int* pairs_out = nullptr) {
  std::vector<size_t> order(cluster.member_indices.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&cluster](size_t a, size_t b) {
    return cluster.member_epochs[a] < cluster.member_epochs[b];
  });
  int alternating = 0, pairs = 0, prev = 0;
  for (size_t k : order) {
    const int idx = cluster.member_indices[k];
    if (idx < 0 || idx >= static_cast<int>(folded.size()))
      throw ConfigInvalid("sign_alternation: cluster member index out of range");
    const int sign = folded[static_cast<size_t>(idx)].fold_sign;
    if (prev != 0) {
      ++pairs;
      if (sign == -prev) ++alternating;
    }
    prev = sign;
  }
  if (pairs_out) *pairs_out = pairs;
  return pairs > 0 ? static_cast<double>(alternating) / pairs : 0.0;
}

// Differences consecutive valid readings per sensor. Missing epochs are
// bridged: each sensor differences against its own last valid reading, and
// the event lands at the epoch of the later endpoint. Epochs with no valid
// difference on any sensor produce no entry.
inline std::vector<DiffEvent> differentiate(const std::vector<sim::SpectralSample>& samples) {
  size_t n = 0;
  for (const auto& s : samples) n = std::max(n, s.per_sensor.size());
  std::vector<DiffEvent> out;
  if (samples.empty()) return out;
  for (size_t t = 1; t < samples.size(); ++t)
    if (samples[t].epoch <= samples[t - 1].epoch)
      throw ConfigInvalid("differentiate: samples must be in strictly increasing epoch order");

  std::vector<std::optional<ObservablePair>> last(n);
  for (const auto& sample : samples) {
    DiffEvent ev;
    ev.epoch = sample.epoch;
    ev.vector = Eigen::VectorXd::Zero(2 * static_cast<int>(n));
    ev.valid.assign(n, 0);
    bool any = false;
    for (size_t i = 0; i < sample.per_sensor.size(); ++i) {
      const auto& reading = sample.per_sensor[i];
      if (!reading) continue;
      if (last[i]) {
        ev.vector[2 * static_cast<int>(i)] = reading->f_par - last[i]->f_par;
        ev.vector[2 * static_cast<int>(i) + 1] = reading->f_perp - last[i]->f_perp;
        ev.valid[i] = 1;
        any = true;
      }
      last[i] = reading;
    }
    if (any) out.push_back(std::move(ev));
  }
  return out;
}

// Keeps the events whose norm over valid components exceeds the detection
// threshold: |v|^2 > (threshold * sqrt(2) * sigma_f)^2 * m, with m the number
// of valid components — i.e. the per-component RMS exceeds the threshold in
// units of the differenced-noise sigma.
inline std::vector<DiffEvent> detect_jumps(const std::vector<DiffEvent>& candidates,
                                           const sim::NoiseModel& noise,
                                           const DetectorConfig& config) {
  config.validate();
  noise.validate();
  const double unit = config.jump_threshold_sigma * diff_component_sigma(noise);
  std::vector<DiffEvent> out;
  for (const auto& ev : candidates) {
    const int m = ev.valid_components();
    if (m == 0) continue;
    double norm2 = 0.0;
    for (int i = 0; i < ev.sensor_count(); ++i)
      if (ev.valid[static_cast<size_t>(i)])
        norm2 += ev.vector[2 * i] * ev.vector[2 * i] + ev.vector[2 * i + 1] * ev.vector[2 * i + 1];
    if (norm2 > unit * unit * m) out.push_back(ev);
  }
  return out;
}

// Ranks sensors for use as the folding pivot: descending mean-square of their
// f_par entries across the given events (ties to the lower sensor id), i.e.
// the sensor whose common-mode response fluctuates hardest. The second moment
// about zero measures step amplitude regardless of the sign mix, so the
// ranking is unchanged by folding. Sensors with no valid entries rank last.
// The f_par component is used because its sign faithfully tracks the sign of
// the underlying field step, while f_perp changes are magnitude-like.
inline FoldPivot choose_fold_pivot(const std::vector<DiffEvent>& events) {
  int n = 0;
  for (const auto& ev : events) n = std::max(n, ev.sensor_count());
  std::vector<double> power(static_cast<size_t>(n), -1.0);
  for (int i = 0; i < n; ++i) {
    double sum2 = 0.0;
    int count = 0;
    for (const auto& ev : events) {
      if (i >= ev.sensor_count() || !ev.valid[static_cast<size_t>(i)]) continue;
      sum2 += ev.vector[2 * i] * ev.vector[2 * i];
      ++count;
    }
    if (count >= 1) power[static_cast<size_t>(i)] = sum2 / static_cast<double>(count);
  }
  FoldPivot pivot;
  pivot.sensor_order.resize(static_cast<size_t>(n));
  std::iota(pivot.sensor_order.begin(), pivot.sensor_order.end(), 0);
  std::stable_sort(pivot.sensor_order.begin(), pivot.sensor_order.end(),
                   [&](int a, int b) {
                     return power[static_cast<size_t>(a)] > power[static_cast<size_t>(b)];
                   });
  return pivot;
}

// Normalizes the sign of one event so that its pivot f_par entry is
// non-negative; the applied sign is recorded in fold_sign. Folding an
// already-folded event is the identity. The pivot is the first sensor in the
// preference order that is valid for this event (or, with an empty order, the
// valid sensor with the largest |f_par|, ties to the lower id); if no valid
// pivot exists the event cannot be folded.
inline DiffEvent fold(const DiffEvent& event, const FoldPivot& pivot = {}) {
  if (event.folded) return event;
  int chosen = -1;
  if (!pivot.sensor_order.empty()) {
    for (int s : pivot.sensor_order)
      if (s >= 0 && s < event.sensor_count() && event.valid[static_cast<size_t>(s)]) {
        chosen = s;
        break;
      }
  } else {
    double best = -1.0;
    for (int s = 0; s < event.sensor_count(); ++s)
      if (event.valid[static_cast<size_t>(s)] && std::abs(event.vector[2 * s]) > best) {
        best = std::abs(event.vector[2 * s]);
        chosen = s;
      }
  }
  if (chosen < 0)
    throw NoValidPivot("fold: event at epoch " + std::to_string(event.epoch) +
                       " has no valid pivot sensor");
  DiffEvent out = event;
  out.folded = true;
  if (event.vector[2 * chosen] < 0.0) {
    out.vector = -event.vector;
    out.fold_sign = -1;
  } else {
    out.fold_sign = +1;
  }
  return out;
}

inline std::vector<DiffEvent> fold_all(const std::vector<DiffEvent>& events,
                                       const FoldPivot& pivot = {}) {
  std::vector<DiffEvent> out;
  out.reserve(events.size());
  for (const auto& ev : events) out.push_back(fold(ev, pivot));
  return out;
}

namespace detail {

// Mean squared distance per shared component; returns false when fewer than
// `min_shared` components are shared.
inline bool mean_square_distance(const DiffEvent& a, const DiffEvent& b, int min_shared,
                                 double* out) {
  const int n = std::min(a.sensor_count(), b.sensor_count());
  double sum = 0.0;
  int m = 0;
  for (int i = 0; i < n; ++i) {
    if (!a.valid[static_cast<size_t>(i)] || !b.valid[static_cast<size_t>(i)]) continue;
    const double dp = a.vector[2 * i] - b.vector[2 * i];
    const double dq = a.vector[2 * i + 1] - b.vector[2 * i + 1];
    sum += dp * dp + dq * dq;
    m += 2;
  }
  if (m < min_shared) return false;
  *out = sum / static_cast<double>(m);
  return true;
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<size_t>(x)] != x) {
      parent[static_cast<size_t>(x)] = parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
      x = parent[static_cast<size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace detail

// Density clustering of folded jump events (DBSCAN with a canonical,
// order-independent attachment rule). Two events are neighbors when they
// share at least `min_valid_components` components and their per-component
// RMS distance is within cluster_radius_sigma differenced-noise sigmas. Core
// events have at least min_repeats neighbors (self included); clusters are
// the connected components of core events, non-core events attach to the
// cluster of their nearest core neighbor. Events with too few valid
// components, and events reachable from no core, are reported unassociated.
// Cluster ids count up in order of each cluster's earliest member epoch.
inline ClusterResult cluster_events(const std::vector<DiffEvent>& folded,
                                    const sim::NoiseModel& noise,
                                    const DetectorConfig& config) {
  config.validate();
  noise.validate();
  for (const auto& ev : folded)
    if (!ev.folded) throw ConfigInvalid("cluster_events: events must be folded first");

  const double radius = config.cluster_radius_sigma * diff_component_sigma(noise);
  const double radius2 = radius * radius;
  const int count = static_cast<int>(folded.size());

  std::vector<int> eligible;
  std::vector<std::uint8_t> is_eligible(folded.size(), 0);
  for (int i = 0; i < count; ++i)
    if (folded[static_cast<size_t>(i)].valid_components() >= config.min_valid_components) {
      eligible.push_back(i);
      is_eligible[static_cast<size_t>(i)] = 1;
    }

  // Neighbor lists over eligible events only.
  std::vector<std::vector<int>> neighbors(folded.size());
  for (size_t a = 0; a < eligible.size(); ++a) {
    for (size_t b = a + 1; b < eligible.size(); ++b) {
      const int i = eligible[a], j = eligible[b];
      double d2;
      if (detail::mean_square_distance(folded[static_cast<size_t>(i)],
                                       folded[static_cast<size_t>(j)],
                                       config.min_valid_components, &d2) &&
          d2 <= radius2) {
        neighbors[static_cast<size_t>(i)].push_back(j);
        neighbors[static_cast<size_t>(j)].push_back(i);
      }
    }
  }

  std::vector<std::uint8_t> is_core(folded.size(), 0);
  for (int i : eligible)
    if (static_cast<int>(neighbors[static_cast<size_t>(i)].size()) + 1 >= config.min_repeats)
      is_core[static_cast<size_t>(i)] = 1;

  // Connected components over core-core edges.
  detail::UnionFind uf(folded.size());
  for (int i : eligible) {
    if (!is_core[static_cast<size_t>(i)]) continue;
    for (int j : neighbors[static_cast<size_t>(i)])
      if (is_core[static_cast<size_t>(j)]) uf.unite(i, j);
  }

  // Attach each non-core eligible event to its nearest core neighbor (ties
  // to the earliest epoch, then the lower event index, so the partition does
  // not depend on input order).
  std::vector<int> attached_root(folded.size(), -1);
  for (int i : eligible) {
    if (is_core[static_cast<size_t>(i)]) {
      attached_root[static_cast<size_t>(i)] = uf.find(i);
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    int best_core = -1;
    for (int j : neighbors[static_cast<size_t>(i)]) {
      if (!is_core[static_cast<size_t>(j)]) continue;
      double d2;
      if (!detail::mean_square_distance(folded[static_cast<size_t>(i)],
                                        folded[static_cast<size_t>(j)],
                                        config.min_valid_components, &d2))
        continue;
      const int je = folded[static_cast<size_t>(j)].epoch;
      const bool tie_wins =
          best_core >= 0 && d2 == best &&
          (je < folded[static_cast<size_t>(best_core)].epoch ||
           (je == folded[static_cast<size_t>(best_core)].epoch && j < best_core));
      if (d2 < best || tie_wins) {
        best = d2;
        best_core = j;
      }
    }
    if (best_core >= 0) attached_root[static_cast<size_t>(i)] = uf.find(best_core);
  }

  // Collect clusters in order of first appearance (events are epoch-ordered).
  std::vector<int> root_to_cluster(folded.size(), -1);
  ClusterResult result;
  for (int i = 0; i < count; ++i) {
    const int root = attached_root[static_cast<size_t>(i)];
    if (root < 0) {
      result.unassociated.push_back(i);
      continue;
    }
    int& cid = root_to_cluster[static_cast<size_t>(root)];
    if (cid < 0) {
      cid = static_cast<int>(result.clusters.size());
      DefectCluster c;
      c.id = cid;
      result.clusters.push_back(std::move(c));
    }
    result.clusters[static_cast<size_t>(cid)].member_indices.push_back(i);
    result.clusters[static_cast<size_t>(cid)].member_epochs.push_back(
        folded[static_cast<size_t>(i)].epoch);
  }

  // Per-component statistics.
  for (auto& cluster : result.clusters) {
    int dim = 0;
    for (int idx : cluster.member_indices)
      dim = std::max(dim, static_cast<int>(folded[static_cast<size_t>(idx)].vector.size()));
    cluster.mean_vector = Eigen::VectorXd::Zero(dim);
    cluster.vector_std = Eigen::VectorXd::Zero(dim);
    cluster.component_count.assign(static_cast<size_t>(dim), 0);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd sum2 = Eigen::VectorXd::Zero(dim);
    for (int idx : cluster.member_indices) {
      const auto& ev = folded[static_cast<size_t>(idx)];
      if (ev.fold_sign >= 0)
        ++cluster.count_plus;
      else
        ++cluster.count_minus;
      for (int s = 0; s < ev.sensor_count(); ++s) {
        if (!ev.valid[static_cast<size_t>(s)]) continue;
        for (int c = 2 * s; c <= 2 * s + 1; ++c) {
          sum[c] += ev.vector[c];
          sum2[c] += ev.vector[c] * ev.vector[c];
          ++cluster.component_count[static_cast<size_t>(c)];
        }
      }
    }
    for (int c = 0; c < dim; ++c) {
      const int k = cluster.component_count[static_cast<size_t>(c)];
      if (k >= 1) cluster.mean_vector[c] = sum[c] / k;
      if (k >= 2) {
        const double var = (sum2[c] - sum[c] * sum[c] / k) / (k - 1);
        cluster.vector_std[c] = var > 0.0 ? std::sqrt(var) : 0.0;
      }
    }
  }

  // Guard: density clustering cannot produce clusters below min_repeats, but
  // keep the contract explicit.
  std::vector<DefectCluster> kept;
  for (auto& c : result.clusters) {
    if (c.size() >= config.min_repeats) {
      kept.push_back(std::move(c));
    } else {
      for (int idx : c.member_indices) result.unassociated.push_back(idx);
    }
  }
  std::sort(result.unassociated.begin(), result.unassociated.end());
  result.clusters = std::move(kept);
  for (size_t i = 0; i < result.clusters.size(); ++i)
    result.clusters[i].id = static_cast<int>(i);
  return result;
}

// Assigns each folded jump event to the nearest cluster mean within the
// clustering radius (per-component RMS over the components valid in the event
// and populated in the cluster, requiring at least min_valid_components
// shared). Events with two or more clusters in range are flagged ambiguous;
// events with none get cluster_id -1.
inline std::vector<EventAssignment> assign_events_to_clusters(
    const std::vector<DiffEvent>& folded, const std::vector<DefectCluster>& clusters,
    const sim::NoiseModel& noise, const DetectorConfig& config) {
  config.validate();
  noise.validate();
  const double radius = config.cluster_radius_sigma * diff_component_sigma(noise);
  const double radius2 = radius * radius;
  std::vector<EventAssignment> out;
  out.reserve(folded.size());
  for (size_t e = 0; e < folded.size(); ++e) {
    const auto& ev = folded[e];
    if (!ev.folded)
      throw ConfigInvalid("assign_events_to_clusters: events must be folded first");
    EventAssignment asg;
    asg.event_index = static_cast<int>(e);
    asg.epoch = ev.epoch;
    asg.direction = ev.fold_sign;
    double best = std::numeric_limits<double>::infinity();
    int within = 0;
    for (const auto& cluster : clusters) {
      double sum = 0.0;
      int m = 0;
      const int n = std::min(ev.sensor_count(),
                             static_cast<int>(cluster.component_count.size()) / 2);
      for (int s = 0; s < n; ++s) {
        if (!ev.valid[static_cast<size_t>(s)]) continue;
        if (cluster.component_count[static_cast<size_t>(2 * s)] < 1) continue;
        const double dp = ev.vector[2 * s] - cluster.mean_vector[2 * s];
        const double dq = ev.vector[2 * s + 1] - cluster.mean_vector[2 * s + 1];
        sum += dp * dp + dq * dq;
        m += 2;
      }
      if (m < config.min_valid_components) continue;
      const double d2 = sum / static_cast<double>(m);
      if (d2 > radius2) continue;
      ++within;
      if (d2 < best) {
        best = d2;
        asg.cluster_id = cluster.id;
      }
    }
    asg.ambiguous = within >= 2;
    out.push_back(asg);
  }
  return out;
}

}  // namespace qpskit::events
