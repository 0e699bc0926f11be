#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qpskit/core_model.hpp"
#include "qpskit/errors.hpp"
#include "qpskit/events.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::decomp {

// Ionization history of a sensor itself: when state[t] is 1 the sensor site
// carries `charge_e` and Stark-shifts its neighbors.
struct SensorChargeTrace {
  int sensor_id = 0;
  double charge_e = -1.0;
  std::vector<std::uint8_t> state;
};

// Removes the fields that the sensors impose on each other: for every epoch
// and every reporting sensor, subtracts the exact observable shift caused by
// the other sensors that are charged in that epoch. Applying the same call
// with the charge signs flipped restores the common-mode components exactly;
// the splitting components return to within the linearization bound.
inline std::vector<sim::SpectralSample> subtract_sensor_mutual_fields(
    const std::vector<sim::SpectralSample>& samples,
    const std::vector<SensorChargeTrace>& traces, const std::vector<NVSensor>& sensors,
    const PhysicsConstants& constants = {}) {
  for (const auto& tr : traces) {
    if (tr.state.size() != samples.size())
      throw ConfigInvalid("sensor trace " + std::to_string(tr.sensor_id) +
                          ": state length does not match the sample count");
    if (std::none_of(sensors.begin(), sensors.end(),
                     [&](const NVSensor& s) { return s.id() == tr.sensor_id; }))
      throw ConfigInvalid("sensor trace " + std::to_string(tr.sensor_id) +
                          ": no such sensor");
  }
  std::vector<sim::SpectralSample> out = samples;
  for (size_t t = 0; t < out.size(); ++t) {
    for (size_t i = 0; i < sensors.size() && i < out[t].per_sensor.size(); ++i) {
      auto& reading = out[t].per_sensor[i];
      if (!reading) continue;
      Vec3 field = Vec3::Zero();
      for (const auto& tr : traces) {
        if (tr.sensor_id == sensors[i].id() || !tr.state[t]) continue;
        const NVSensor& other = *std::find_if(
            sensors.begin(), sensors.end(),
            [&](const NVSensor& s) { return s.id() == tr.sensor_id; });
        field += coulomb_field(other.position(), tr.charge_e, sensors[i].position(), constants);
      }
      *reading -= exact_shift(field, sensors[i]);
    }
  }
  return out;
}

// Occupancy histories recovered from assigned jump events, one per cluster.
// "Occupied" means the state whose entry adds the cluster's folded mean
// vector to the spectra; whether that corresponds to the physically charged
// state of the underlying trap is not knowable from the spectra alone.
struct TraceReconstruction {
  std::vector<sim::ChargeTrace> traces;     // trace k belongs to cluster id k
  std::vector<std::uint8_t> inconsistent;   // cluster saw two same-direction steps in a row
};

// Integrates the event directions into per-cluster occupancy traces. The
// first event of a cluster fixes the initial state (a +1 step implies the
// trace started empty). A repeated direction is physically impossible for a
// two-state trap — it means a missed intermediate event; the trace is then
// clamped to the state implied by the later event and the cluster is flagged.
// Ambiguous and unassigned events contribute nothing.
inline TraceReconstruction reconstruct_traces(
    const std::vector<events::EventAssignment>& assignments,
    const std::vector<int>& sample_epochs, int cluster_count) {
  if (cluster_count < 0)
    throw ConfigInvalid("reconstruct_traces: cluster_count must be >= 0");
  const int epochs = static_cast<int>(sample_epochs.size());
  TraceReconstruction recon;
  recon.traces.resize(static_cast<size_t>(cluster_count));
  recon.inconsistent.assign(static_cast<size_t>(cluster_count), 0);
  for (int k = 0; k < cluster_count; ++k) {
    recon.traces[static_cast<size_t>(k)].defect_id = k;
    recon.traces[static_cast<size_t>(k)].occupancy.assign(static_cast<size_t>(epochs), 0);
  }
  // Map sample epoch -> index.
  auto epoch_index = [&](int epoch) -> int {
    const auto it = std::lower_bound(sample_epochs.begin(), sample_epochs.end(), epoch);
    if (it == sample_epochs.end() || *it != epoch) return -1;
    return static_cast<int>(it - sample_epochs.begin());
  };
  for (int t = 1; t < epochs; ++t)
    if (sample_epochs[static_cast<size_t>(t)] <= sample_epochs[static_cast<size_t>(t - 1)])
      throw ConfigInvalid("reconstruct_traces: sample epochs must be strictly increasing");

  for (int k = 0; k < cluster_count; ++k) {
    auto& occupancy = recon.traces[static_cast<size_t>(k)].occupancy;
    int state = -1;  // unknown until the first event
    int first_event_index = -1;
    int last_state = -1;
    // Assignments arrive in epoch order; walk them once.
    for (const auto& asg : assignments) {
      if (asg.cluster_id != k || asg.ambiguous || asg.direction == 0) continue;
      const int idx = epoch_index(asg.epoch);
      if (idx < 0)
        throw ConfigInvalid("reconstruct_traces: event epoch " + std::to_string(asg.epoch) +
                            " not present in sample_epochs");
      const int target = asg.direction > 0 ? 1 : 0;
      if (state == -1) {
        state = 1 - target;  // the first flip fixes the initial state
        for (int t = 0; t < idx; ++t) occupancy[static_cast<size_t>(t)] =
            static_cast<std::uint8_t>(state);
        first_event_index = idx;
        last_state = state;
      } else if (last_state == target) {
        recon.inconsistent[static_cast<size_t>(k)] = 1;  // missed a step in between
      }
      for (int t = idx; t < epochs; ++t)
        occupancy[static_cast<size_t>(t)] = static_cast<std::uint8_t>(target);
      last_state = target;
    }
    (void)first_event_index;
  }
  return recon;
}

// Sum of the resolved clusters' spectral contributions at epoch index t,
// relative to epoch 0: sum_k mean_k * (occ_k(t) - occ_k(0)). The result is
// stacked like an event vector (f_par, f_perp per sensor).
inline Eigen::VectorXd resolved_shift_vector(const std::vector<events::DefectCluster>& clusters,
                                             const TraceReconstruction& recon, int t,
                                             int sensor_count) {
  Eigen::VectorXd shift = Eigen::VectorXd::Zero(2 * sensor_count);
  for (size_t k = 0; k < clusters.size(); ++k) {
    const auto& occupancy = recon.traces[k].occupancy;
    if (occupancy.empty()) continue;
    const double delta = static_cast<double>(occupancy[static_cast<size_t>(t)]) -
                         static_cast<double>(occupancy[0]);
    if (delta == 0.0) continue;
    const int dim = std::min<int>(2 * sensor_count, static_cast<int>(clusters[k].mean_vector.size()));
    for (int c = 0; c < dim; ++c) shift[c] += delta * clusters[k].mean_vector[c];
  }
  return shift;
}

// Per-epoch estimate of the residual common-mode field. `field_vcm[t]` is
// empty when fewer than 4 observable components were available; `partial[t]`
// marks epochs where the present sensors left the 3-component field
// underdetermined (the minimum-norm completion is reported).
struct BackgroundFit {
  std::vector<std::optional<Vec3>> field_vcm;
  std::vector<std::uint8_t> partial;
  std::vector<double> residual_rms_mhz;  // NaN where no estimate
};

// Weighted-by-nothing linear least squares of a uniform field against the
// per-sensor deviations: each present sensor contributes the rows
//   d_par  * z_hat^T      ~ delta f_par
//   d_perp * n_perp_hat^T ~ delta f_perp
// where n_perp_hat is the sensor's transverse bias direction (linearized
// splitting response). Solved per epoch via SVD.
inline BackgroundFit fit_background(const std::vector<sim::SpectralSample>& deviations,
                                    const std::vector<NVSensor>& sensors) {
  BackgroundFit fit;
  fit.field_vcm.resize(deviations.size());
  fit.partial.assign(deviations.size(), 0);
  fit.residual_rms_mhz.assign(deviations.size(), std::numeric_limits<double>::quiet_NaN());
  for (size_t t = 0; t < deviations.size(); ++t) {
    int present = 0;
    for (size_t i = 0; i < sensors.size() && i < deviations[t].per_sensor.size(); ++i)
      if (deviations[t].per_sensor[i]) ++present;
    const int rows = 2 * present;
    if (rows < 4) continue;
    Eigen::MatrixXd a(rows, 3);
    Eigen::VectorXd b(rows);
    int r = 0;
    for (size_t i = 0; i < sensors.size() && i < deviations[t].per_sensor.size(); ++i) {
      const auto& reading = deviations[t].per_sensor[i];
      if (!reading) continue;
      a.row(r) = sensors[i].d_par() * sensors[i].frame().z_hat().transpose();
      b[r] = reading->f_par;
      ++r;
      a.row(r) = sensors[i].d_perp() * sensors[i].transverse_axis().transpose();
      b[r] = reading->f_perp;
      ++r;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(1e-10);
    const Eigen::Vector3d x = svd.solve(b);
    fit.field_vcm[t] = Vec3(x);
    fit.partial[t] = svd.rank() < 3 ? 1 : 0;
    fit.residual_rms_mhz[t] = (a * x - b).norm() / std::sqrt(static_cast<double>(rows));
  }
  return fit;
}

// Everything the spectral-diffusion decomposition produces: the corrected
// spectra plus the three subtracted layers and summary statistics.
struct DecompositionReport {
  std::vector<sim::SpectralSample> mutual_subtracted;  // input minus sensor cross-talk
  TraceReconstruction traces;
  BackgroundFit background;
  std::vector<ObservablePair> baseline;                // per-sensor quiescent level
  std::vector<sim::SpectralSample> corrected;
  // Per-sensor scatter of the spectra before and after correction, taken
  // over the epochs in which the sensor reported.
  std::vector<ObservablePair> peak_to_peak_before;
  std::vector<ObservablePair> peak_to_peak_after;
  std::vector<ObservablePair> std_before;
  std::vector<ObservablePair> std_after;
};

namespace detail {

struct ComponentStats {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  double sum = 0.0, sum2 = 0.0;
  int n = 0;
  void add(double x) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    sum += x;
    sum2 += x * x;
    ++n;
  }
  double peak_to_peak() const { return n > 0 ? hi - lo : 0.0; }
  double standard_deviation() const {
    if (n < 2) return 0.0;
    const double var = (sum2 - sum * sum / n) / (n - 1);
    return var > 0.0 ? std::sqrt(var) : 0.0;
  }
};

inline void scatter_stats(const std::vector<sim::SpectralSample>& samples, size_t sensor_count,
                          std::vector<ObservablePair>* p2p, std::vector<ObservablePair>* sd) {
  std::vector<ComponentStats> par(sensor_count), perp(sensor_count);
  for (const auto& sample : samples)
    for (size_t i = 0; i < sensor_count && i < sample.per_sensor.size(); ++i)
      if (sample.per_sensor[i]) {
        par[i].add(sample.per_sensor[i]->f_par);
        perp[i].add(sample.per_sensor[i]->f_perp);
      }
  p2p->resize(sensor_count);
  sd->resize(sensor_count);
  for (size_t i = 0; i < sensor_count; ++i) {
    (*p2p)[i] = {par[i].peak_to_peak(), perp[i].peak_to_peak()};
    (*sd)[i] = {par[i].standard_deviation(), perp[i].standard_deviation()};
  }
}

}  // namespace detail

// Full spectral-diffusion decomposition:
//   1. subtract sensor cross-talk (when ionization traces are supplied),
//   2. rebuild per-cluster occupancy from the assigned events and subtract
//      each cluster's mean contribution (relative to epoch 0),
//   3. estimate the per-sensor quiescent baseline and fit the leftover
//      deviations with a per-epoch uniform background field (optional),
//   4. subtract the background response, leaving corrected spectra.
// The corrected spectra satisfy, epoch by epoch and component by component,
//   corrected + background_response + resolved_shift + cross_talk == input
// up to floating-point rounding, because every layer is an explicit subtraction.
inline DecompositionReport run_decomposition(
    const std::vector<sim::SpectralSample>& samples, const std::vector<NVSensor>& sensors,
    const std::vector<events::DefectCluster>& clusters,
    const std::vector<events::EventAssignment>& assignments,
    const std::vector<SensorChargeTrace>& sensor_traces = {},
    bool estimate_background = true, const PhysicsConstants& constants = {}) {
  DecompositionReport report;
  const size_t n = sensors.size();

  report.mutual_subtracted =
      sensor_traces.empty()
          ? samples
          : subtract_sensor_mutual_fields(samples, sensor_traces, sensors, constants);

  std::vector<int> epochs(samples.size());
  for (size_t t = 0; t < samples.size(); ++t) epochs[t] = samples[t].epoch;
  report.traces = reconstruct_traces(assignments, epochs, static_cast<int>(clusters.size()));

  // Telegraph layer removed.
  std::vector<sim::SpectralSample> detrended = report.mutual_subtracted;
  for (size_t t = 0; t < detrended.size(); ++t) {
    const Eigen::VectorXd shift =
        resolved_shift_vector(clusters, report.traces, static_cast<int>(t), static_cast<int>(n));
    for (size_t i = 0; i < n && i < detrended[t].per_sensor.size(); ++i)
      if (detrended[t].per_sensor[i])
        *detrended[t].per_sensor[i] -=
            ObservablePair{shift[2 * static_cast<int>(i)], shift[2 * static_cast<int>(i) + 1]};
  }

  // Quiescent baseline: the per-sensor mean of the detrended spectra.
  report.baseline.assign(n, ObservablePair{});
  {
    std::vector<int> counts(n, 0);
    for (const auto& sample : detrended)
      for (size_t i = 0; i < n && i < sample.per_sensor.size(); ++i)
        if (sample.per_sensor[i]) {
          report.baseline[i] += *sample.per_sensor[i];
          ++counts[i];
        }
    for (size_t i = 0; i < n; ++i)
      if (counts[i] > 0)
        report.baseline[i] = {report.baseline[i].f_par / counts[i],
                              report.baseline[i].f_perp / counts[i]};
  }

  if (estimate_background) {
    std::vector<sim::SpectralSample> deviations = detrended;
    for (auto& sample : deviations)
      for (size_t i = 0; i < n && i < sample.per_sensor.size(); ++i)
        if (sample.per_sensor[i]) *sample.per_sensor[i] -= report.baseline[i];
    report.background = fit_background(deviations, sensors);
  } else {
    report.background.field_vcm.resize(samples.size());
    report.background.partial.assign(samples.size(), 0);
    report.background.residual_rms_mhz.assign(samples.size(),
                                              std::numeric_limits<double>::quiet_NaN());
  }

  // Background layer removed -> corrected spectra.
  report.corrected = detrended;
  for (size_t t = 0; t < report.corrected.size(); ++t) {
    if (!report.background.field_vcm[t]) continue;
    for (size_t i = 0; i < n && i < report.corrected[t].per_sensor.size(); ++i)
      if (report.corrected[t].per_sensor[i])
        *report.corrected[t].per_sensor[i] -=
            linearized_shift(*report.background.field_vcm[t], sensors[i]);
  }

  detail::scatter_stats(samples, n, &report.peak_to_peak_before, &report.std_before);
  detail::scatter_stats(report.corrected, n, &report.peak_to_peak_after, &report.std_after);
  return report;
}

}  // namespace qpskit::decomp
