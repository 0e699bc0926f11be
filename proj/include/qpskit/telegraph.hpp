#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qpskit/core_model.hpp"
#include "qpskit/errors.hpp"

namespace qpskit::sim {

// A charge trap that hops between two states: neutral (contributes no field)
// and occupied (contributes a point-charge field of `charge_e`). Per epoch it
// flips state with probability `flip_prob`, independently of everything else
// (a symmetric two-state Markov chain, i.e. a random telegraph process).
struct PointDefect {
  int id = 0;
  Vec3 position_nm = Vec3::Zero();
  double charge_e = -1.0;
  double flip_prob = 0.0;
  bool initially_occupied = false;
};

// Occupancy history of one defect: occupancy[t] is 1 when the defect carries
// its charge during epoch t.
struct ChargeTrace {
  int defect_id = 0;
  std::vector<std::uint8_t> occupancy;
};

// Measurement imperfections. sigma_f is the per-observable Gaussian noise in
// MHz (applied independently to f_par and f_perp); missing_prob is the chance
// that a sensor reports nothing in a given epoch. missing_prob == 1 is legal
// for the single-epoch primitive (everything absent) but rejected for full
// runs, which would contain no data.
struct NoiseModel {
  double sigma_f_mhz = 1.0;
  double missing_prob = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(sigma_f_mhz > 0.0)) throw ConfigInvalid("noise.sigma_f_mhz: must be > 0");
    if (!(missing_prob >= 0.0 && missing_prob <= 1.0))
      throw ConfigInvalid("noise.missing_prob: must be in [0, 1]");
  }
};

// Slowly drifting common-mode background field, modeled as a stationary AR(1)
// process per global component: B_t = rho * B_{t-1} + sigma sqrt(1-rho^2) z_t,
// with marginal standard deviation `sigma_vcm` per component.
struct BackgroundModel {
  bool enabled = false;
  double sigma_vcm = 0.0;
  double correlation = 0.98;

  void validate() const {
    if (!enabled) return;
    if (!(sigma_vcm >= 0.0)) throw ConfigInvalid("background.sigma_vcm: must be >= 0");
    if (!(correlation >= 0.0 && correlation < 1.0))
      throw ConfigInvalid("background.correlation: must be in [0, 1)");
  }
};

// One epoch of data: for each sensor either an observable pair or nothing.
struct SpectralSample {
  int epoch = 0;
  std::vector<std::optional<ObservablePair>> per_sensor;
};

struct SimConfig {
  std::vector<NVSensor> sensors;
  std::vector<PointDefect> defects;
  int epochs = 0;
  NoiseModel noise;
  BackgroundModel background;
  PhysicsConstants constants;

  void validate() const {
    if (sensors.empty()) throw ConfigInvalid("sim.sensors: need at least one sensor");
    for (size_t i = 0; i < sensors.size(); ++i)
      for (size_t j = i + 1; j < sensors.size(); ++j)
        if (sensors[i].id() == sensors[j].id())
          throw ConfigInvalid("sim.sensors: duplicate sensor id " +
                              std::to_string(sensors[i].id()));
    for (const auto& d : defects) {
      if (!(d.flip_prob >= 0.0 && d.flip_prob <= 1.0))
        throw ConfigInvalid("defect " + std::to_string(d.id) +
                            ": flip_prob must be in [0, 1]");
      for (const auto& s : sensors)
        if ((d.position_nm - s.position()).norm() <= kMinSeparationNm)
          throw ConfigInvalid("defect " + std::to_string(d.id) +
                              ": closer than the minimum separation to sensor " +
                              std::to_string(s.id()));
    }
    if (epochs < 0) throw ConfigInvalid("sim.epochs: must be >= 0");
    noise.validate();
    if (epochs > 0 && !(noise.missing_prob < 1.0))
      throw ConfigInvalid("noise.missing_prob: must be < 1 for a full run");
    background.validate();
    constants.validate();
  }
};

// Complete simulation output, including the ground truth needed for accuracy
// assessment downstream.
struct SimRun {
  std::vector<NVSensor> sensors;
  std::vector<PointDefect> defects;
  std::vector<ChargeTrace> traces;                 // one per defect
  std::vector<SpectralSample> samples;             // one per epoch
  std::vector<Vec3> background_field;              // per epoch; empty if disabled
  NoiseModel noise;
  PhysicsConstants constants;
};

// Advances every defect's occupancy by one epoch. Consumes exactly one
// uniform draw per defect, in defect order.
inline std::vector<std::uint8_t> step_charges(const std::vector<PointDefect>& defects,
                                              const std::vector<std::uint8_t>& previous,
                                              std::mt19937_64& rng) {
  if (previous.size() != defects.size())
    throw ConfigInvalid("step_charges: occupancy size does not match defect count");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<std::uint8_t> next(previous.size());
  for (size_t i = 0; i < defects.size(); ++i) {
    const bool flip = u01(rng) < defects[i].flip_prob;
    next[i] = flip ? static_cast<std::uint8_t>(1 - previous[i]) : previous[i];
  }
  return next;
}

// Total electric field (global frame) at one sensor from the occupied subset
// of defects plus the background, summed in defect order.
inline Vec3 field_at_sensor(const NVSensor& sensor, const std::vector<PointDefect>& defects,
                            const std::vector<std::uint8_t>& occupancy,
                            const Vec3& background_vcm, const PhysicsConstants& constants) {
  Vec3 field = background_vcm;
  for (size_t i = 0; i < defects.size(); ++i)
    if (occupancy[i])
      field += coulomb_field(defects[i].position_nm, defects[i].charge_e,
                             sensor.position(), constants);
  return field;
}

// Measures every sensor once. Draw order per sensor: one uniform for the
// missing-data decision; if the sensor reports, two Gaussians (f_par then
// f_perp). Missing sensors consume no Gaussian draws.
inline SpectralSample measure_epoch(const std::vector<NVSensor>& sensors,
                                    const std::vector<PointDefect>& defects,
                                    const std::vector<std::uint8_t>& occupancy,
                                    const Vec3& background_vcm, const NoiseModel& noise,
                                    const PhysicsConstants& constants, int epoch,
                                    std::mt19937_64& rng) {
  noise.validate();
  if (occupancy.size() != defects.size())
    throw ConfigInvalid("measure_epoch: occupancy size does not match defect count");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, noise.sigma_f_mhz);
  SpectralSample sample;
  sample.epoch = epoch;
  sample.per_sensor.resize(sensors.size());
  for (size_t i = 0; i < sensors.size(); ++i) {
    if (u01(rng) < noise.missing_prob) continue;  // sensor silent this epoch
    const Vec3 field = field_at_sensor(sensors[i], defects, occupancy, background_vcm, constants);
    ObservablePair obs = sensors[i].static_observables() + exact_shift(field, sensors[i]);
    obs.f_par += gauss(rng);
    obs.f_perp += gauss(rng);
    sample.per_sensor[i] = obs;
  }
  return sample;
}

// Runs the full generative model. Reproducibility contract: a single
// mt19937_64 seeded with noise.rng_seed drives everything, with a fixed draw
// order — background initialization (3 Gaussians, if enabled), then per epoch:
// charge flips (epoch > 0), background step (3 Gaussians, if enabled),
// measurement (see measure_epoch). Identical configs give identical bits.
inline SimRun run_simulation(const SimConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.noise.rng_seed);
  std::normal_distribution<double> unit_gauss(0.0, 1.0);

  SimRun run;
  run.sensors = config.sensors;
  run.defects = config.defects;
  run.noise = config.noise;
  run.constants = config.constants;
  run.traces.resize(config.defects.size());
  for (size_t i = 0; i < config.defects.size(); ++i) {
    run.traces[i].defect_id = config.defects[i].id;
    run.traces[i].occupancy.reserve(static_cast<size_t>(config.epochs));
  }
  run.samples.reserve(static_cast<size_t>(config.epochs));

  Vec3 background = Vec3::Zero();
  if (config.background.enabled) {
    for (int c = 0; c < 3; ++c) background[c] = config.background.sigma_vcm * unit_gauss(rng);
    run.background_field.reserve(static_cast<size_t>(config.epochs));
  }

  std::vector<std::uint8_t> occupancy(config.defects.size());
  for (size_t i = 0; i < config.defects.size(); ++i)
    occupancy[i] = config.defects[i].initially_occupied ? 1 : 0;

  const double rho = config.background.correlation;
  const double innovation = config.background.sigma_vcm * std::sqrt(1.0 - rho * rho);
  for (int t = 0; t < config.epochs; ++t) {
    if (t > 0) {
      occupancy = step_charges(config.defects, occupancy, rng);
      if (config.background.enabled)
        for (int c = 0; c < 3; ++c) background[c] = rho * background[c] + innovation * unit_gauss(rng);
    }
    for (size_t i = 0; i < config.defects.size(); ++i)
      run.traces[i].occupancy.push_back(occupancy[i]);
    if (config.background.enabled) run.background_field.push_back(background);
    run.samples.push_back(measure_epoch(config.sensors, config.defects, occupancy, background,
                                        config.noise, config.constants, t, rng));
  }
  return run;
}

}  // namespace qpskit::sim
