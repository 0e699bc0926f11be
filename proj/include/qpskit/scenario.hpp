#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qpskit/core_model.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::sim {

// Defaults for the reference measurement scenario: a micron-scale ball of
// two-state traps around a small sensor array.
struct ScenarioSpec {
  int defect_count = 16;
  double ball_radius_nm = 1000.0;
  double sensor_exclusion_nm = 20.0;
  double flip_prob_min = 0.005;
  double flip_prob_max = 0.05;
  double charge_e = -1.0;

  void validate() const {
    if (defect_count < 0) throw ConfigInvalid("scenario.defect_count: must be >= 0");
    if (!(ball_radius_nm > 0.0)) throw ConfigInvalid("scenario.ball_radius_nm: must be > 0");
    if (!(sensor_exclusion_nm >= kMinSeparationNm))
      throw ConfigInvalid("scenario.sensor_exclusion_nm: must be >= the minimum separation");
    if (!(flip_prob_min >= 0.0 && flip_prob_max <= 1.0 && flip_prob_min <= flip_prob_max))
      throw ConfigInvalid("scenario.flip_prob range: need 0 <= min <= max <= 1");
  }
};

// Builds the default sensor array: `count` sensors evenly spaced on a circle
// in the z = 0 plane (for count == 3 this is an equilateral triangle with the
// requested side length, centered on the origin), with symmetry axes cycling
// through the four body-diagonal orientations of the host lattice. The static
// transverse bias points along each sensor's local x axis with magnitude
// strain_mhz / d_perp, so the quiescent splitting is `strain_mhz`.
inline std::vector<NVSensor> default_sensor_array(int count = 3, double spacing_nm = 200.0,
                                                  double strain_mhz = 1000.0,
                                                  double d_par = kDefaultDParMHzPerVcm,
                                                  double d_perp = kDefaultDPerpMHzPerVcm) {
  if (count < 1) throw ConfigInvalid("sensor array: count must be >= 1");
  if (!(spacing_nm > 0.0)) throw ConfigInvalid("sensor array: spacing_nm must be > 0");
  if (!(strain_mhz > 0.0)) throw ConfigInvalid("sensor array: strain_mhz must be > 0");
  const double s3 = std::sqrt(3.0);
  static const Vec3 axes[4] = {Vec3(1, 1, 1) / s3, Vec3(1, -1, -1) / s3,
                               Vec3(-1, 1, -1) / s3, Vec3(-1, -1, 1) / s3};
  // Circumradius giving nearest-neighbor spacing `spacing_nm` on the circle.
  const double radius =
      count == 1 ? 0.0 : spacing_nm / (2.0 * std::sin(std::numbers::pi / count));
  std::vector<NVSensor> sensors;
  sensors.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double phi = 2.0 * std::numbers::pi * i / count + std::numbers::pi / 2.0;
    const Vec3 pos(radius * std::cos(phi), radius * std::sin(phi), 0.0);
    sensors.emplace_back(i, pos, SensorFrame::from_z_axis(axes[i % 4]),
                         Vec2(strain_mhz / d_perp, 0.0), d_par, d_perp);
  }
  return sensors;
}

// Draws `spec.defect_count` defects uniformly from the ball of radius
// `ball_radius_nm` around the centroid of the sensor array, rejecting points
// within `sensor_exclusion_nm` of any sensor. Flip probabilities are uniform
// in [flip_prob_min, flip_prob_max]; initial occupancy is a fair coin. Draw
// order per defect: position (rejection-sampled triples), flip probability,
// initial state.
inline std::vector<PointDefect> generate_defects(const ScenarioSpec& spec,
                                                 const std::vector<NVSensor>& sensors,
                                                 std::mt19937_64& rng) {
  spec.validate();
  Vec3 centroid = Vec3::Zero();
  for (const auto& s : sensors) centroid += s.position();
  if (!sensors.empty()) centroid /= static_cast<double>(sensors.size());

  std::uniform_real_distribution<double> ucoord(-spec.ball_radius_nm, spec.ball_radius_nm);
  std::uniform_real_distribution<double> uflip(spec.flip_prob_min, spec.flip_prob_max);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<PointDefect> defects;
  defects.reserve(static_cast<size_t>(spec.defect_count));
  for (int k = 0; k < spec.defect_count; ++k) {
    Vec3 pos;
    for (;;) {
      pos = centroid + Vec3(ucoord(rng), ucoord(rng), ucoord(rng));
      if ((pos - centroid).norm() > spec.ball_radius_nm) continue;
      bool clear = true;
      for (const auto& s : sensors)
        if ((pos - s.position()).norm() < spec.sensor_exclusion_nm) {
          clear = false;
          break;
        }
      if (clear) break;
    }
    PointDefect d;
    d.id = k;
    d.position_nm = pos;
    d.charge_e = spec.charge_e;
    d.flip_prob = uflip(rng);
    d.initially_occupied = u01(rng) < 0.5;
    defects.push_back(d);
  }
  return defects;
}

// Seed salt separating scenario generation from the measurement stream, so a
// run with the same seed but different epoch count keeps the same geometry.
inline constexpr std::uint64_t kScenarioSeedSalt = 0x9e3779b97f4a7c15ull;

inline std::vector<PointDefect> generate_defects(const ScenarioSpec& spec,
                                                 const std::vector<NVSensor>& sensors,
                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ kScenarioSeedSalt);
  return generate_defects(spec, sensors, rng);
}

}  // namespace qpskit::sim
