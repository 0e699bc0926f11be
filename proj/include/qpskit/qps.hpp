#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "qpskit/core_model.hpp"
#include "qpskit/errors.hpp"
#include "qpskit/events.hpp"
#include "qpskit/levmar.hpp"
#include "qpskit/parallel.hpp"
#include "qpskit/stats.hpp"

namespace qpskit::qps {

// Observable shift vector (f_par, f_perp per sensor, stacked) produced by a
// point charge of `charge_e` at `defect_pos`, on top of each sensor's static
// bias. This is the forward model the position fit inverts.
inline Eigen::VectorXd forward_observables(const Vec3& defect_pos, double charge_e,
                                           const std::vector<NVSensor>& sensors,
                                           const PhysicsConstants& constants = {}) {
  Eigen::VectorXd out(2 * static_cast<int>(sensors.size()));
  for (size_t i = 0; i < sensors.size(); ++i) {
    const ObservablePair p = exact_shift(
        coulomb_field(defect_pos, charge_e, sensors[i].position(), constants), sensors[i]);
    out[2 * static_cast<int>(i)] = p.f_par;
    out[2 * static_cast<int>(i) + 1] = p.f_perp;
  }
  return out;
}

// Analytic derivative of forward_observables with respect to the charge
// position (rows: components, columns: x, y, z). Uses the point-charge field
// gradient dE/dr = kappa (3 s s^T / d^5 - I / d^3) with s = sensor - charge;
// the splitting row follows the chain rule through the transverse magnitude.
inline Eigen::Matrix<double, Eigen::Dynamic, 3> forward_jacobian(
    const Vec3& defect_pos, double charge_e, const std::vector<NVSensor>& sensors,
    const PhysicsConstants& constants = {}) {
  Eigen::Matrix<double, Eigen::Dynamic, 3> jac(2 * static_cast<int>(sensors.size()), 3);
  for (size_t i = 0; i < sensors.size(); ++i) {
    const NVSensor& sensor = sensors[i];
    const Vec3 s = sensor.position() - defect_pos;
    const double d = s.norm();
    if (!(d > kMinSeparationNm))
      throw DegenerateGeometry("forward_jacobian: charge within minimum separation of sensor " +
                               std::to_string(sensor.id()));
    const double kappa = constants.coulomb_prefactor * charge_e / constants.epsilon_r;
    const double d3 = d * d * d;
    const Eigen::Matrix3d field_grad =
        kappa * (3.0 / (d3 * d * d) * (s * s.transpose()) - Eigen::Matrix3d::Identity() / d3);
    const Vec3 field = kappa / d3 * s;

    const Vec3 grad_par = sensor.d_par() * (field_grad * sensor.frame().z_hat());
    const Vec2 u = sensor.strain_perp() + Vec2(sensor.frame().x_hat().dot(field),
                                               sensor.frame().y_hat().dot(field));
    const double umag = u.norm();
    Vec3 dir;
    if (umag > 1e-300) {
      dir = (u.x() * sensor.frame().x_hat() + u.y() * sensor.frame().y_hat()) / umag;
    } else {
      // Transverse field exactly cancels the bias; fall back to the bias
      // direction (the derivative is discontinuous at this measure-zero point).
      dir = sensor.transverse_axis();
    }
    const Vec3 grad_perp = sensor.d_perp() * (field_grad * dir);
    jac.row(2 * static_cast<int>(i)) = grad_par.transpose();
    jac.row(2 * static_cast<int>(i) + 1) = grad_perp.transpose();
  }
  return jac;
}

// Central-difference Jacobian of the same forward model: the independent
// cross-check route for the analytic gradients above.
inline Eigen::Matrix<double, Eigen::Dynamic, 3> forward_jacobian_fd(
    const Vec3& defect_pos, double charge_e, const std::vector<NVSensor>& sensors,
    const PhysicsConstants& constants = {}, double step_nm = 1e-3) {
  Eigen::Matrix<double, Eigen::Dynamic, 3> jac(2 * static_cast<int>(sensors.size()), 3);
  for (int axis = 0; axis < 3; ++axis) {
    Vec3 lo = defect_pos, hi = defect_pos;
    lo[axis] -= step_nm;
    hi[axis] += step_nm;
    jac.col(axis) = (forward_observables(hi, charge_e, sensors, constants) -
                     forward_observables(lo, charge_e, sensors, constants)) /
                    (2.0 * step_nm);
  }
  return jac;
}

// The measured quantity a position fit inverts: per-component values,
// 1-sigma uncertainties, and a validity mask (all length 2 * sensor count).
struct FitTarget {
  Eigen::VectorXd values;
  Eigen::VectorXd sigmas;
  std::vector<std::uint8_t> valid;
};

// Builds the fit target from a cluster: the mean jump vector, with
// per-component uncertainty sqrt(2) * sigma_f / sqrt(count).
// Per-component uncertainty of a cluster mean: the larger of the differenced
// measurement noise and the observed member scatter, averaged down by the
// repeat count, plus a systematic floor that does not average down. The floor
// covers effects that shift a mean without widening it — coincident flips of
// other defects and the drift of the transverse bias point they cause.
// A negative `systematic_floor_mhz` selects the default, half the differenced
// component noise.
inline FitTarget make_fit_target(const events::DefectCluster& cluster,
                                 const sim::NoiseModel& noise,
                                 double systematic_floor_mhz = -1.0) {
  noise.validate();
  const double floor_mhz = systematic_floor_mhz >= 0.0
                               ? systematic_floor_mhz
                               : 0.5 * events::diff_component_sigma(noise);
  FitTarget target;
  const int dim = static_cast<int>(cluster.mean_vector.size());
  target.values = cluster.mean_vector;
  target.sigmas = Eigen::VectorXd::Zero(dim);
  target.valid.assign(static_cast<size_t>(dim), 0);
  const double noise_var = events::diff_component_sigma(noise) * events::diff_component_sigma(noise);
  for (int c = 0; c < dim; ++c) {
    const int k = cluster.component_count[static_cast<size_t>(c)];
    if (k < 1) continue;
    target.valid[static_cast<size_t>(c)] = 1;
    const double scatter =
        c < cluster.vector_std.size() ? cluster.vector_std[c] : 0.0;
    const double mean_var = std::max(noise_var, scatter * scatter) / static_cast<double>(k);
    target.sigmas[c] = std::sqrt(mean_var + floor_mhz * floor_mhz);
  }
  return target;
}

struct SolverConfig {
  levmar::Options levmar;
  double significance = 0.05;        // goodness-of-fit acceptance level
  double shell_near = 0.5;           // near multistart shell, x mean spacing
  double shell_far = 2.0;            // far multistart shell, x mean spacing
  double grid_halfwidth_factor = 6.0;  // coarse-scan halfwidth, x mean spacing
  int grid_points_per_axis = 11;     // coarse-scan resolution
  double polarity_tie_rel = 1e-9;    // relative objective gap treated as a tie
  double condition_limit = 1e12;     // information-matrix condition bound
  double charge_magnitude_e = 1.0;   // |q| assumed in the fit
  double aspect_limit = 2.5;         // max sigma_principal[2] / sigma_3d to accept
  std::vector<Vec3> extra_starts;

  void validate() const {
    if (!(significance > 0.0 && significance < 1.0))
      throw ConfigInvalid("solver.significance: must be in (0, 1)");
    if (!(shell_near > 0.0) || !(shell_far > 0.0))
      throw ConfigInvalid("solver.shells: must be > 0");
    if (!(grid_halfwidth_factor > 0.0))
      throw ConfigInvalid("solver.grid_halfwidth_factor: must be > 0");
    if (grid_points_per_axis < 2)
      throw ConfigInvalid("solver.grid_points_per_axis: must be >= 2");
    if (!(polarity_tie_rel >= 0.0))
      throw ConfigInvalid("solver.polarity_tie_rel: must be >= 0");
    if (!(condition_limit > 1.0))
      throw ConfigInvalid("solver.condition_limit: must be > 1");
    if (!(charge_magnitude_e > 0.0))
      throw ConfigInvalid("solver.charge_magnitude_e: must be > 0");
    if (!(aspect_limit > 1.0))
      throw ConfigInvalid("solver.aspect_limit: must be > 1");
  }
};

struct LocalizationResult {
  Vec3 position = Vec3::Zero();
  double objective = std::numeric_limits<double>::infinity();
  int dof = 0;
  double p_value = 0.0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
  std::array<double, 3> sigma_principal{};  // ascending
  double sigma_3d = 0.0;                    // geometric mean of the principal sigmas
  double fwhm = 0.0;                        // 2 sqrt(2 ln 2) * sigma_3d
  int polarity = -1;                        // sign of the fitted charge
  bool polarity_ambiguous = false;
  bool covariance_unreliable = false;
  bool converged = false;
  int iterations = 0;
  int starts_tried = 0;
};

namespace detail {

// Mean pairwise sensor distance; the geometric scale of the array.
inline double mean_spacing(const std::vector<NVSensor>& sensors) {
  double sum = 0.0;
  int pairs = 0;
  for (size_t i = 0; i < sensors.size(); ++i)
    for (size_t j = i + 1; j < sensors.size(); ++j) {
      sum += (sensors[i].position() - sensors[j].position()).norm();
      ++pairs;
    }
  return pairs > 0 ? sum / pairs : 100.0;
}

inline Vec3 sensor_centroid(const std::vector<NVSensor>& sensors) {
  Vec3 c = Vec3::Zero();
  for (const auto& s : sensors) c += s.position();
  return sensors.empty() ? c : Vec3(c / static_cast<double>(sensors.size()));
}

}  // namespace detail

// Weighted-least-squares localization of one point charge from a measured
// shift vector. Runs a damped Gauss-Newton fit from a deterministic set of
// start points (sensor centroid; 26 cube directions alternating between a
// near and a far shell; the best cell of a coarse grid scan; any extra
// starts), for both charge polarities, and keeps the lowest objective.
// Reports the goodness-of-fit p-value and the Gaussian position uncertainty
// from the information matrix at the optimum.
inline LocalizationResult localize(const FitTarget& target,
                                   const std::vector<NVSensor>& sensors,
                                   const SolverConfig& config = {},
                                   const PhysicsConstants& constants = {}) {
  config.validate();
  constants.validate();
  if (sensors.empty()) throw ConfigInvalid("localize: need at least one sensor");
  const int dim = 2 * static_cast<int>(sensors.size());
  if (target.values.size() != dim || target.sigmas.size() != dim ||
      static_cast<int>(target.valid.size()) != dim)
    throw ConfigInvalid("localize: target size does not match the sensor list");

  std::vector<int> comps;
  for (int c = 0; c < dim; ++c)
    if (target.valid[static_cast<size_t>(c)]) {
      if (!(target.sigmas[c] > 0.0))
        throw ConfigInvalid("localize: valid components need sigma > 0");
      comps.push_back(c);
    }
  const int m = static_cast<int>(comps.size());
  if (m < 4)
    throw ConfigInvalid("localize: need at least 4 valid components, got " +
                        std::to_string(m));

  // Feasibility guard: keep trial positions outside the physical exclusion
  // zone around every sensor (with a sliver of margin so the guarded field
  // evaluation cannot throw).
  auto feasible = [&](const Vec3& x) {
    for (const auto& s : sensors)
      if ((x - s.position()).norm() <= kMinSeparationNm * (1.0 + 1e-9)) return false;
    return true;
  };

  auto make_model = [&](double charge) {
    return [&, charge](const Vec3& x, Eigen::VectorXd& r,
                       Eigen::Matrix<double, Eigen::Dynamic, 3>* jac) -> bool {
      if (!feasible(x)) return false;
      const Eigen::VectorXd f = forward_observables(x, charge, sensors, constants);
      r.resize(m);
      for (int k = 0; k < m; ++k)
        r[k] = (f[comps[static_cast<size_t>(k)]] - target.values[comps[static_cast<size_t>(k)]]) /
               target.sigmas[comps[static_cast<size_t>(k)]];
      if (jac) {
        const auto full = forward_jacobian(x, charge, sensors, constants);
        jac->resize(m, 3);
        for (int k = 0; k < m; ++k)
          jac->row(k) = full.row(comps[static_cast<size_t>(k)]) /
                        target.sigmas[comps[static_cast<size_t>(k)]];
      }
      return true;
    };
  };

  // Deterministic start set.
  const double spacing = detail::mean_spacing(sensors);
  const Vec3 centroid = detail::sensor_centroid(sensors);
  std::vector<Vec3> starts;
  starts.push_back(centroid);
  {
    int index = 0;
    for (int i = -1; i <= 1; ++i)
      for (int j = -1; j <= 1; ++j)
        for (int k = -1; k <= 1; ++k) {
          if (i == 0 && j == 0 && k == 0) continue;
          const Vec3 dir = Vec3(i, j, k).normalized();
          const double radius =
              (index % 2 == 0 ? config.shell_near : config.shell_far) * spacing;
          starts.push_back(centroid + radius * dir);
          ++index;
        }
  }
  // Coarse objective scan; its best cell joins the start set. Polarity does
  // not matter for picking a basin representative consistently, so scan with
  // the negative-charge model.
  {
    auto model = make_model(-config.charge_magnitude_e);
    const double half = config.grid_halfwidth_factor * spacing;
    const int g = config.grid_points_per_axis;
    double best = std::numeric_limits<double>::infinity();
    Vec3 best_point = centroid;
    Eigen::VectorXd r;
    for (int a = 0; a < g; ++a)
      for (int b = 0; b < g; ++b)
        for (int c = 0; c < g; ++c) {
          const Vec3 p = centroid + Vec3(-half + 2.0 * half * a / (g - 1),
                                         -half + 2.0 * half * b / (g - 1),
                                         -half + 2.0 * half * c / (g - 1));
          if (!model(p, r, nullptr)) continue;
          const double obj = r.squaredNorm();
          if (obj < best) {
            best = obj;
            best_point = p;
          }
        }
    if (std::isfinite(best)) starts.push_back(best_point);
  }
  for (const auto& p : config.extra_starts) starts.push_back(p);

  // Fit both polarities from every start.
  LocalizationResult result;
  double objective_by_sign[2] = {std::numeric_limits<double>::infinity(),
                                 std::numeric_limits<double>::infinity()};
  levmar::Outcome outcome_by_sign[2];
  for (int si = 0; si < 2; ++si) {
    const double charge = (si == 0 ? -1.0 : 1.0) * config.charge_magnitude_e;
    auto model = make_model(charge);
    for (const auto& start : starts) {
      ++result.starts_tried;
      const auto outcome = levmar::minimize(model, start, config.levmar);
      if (!outcome.feasible || !outcome.converged) continue;
      if (outcome.objective < objective_by_sign[si]) {
        objective_by_sign[si] = outcome.objective;
        outcome_by_sign[si] = outcome;
      }
    }
  }
  const bool has_neg = std::isfinite(objective_by_sign[0]);
  const bool has_pos = std::isfinite(objective_by_sign[1]);
  if (!has_neg && !has_pos)
    throw NoConvergence("localize: no start point converged for either polarity");
  int si_best;
  if (has_neg && has_pos) {
    const double gap = std::abs(objective_by_sign[0] - objective_by_sign[1]);
    const double scale = std::max({objective_by_sign[0], objective_by_sign[1], 1e-300});
    if (gap <= config.polarity_tie_rel * scale) {
      result.polarity_ambiguous = true;
      si_best = 0;  // deterministic choice: the assumed (negative) species
    } else {
      si_best = objective_by_sign[0] <= objective_by_sign[1] ? 0 : 1;
    }
  } else {
    si_best = has_neg ? 0 : 1;
  }
  const auto& best = outcome_by_sign[si_best];
  result.polarity = si_best == 0 ? -1 : +1;
  result.position = best.position;
  result.objective = best.objective;
  result.converged = true;
  result.iterations = best.iterations;
  result.dof = m - 3;
  result.p_value = chi_squared_survival(result.objective, result.dof);

  // Gaussian uncertainty from the weighted information matrix at the optimum.
  const double charge = result.polarity * config.charge_magnitude_e;
  const auto full = forward_jacobian(result.position, charge, sensors, constants);
  Eigen::Matrix<double, Eigen::Dynamic, 3> jw(m, 3);
  for (int k = 0; k < m; ++k)
    jw.row(k) = full.row(comps[static_cast<size_t>(k)]) /
                target.sigmas[comps[static_cast<size_t>(k)]];
  const Eigen::Matrix3d info = jw.transpose() * jw;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(info);
  const Eigen::Vector3d lambda = es.eigenvalues();  // ascending
  const double lambda_max = lambda[2];
  if (!(lambda_max > 0.0)) {
    result.covariance_unreliable = true;
    result.covariance = Eigen::Matrix3d::Constant(std::numeric_limits<double>::infinity());
    result.sigma_principal = {std::numeric_limits<double>::infinity(),
                              std::numeric_limits<double>::infinity(),
                              std::numeric_limits<double>::infinity()};
    result.sigma_3d = std::numeric_limits<double>::infinity();
    result.fwhm = std::numeric_limits<double>::infinity();
    return result;
  }
  const double floor = lambda_max / config.condition_limit;
  result.covariance_unreliable = lambda[0] < floor;
  Eigen::Vector3d inv;
  for (int i = 0; i < 3; ++i) inv[i] = 1.0 / std::max(lambda[i], floor);
  result.covariance =
      es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  result.sigma_principal = principal_sigmas(result.covariance);
  result.sigma_3d = sigma_3d_bar(result.sigma_principal);
  result.fwhm = fwhm_from_sigma(result.sigma_3d);
  return result;
}

// Expected localization FWHM for a hypothetical charge at `pos`, given a
// per-component measurement sigma (same units as the observables). Computed
// from the analytic information matrix; returns +infinity where the geometry
// leaves a direction unconstrained (information matrix singular beyond the
// condition limit).
inline double localization_fwhm_at(const Vec3& pos, const std::vector<NVSensor>& sensors,
                                   double sigma_mhz, const PhysicsConstants& constants = {},
                                   double charge_e = -1.0, double condition_limit = 1e12) {
  if (!(sigma_mhz > 0.0))
    throw ConfigInvalid("localization_fwhm_at: sigma must be > 0");
  const auto jac = forward_jacobian(pos, charge_e, sensors, constants);
  const Eigen::Matrix3d info = jac.transpose() * jac / (sigma_mhz * sigma_mhz);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(info);
  const Eigen::Vector3d lambda = es.eigenvalues();
  if (!(lambda[2] > 0.0) || lambda[0] <= lambda[2] / condition_limit)
    return std::numeric_limits<double>::infinity();
  // sigma_3d = (l0 l1 l2)^(-1/6); FWHM scales it by 2 sqrt(2 ln 2).
  return kGaussianFwhmFactor * std::pow(lambda[0] * lambda[1] * lambda[2], -1.0 / 6.0);
}

// Axis-aligned voxel grid. Voxel (ix, iy, iz) has its center at
// origin + spacing * (ix, iy, iz).
struct GridSpec {
  Vec3 origin_nm = Vec3::Zero();
  double spacing_nm = 1.0;
  std::array<int, 3> dims{1, 1, 1};

  void validate() const {
    if (!(spacing_nm > 0.0)) throw ConfigInvalid("grid.spacing_nm: must be > 0");
    for (int d : dims)
      if (d < 1) throw ConfigInvalid("grid.dims: each dimension must be >= 1");
  }
  long long voxel_count() const {
    return static_cast<long long>(dims[0]) * dims[1] * dims[2];
  }
  Vec3 center(int ix, int iy, int iz) const {
    return origin_nm + spacing_nm * Vec3(ix, iy, iz);
  }
};

// Map of expected localization FWHM over a voxel grid. Voxels inside the
// physical exclusion zone of a sensor hold NaN; geometrically unconstrained
// voxels hold +infinity.
struct AccuracyMap {
  GridSpec grid;
  std::vector<double> fwhm_nm;  // x fastest: index = ix + dims0*(iy + dims1*iz)

  double at(int ix, int iy, int iz) const {
    return fwhm_nm[static_cast<size_t>(ix) +
                   static_cast<size_t>(grid.dims[0]) *
                       (static_cast<size_t>(iy) +
                        static_cast<size_t>(grid.dims[1]) * static_cast<size_t>(iz))];
  }
};

// Evaluates localization_fwhm_at over the grid, in parallel across the
// QPSKIT_THREADS budget. Deterministic: each voxel value depends only on its
// own coordinates.
inline AccuracyMap accuracy_map(const std::vector<NVSensor>& sensors, double sigma_mhz,
                                const GridSpec& grid, const PhysicsConstants& constants = {},
                                double charge_e = -1.0) {
  grid.validate();
  if (sensors.empty()) throw ConfigInvalid("accuracy_map: need at least one sensor");
  AccuracyMap map;
  map.grid = grid;
  map.fwhm_nm.assign(static_cast<size_t>(grid.voxel_count()), 0.0);
  const long long nx = grid.dims[0], ny = grid.dims[1];
  parallel_for(grid.voxel_count(), [&](long long idx) {
    const int ix = static_cast<int>(idx % nx);
    const int iy = static_cast<int>((idx / nx) % ny);
    const int iz = static_cast<int>(idx / (nx * ny));
    const Vec3 p = grid.center(ix, iy, iz);
    bool excluded = false;
    for (const auto& s : sensors)
      if ((p - s.position()).norm() <= kMinSeparationNm) {
        excluded = true;
        break;
      }
    map.fwhm_nm[static_cast<size_t>(idx)] =
        excluded ? std::numeric_limits<double>::quiet_NaN()
                 : localization_fwhm_at(p, sensors, sigma_mhz, constants, charge_e);
  });
  return map;
}

// Voxel count and volume of the region where the expected FWHM is at or
// below `threshold_nm` (NaN and infinite voxels never qualify).
struct IsoRegion {
  double threshold_nm = 0.0;
  long long voxels = 0;
  double volume_nm3 = 0.0;
};

inline IsoRegion isoregion_volume(const AccuracyMap& map, double threshold_nm) {
  IsoRegion region;
  region.threshold_nm = threshold_nm;
  for (double f : map.fwhm_nm)
    if (std::isfinite(f) && f <= threshold_nm) ++region.voxels;
  const double s = map.grid.spacing_nm;
  region.volume_nm3 = static_cast<double>(region.voxels) * s * s * s;
  return region;
}

}  // namespace qpskit::qps
