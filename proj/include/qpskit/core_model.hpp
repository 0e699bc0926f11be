#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "qpskit/errors.hpp"
#include "qpskit/geometry.hpp"

namespace qpskit {

// Coulomb prefactor e / (4 pi eps0) expressed in V cm^-1 nm^2 per elementary
// charge, so that |E| = K * q / (eps_r * d^2) with d in nm gives V/cm.
// e = 1.602176634e-19 C (exact), eps0 = 8.8541878128e-12 F/m.
// 1 V/m * m^2 = 1e-2 V/cm * 1e18 nm^2 -> factor 1e16.
inline constexpr double kCoulombPrefactorVcmNm2 =
    1.602176634e-19 / (4.0 * std::numbers::pi * 8.8541878128e-12) * 1e16;

// Excited-state Stark susceptibilities, MHz per (V/cm).
inline constexpr double kDefaultDParMHzPerVcm = 1.42;
inline constexpr double kDefaultDPerpMHzPerVcm = 1.83;

// Relative permittivity of the diamond host.
inline constexpr double kDefaultEpsilonR = 5.7;

struct PhysicsConstants {
  double epsilon_r = kDefaultEpsilonR;
  double coulomb_prefactor = kCoulombPrefactorVcmNm2;

  PhysicsConstants() = default;
  PhysicsConstants(double eps_r, double prefactor = kCoulombPrefactorVcmNm2)
      : epsilon_r(eps_r), coulomb_prefactor(prefactor) {
    validate();
  }

  void validate() const {
    if (!(epsilon_r > 1.0))
      throw ConfigInvalid("constants.epsilon_r: must be > 1 (got " +
                          std::to_string(epsilon_r) + ")");
    if (!(coulomb_prefactor > 0.0))
      throw ConfigInvalid("constants.coulomb_prefactor: must be > 0");
  }
};

// The two spectroscopic observables of one sensor: the common-mode line
// position f_par = (f_ex + f_ey) / 2 and the splitting f_perp =
// (f_ex - f_ey) / 2, both in MHz. For absolute spectra f_perp >= 0 by the
// label convention; differential shifts may have either sign.
struct ObservablePair {
  double f_par = 0.0;
  double f_perp = 0.0;

  ObservablePair operator+(const ObservablePair& o) const {
    return {f_par + o.f_par, f_perp + o.f_perp};
  }
  ObservablePair operator-(const ObservablePair& o) const {
    return {f_par - o.f_par, f_perp - o.f_perp};
  }
  ObservablePair& operator+=(const ObservablePair& o) {
    f_par += o.f_par;
    f_perp += o.f_perp;
    return *this;
  }
  ObservablePair& operator-=(const ObservablePair& o) {
    f_par -= o.f_par;
    f_perp -= o.f_perp;
    return *this;
  }
};

// One field-sensitive point sensor: position, orientation frame, Stark
// susceptibilities, and the static transverse strain that biases the
// splitting. Strain is stored as an equivalent in-plane field (V/cm) in the
// sensor's local (x, y) coordinates; it must be nonzero because the direction
// of the splitting response is defined by it.
class NVSensor {
 public:
  NVSensor(int id, const Vec3& position_nm, const SensorFrame& frame,
           const Vec2& strain_perp_vcm,
           double d_par = kDefaultDParMHzPerVcm,
           double d_perp = kDefaultDPerpMHzPerVcm)
      : id_(id),
        position_(position_nm),
        frame_(frame),
        strain_perp_(strain_perp_vcm),
        d_par_(d_par),
        d_perp_(d_perp) {
    if (id_ < 0) throw ConfigInvalid("sensor.id: must be >= 0");
    if (!(d_par_ > 0.0)) throw ConfigInvalid("sensor.d_par: must be > 0");
    if (!(d_perp_ > 0.0)) throw ConfigInvalid("sensor.d_perp: must be > 0");
    if (!(strain_perp_.norm() > 0.0))
      throw ConfigInvalid("sensor.strain_perp: must be nonzero");
  }

  int id() const { return id_; }
  const Vec3& position() const { return position_; }
  const SensorFrame& frame() const { return frame_; }
  const Vec2& strain_perp() const { return strain_perp_; }
  double d_par() const { return d_par_; }
  double d_perp() const { return d_perp_; }

  // The static strain expressed as a global-frame field vector.
  Vec3 strain_perp_global() const {
    return frame_.to_global(Vec3(strain_perp_.x(), strain_perp_.y(), 0.0));
  }

  // Global unit vector along the static transverse bias; this is the
  // direction the linearized splitting responds to.
  Vec3 transverse_axis() const { return strain_perp_global().normalized(); }

  // Observables with no external field: par = 0 (the common-mode origin is
  // folded into the optical line center, which cancels in every use here),
  // perp = splitting from static strain alone.
  ObservablePair static_observables() const {
    return {0.0, d_perp_ * strain_perp_.norm()};
  }

 private:
  int id_;
  Vec3 position_;
  SensorFrame frame_;
  Vec2 strain_perp_;
  double d_par_;
  double d_perp_;
};

// Electric field (global frame, V/cm) at `probe_nm` from a point charge of
// `charge_e` elementary charges at `charge_nm`, screened by eps_r.
inline Vec3 coulomb_field(const Vec3& charge_nm, double charge_e, const Vec3& probe_nm,
                          const PhysicsConstants& constants = {}) {
  const Vec3 sep = probe_nm - charge_nm;
  const double dist = sep.norm();
  if (!(dist > kMinSeparationNm))
    throw DegenerateGeometry("coulomb_field: separation " + std::to_string(dist) +
                             " nm is below the physical minimum of " +
                             std::to_string(kMinSeparationNm) + " nm");
  const double scale =
      constants.coulomb_prefactor * charge_e / (constants.epsilon_r * dist * dist * dist);
  return scale * sep;
}

// Excited-state transition frequencies (f_ex, f_ey) in MHz for a field given
// in the sensor's local frame, relative to line center `f_center`.
inline std::pair<double, double> excited_state_frequencies(const Vec3& field_local_vcm,
                                                           const NVSensor& sensor,
                                                           double f_center_mhz = 0.0) {
  const double par = sensor.d_par() * field_local_vcm.z();
  const double perp =
      sensor.d_perp() * std::hypot(field_local_vcm.x(), field_local_vcm.y());
  return {f_center_mhz + par + perp, f_center_mhz + par - perp};
}

// Collapses a transition-frequency pair into the (f_par, f_perp) observables.
// The |E_x> branch must lie at or above |E_y>; otherwise the labels are
// swapped and the caller has a bug upstream.
inline ObservablePair observables_from_frequencies(double f_ex_mhz, double f_ey_mhz) {
  if (f_ex_mhz < f_ey_mhz)
    throw LabelOrder("observables_from_frequencies: f_ex < f_ey (labels swapped?)");
  return {0.5 * (f_ex_mhz + f_ey_mhz), 0.5 * (f_ex_mhz - f_ey_mhz)};
}

// Exact observable shift caused by adding `delta_field` (global frame, V/cm)
// on top of the sensor's static strain bias. The common-mode shift is linear
// in the axial component; the splitting shift is the change of the transverse
// field magnitude, which is nonlinear in general.
inline ObservablePair exact_shift(const Vec3& delta_field_vcm, const NVSensor& sensor) {
  const Vec3 local = sensor.frame().to_local(delta_field_vcm);
  const Vec2 perp0 = sensor.strain_perp();
  const Vec2 perp1 = perp0 + Vec2(local.x(), local.y());
  return {sensor.d_par() * local.z(), sensor.d_perp() * (perp1.norm() - perp0.norm())};
}

// First-order shift: the splitting responds only to the component of the
// transverse field change along the static bias direction. Valid when the
// perturbation is small against the bias; the error is bounded by
// d_perp * |delta_perp|^2 / (2 |strain_perp|).
inline ObservablePair linearized_shift(const Vec3& delta_field_vcm, const NVSensor& sensor) {
  const Vec3 local = sensor.frame().to_local(delta_field_vcm);
  const Vec2 n = sensor.strain_perp().normalized();
  return {sensor.d_par() * local.z(),
          sensor.d_perp() * (n.x() * local.x() + n.y() * local.y())};
}

}  // namespace qpskit
