#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "qpskit/errors.hpp"

namespace qpskit {

// Unit conventions used throughout: positions in nm, electric fields in V/cm,
// frequencies in MHz, charge in units of the elementary charge e.
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

// Tolerance for orthonormality / handedness checks on sensor frames.
inline constexpr double kFrameTolerance = 1e-12;

// Carbon-carbon bond length in diamond, nm. Point-charge evaluations closer
// than this to a sensor are unphysical and rejected.
inline constexpr double kMinSeparationNm = 0.154;

// Right-handed orthonormal basis attached to a sensor. z_hat is the sensor
// symmetry axis; x_hat and y_hat span the transverse plane in which the
// in-plane field components act.
class SensorFrame {
 public:
  SensorFrame(const Vec3& x_hat, const Vec3& y_hat, const Vec3& z_hat)
      : x_(x_hat), y_(y_hat), z_(z_hat) {
    auto unit = [](const Vec3& v) { return std::abs(v.norm() - 1.0) <= kFrameTolerance; };
    if (!unit(x_) || !unit(y_) || !unit(z_))
      throw ConfigInvalid("SensorFrame: axes must be unit vectors");
    if (std::abs(x_.dot(y_)) > kFrameTolerance || std::abs(y_.dot(z_)) > kFrameTolerance ||
        std::abs(z_.dot(x_)) > kFrameTolerance)
      throw ConfigInvalid("SensorFrame: axes must be mutually orthogonal");
    if ((x_.cross(y_) - z_).norm() > 1e-9)
      throw ConfigInvalid("SensorFrame: axes must form a right-handed basis");
  }

  // Builds a frame from the symmetry axis alone, choosing transverse axes
  // deterministically: x_hat is the unit projection of a fixed reference
  // vector onto the plane normal to z, and y_hat completes the right-handed
  // set. The reference is global +z unless the axis is nearly parallel to it.
  static SensorFrame from_z_axis(const Vec3& z_axis) {
    const double n = z_axis.norm();
    if (n < 1e-12) throw ConfigInvalid("SensorFrame: z axis must be nonzero");
    const Vec3 z = z_axis / n;
    const Vec3 ref = std::abs(z.z()) < 0.9 ? Vec3(0, 0, 1) : Vec3(1, 0, 0);
    Vec3 x = ref - ref.dot(z) * z;
    x.normalize();
    const Vec3 y = z.cross(x);
    return SensorFrame(x, y, z);
  }

  const Vec3& x_hat() const { return x_; }
  const Vec3& y_hat() const { return y_; }
  const Vec3& z_hat() const { return z_; }

  // Global -> local coordinates.
  Vec3 to_local(const Vec3& v) const { return Vec3(x_.dot(v), y_.dot(v), z_.dot(v)); }
  // Local -> global coordinates.
  Vec3 to_global(const Vec3& v) const { return v.x() * x_ + v.y() * y_ + v.z() * z_; }

 private:
  Vec3 x_, y_, z_;
};

}  // namespace qpskit
