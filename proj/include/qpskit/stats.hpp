#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "qpskit/errors.hpp"

namespace qpskit {

// FWHM of a Gaussian in units of its standard deviation: 2 sqrt(2 ln 2).
inline constexpr double kGaussianFwhmFactor = 2.3548200450309493;

// Survival function (upper tail) of the chi-squared distribution with integer
// degrees of freedom. Uses the closed form of the regularized upper incomplete
// gamma function at integer and half-integer shape:
//   Q(1, y)   = exp(-y)
//   Q(1/2, y) = erfc(sqrt(y))
//   Q(a+1, y) = Q(a, y) + y^a e^-y / Gamma(a+1)
// which is exact (to rounding) for every dof needed here — no series cutoffs.
inline double chi_squared_survival(double x, int dof) {
  if (dof < 1) throw ConfigInvalid("chi_squared_survival: dof must be >= 1");
  if (!(x > 0.0)) return 1.0;  // includes x == 0 and NaN-safe ordering
  const double y = 0.5 * x;
  double q, term, a;
  if (dof % 2 == 0) {
    // Start at shape a = 1 (dof 2).
    q = std::exp(-y);
    term = y * std::exp(-y);  // T(1) = y^1 e^-y / 1!
    a = 1.0;
  } else {
    // Start at shape a = 1/2 (dof 1).
    q = std::erfc(std::sqrt(y));
    // T(1/2) = y^(1/2) e^-y / Gamma(3/2), Gamma(3/2) = sqrt(pi)/2.
    term = std::sqrt(y) * std::exp(-y) * 2.0 / std::sqrt(std::numbers::pi);
    a = 0.5;
  }
  // Climb a -> a+1 until the shape reaches dof/2, accumulating T(a) for
  // a = start .. dof/2 - 1. Both a and target are exact multiples of 0.5 with
  // matching parity, so the comparison below is exact.
  const double target = 0.5 * dof;
  while (a < target - 0.5) {
    q += term;
    a += 1.0;
    term *= y / a;  // T(a) from T(a-1)
  }
  if (q < 0.0) q = 0.0;
  if (q > 1.0) q = 1.0;
  return q;
}

// Principal standard deviations (ascending) of a 3x3 covariance matrix.
// Negative eigenvalues from numerical noise clamp to zero.
inline std::array<double, 3> principal_sigmas(const Eigen::Matrix3d& covariance) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(covariance);
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    const double ev = es.eigenvalues()[i];
    out[static_cast<size_t>(i)] = ev > 0.0 ? std::sqrt(ev) : 0.0;
  }
  return out;
}

// Geometric-mean localization scale of a 3D Gaussian: (s1 s2 s3)^(1/3).
inline double sigma_3d_bar(const std::array<double, 3>& sigmas) {
  return std::cbrt(sigmas[0] * sigmas[1] * sigmas[2]);
}

// FWHM of the isotropic-equivalent localization volume.
inline double fwhm_from_sigma(double sigma) { return kGaussianFwhmFactor * sigma; }

}  // namespace qpskit
