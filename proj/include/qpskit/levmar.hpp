#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "qpskit/geometry.hpp"

namespace qpskit::levmar {

struct Options {
  int max_iterations = 200;
  double ftol = 1e-14;            // relative objective decrease considered converged
  double xtol = 1e-12;            // step length (nm) considered converged
  double gtol = 1e-12;            // gradient infinity-norm considered converged
  double initial_lambda = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.25;
  double max_lambda = 1e15;
};

struct Outcome {
  Vec3 position = Vec3::Zero();
  double objective = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  bool feasible = false;  // at least one model evaluation succeeded
};

// Damped Gauss-Newton minimization of |r(x)|^2 over x in R^3.
//
// The model callable must have the signature
//   bool model(const Vec3& x, Eigen::VectorXd& r, Eigen::Matrix<double,Eigen::Dynamic,3>* J)
// filling the residual (and the Jacobian when J != nullptr) and returning
// false when x is infeasible (e.g. inside the excluded zone around a sensor).
// Infeasible trial steps are treated as rejected steps.
template <typename Model>
Outcome minimize(Model&& model, const Vec3& start, const Options& opt = {}) {
  Outcome out;
  Eigen::VectorXd r;
  Eigen::Matrix<double, Eigen::Dynamic, 3> J;
  Vec3 x = start;
  if (!model(x, r, &J)) return out;  // infeasible start
  out.feasible = true;
  double objective = r.squaredNorm();
  double lambda = opt.initial_lambda;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    out.iterations = iter + 1;
    const Eigen::Vector3d g = J.transpose() * r;
    const Eigen::Matrix3d h = J.transpose() * J;
    if (g.lpNorm<Eigen::Infinity>() <= opt.gtol) {
      out.converged = true;
      break;
    }
    bool accepted = false;
    while (lambda <= opt.max_lambda) {
      Eigen::Matrix3d damped = h;
      for (int d = 0; d < 3; ++d) {
        // Marquardt scaling with an absolute floor so flat directions still
        // receive damping.
        damped(d, d) += lambda * std::max(h(d, d), 1e-12);
      }
      const Eigen::Vector3d step = damped.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= opt.lambda_up;
        continue;
      }
      const Vec3 candidate = x + step;
      Eigen::VectorXd r_new;
      Eigen::Matrix<double, Eigen::Dynamic, 3> j_new;
      if (model(candidate, r_new, &j_new)) {
        const double objective_new = r_new.squaredNorm();
        if (objective_new < objective) {
          const double improvement = objective - objective_new;
          x = candidate;
          r.swap(r_new);
          J.swap(j_new);
          objective = objective_new;
          lambda = std::max(lambda * opt.lambda_down, 1e-12);
          accepted = true;
          if (step.norm() <= opt.xtol * (x.norm() + opt.xtol) ||
              improvement <= opt.ftol * std::max(objective, 1.0)) {
            out.converged = true;
          }
          break;
        }
      }
      lambda *= opt.lambda_up;
    }
    if (!accepted) {
      // No downhill step within the damping budget: local minimum to the
      // resolution of the model.
      out.converged = true;
      break;
    }
    if (out.converged) break;
  }
  out.position = x;
  out.objective = objective;
  return out;
}

}  // namespace qpskit::levmar
