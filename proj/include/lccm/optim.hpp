#pragma once

// Dense quasi-Newton minimizer and finite-difference helpers. Objectives
// return +inf outside their domain; the backtracking line search only ever
// accepts strict improvements, so every accepted iterate lowers f.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

namespace lccm {

using ObjectiveFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd* grad)>;

// Central differences with per-coordinate step rel_step * max(|x_i|, 1).
inline Eigen::VectorXd finite_diff_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                            const Eigen::VectorXd& x, double rel_step = 1e-6) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double h = rel_step * std::max(std::fabs(x[i]), 1.0);
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Central differences of an analytic gradient, symmetrized.
inline Eigen::MatrixXd numerical_hessian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad, const Eigen::VectorXd& x,
    double rel_step = 1e-5) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd xp = x;
  for (int i = 0; i < n; ++i) {
    const double h = rel_step * std::max(std::fabs(x[i]), 1.0);
    xp[i] = x[i] + h;
    Eigen::VectorXd gp = grad(xp);
    xp[i] = x[i] - h;
    Eigen::VectorXd gm = grad(xp);
    xp[i] = x[i];
    H.col(i) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

enum class OptimStatus { Converged, MaxIterations, Stalled };

struct OptimOptions {
  double gtol = 1e-8;       // inf-norm of the gradient
  double ftol_rel = 0.0;    // relative improvement floor; 0 disables
  int max_iterations = 200;
};

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  double grad_inf_norm = 0.0;
  int iterations = 0;
  OptimStatus status = OptimStatus::MaxIterations;
  bool converged() const { return status == OptimStatus::Converged; }
};

inline OptimResult bfgs_minimize(const ObjectiveFn& fg, const Eigen::VectorXd& x0,
                                 const OptimOptions& opts = {}) {
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  res.x = x0;
  Eigen::VectorXd g(n);
  res.f = fg(res.x, &g);
  if (!std::isfinite(res.f))
    throw std::invalid_argument("objective is not finite at the starting point");
  res.grad_inf_norm = n ? g.lpNorm<Eigen::Infinity>() : 0.0;
  if (n == 0 || res.grad_inf_norm < opts.gtol) {
    res.status = OptimStatus::Converged;
    return res;
  }

  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);  // inverse Hessian estimate
  bool scaled = false;
  constexpr double c1 = 1e-4;

  for (int it = 1; it <= opts.max_iterations; ++it) {
    Eigen::VectorXd d = -(H * g);
    double slope = g.dot(d);
    if (!(slope < 0.0)) {  // lost positive definiteness; restart from steepest descent
      H.setIdentity();
      d = -g;
      slope = g.dot(d);
    }

    double step = 1.0;
    double f_new = 0.0;
    Eigen::VectorXd x_new, g_new(n);
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = res.x + step * d;
      f_new = fg(x_new, &g_new);
      if (std::isfinite(f_new) && f_new <= res.f + c1 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    res.iterations = it;
    if (!accepted) {
      res.status = res.grad_inf_norm < opts.gtol ? OptimStatus::Converged : OptimStatus::Stalled;
      return res;
    }

    Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd y = g_new - g;
    const double improvement = res.f - f_new;
    res.x = x_new;
    res.f = f_new;
    g = g_new;
    res.grad_inf_norm = g.lpNorm<Eigen::Infinity>();

    if (res.grad_inf_norm < opts.gtol) {
      res.status = OptimStatus::Converged;
      return res;
    }
    if (opts.ftol_rel > 0.0 && improvement <= opts.ftol_rel * (std::fabs(res.f) + 1.0)) {
      res.status = OptimStatus::Converged;
      return res;
    }

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {  // Shanno scaling before the first update
        H *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      Eigen::VectorXd Hy = H * y;
      // H <- (I - rho s y')H(I - rho y s') + rho s s'
      H.noalias() -= rho * (Hy * s.transpose() + s * Hy.transpose());
      H.noalias() += (rho * rho * y.dot(Hy) + rho) * (s * s.transpose());
    }
  }
  res.status = OptimStatus::MaxIterations;
  return res;
}

}  // namespace lccm
