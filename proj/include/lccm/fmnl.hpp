#pragma once

// Fractional multinomial logit: multinomial logit regression whose targets
// are nonnegative weights (typically posterior class probabilities) instead
// of one-hot labels. The quasi-log-likelihood
//   Q(gamma) = sum_n sum_c W_nc * log softmax(X_n gamma')_c
// is concave in the non-reference rows of gamma, so Newton iterations with a
// backtracking line search converge globally. The same fit doubles as the
// membership step inside the EM loop.

#include "lccm/stats.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace lccm {

struct FmnlOptions {
  int max_iterations = 200;
  double gtol = 1e-8;          // inf-norm of the score
  double divergence_bound = 30.0;  // |gamma| beyond this flags separation
};

struct FmnlFit {
  Eigen::MatrixXd gamma;  // C x P, reference row identically zero
  double quasi_loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separation = false;
  double grad_inf_norm = 0.0;
};

// Q(gamma) and, optionally, the score/Hessian over the free coordinates
// (classes != ref stacked row-major: coordinate (c, p) -> row_of(c)*P + p).
inline double fmnl_quasi_loglik(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X,
                                const Eigen::MatrixXd& gamma, int ref,
                                Eigen::VectorXd* score = nullptr,
                                Eigen::MatrixXd* hessian = nullptr) {
  const int N = static_cast<int>(X.rows());
  const int P = static_cast<int>(X.cols());
  const int C = static_cast<int>(gamma.rows());
  if (W.rows() != N || W.cols() != C || gamma.cols() != P)
    throw std::invalid_argument("fractional logit shape mismatch");
  if (ref < 0 || ref >= C) throw std::invalid_argument("reference class out of range");

  auto row_of = [&](int c) { return c < ref ? c : c - 1; };
  const int D = (C - 1) * P;
  if (score) score->setZero(D);
  if (hessian) hessian->setZero(D, D);

  std::vector<double> contrib(N);
  Eigen::VectorXd eta(C), prob(C);
  for (int n = 0; n < N; ++n) {
    eta.noalias() = gamma * X.row(n).transpose();
    const double lse = logsumexp(eta);
    double wsum = 0.0, q = 0.0;
    for (int c = 0; c < C; ++c) {
      const double w = W(n, c);
      if (w < 0.0) throw std::invalid_argument("negative weight in fractional logit");
      wsum += w;
      q += w * (eta[c] - lse);
      prob[c] = std::exp(eta[c] - lse);
    }
    contrib[n] = q;
    if (score) {
      for (int c = 0; c < C; ++c) {
        if (c == ref) continue;
        const double r = W(n, c) - wsum * prob[c];
        score->segment(row_of(c) * P, P) += r * X.row(n).transpose();
      }
    }
    if (hessian) {
      Eigen::MatrixXd xx = X.row(n).transpose() * X.row(n);
      for (int c = 0; c < C; ++c) {
        if (c == ref) continue;
        for (int d = 0; d < C; ++d) {
          if (d == ref) continue;
          const double m = -wsum * prob[c] * ((c == d ? 1.0 : 0.0) - prob[d]);
          hessian->block(row_of(c) * P, row_of(d) * P, P, P) += m * xx;
        }
      }
    }
  }
  return chunked_sum(std::span<const double>(contrib.data(), contrib.size()));
}

inline FmnlFit fractional_logit_fit(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X, int ref,
                                    const Eigen::MatrixXd* warm_start = nullptr,
                                    const FmnlOptions& opts = {}) {
  const int P = static_cast<int>(X.cols());
  const int C = static_cast<int>(W.cols());
  auto row_of = [&](int c) { return c < ref ? c : c - 1; };

  FmnlFit fit;
  fit.gamma = warm_start ? *warm_start : Eigen::MatrixXd::Zero(C, P);
  fit.gamma.row(ref).setZero();

  Eigen::VectorXd score;
  Eigen::MatrixXd hess;
  fit.quasi_loglik = fmnl_quasi_loglik(W, X, fit.gamma, ref, &score, &hess);
  fit.grad_inf_norm = score.size() ? score.lpNorm<Eigen::Infinity>() : 0.0;

  for (int it = 0; it < opts.max_iterations; ++it) {
    if (fit.grad_inf_norm < opts.gtol) {
      fit.converged = true;
      break;
    }
    // Newton direction; tiny ridge keeps the solve well posed when some class
    // weight column is (numerically) empty.
    Eigen::MatrixXd Hr = -hess;
    Hr.diagonal().array() += 1e-10;
    Eigen::VectorXd step = Hr.ldlt().solve(score);
    if (!step.allFinite()) step = score;  // fall back to steepest ascent

    // Near the optimum the predicted gain drops below what the quasi-LL can
    // resolve in double precision; demanding a measured improvement there
    // would reject the final Newton step on rounding noise alone.
    const double resolution = 1e-15 * (std::fabs(fit.quasi_loglik) + 1.0);
    double t = 1.0;
    bool accepted = false;
    Eigen::MatrixXd cand = fit.gamma;
    for (int ls = 0; ls < 60; ++ls) {
      for (int c = 0; c < C; ++c) {
        if (c == ref) continue;
        cand.row(c) = fit.gamma.row(c) + t * step.segment(row_of(c) * P, P).transpose();
      }
      const double q = fmnl_quasi_loglik(W, X, cand, ref);
      const double predicted = 1e-4 * t * score.dot(step);
      if (std::isfinite(q) &&
          (q >= fit.quasi_loglik + predicted ||
           (predicted < resolution && q >= fit.quasi_loglik - resolution))) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    fit.iterations = it + 1;
    if (!accepted) break;
    fit.gamma = cand;
    fit.quasi_loglik = fmnl_quasi_loglik(W, X, fit.gamma, ref, &score, &hess);
    fit.grad_inf_norm = score.lpNorm<Eigen::Infinity>();
    if (fit.gamma.cwiseAbs().maxCoeff() > opts.divergence_bound) {
      fit.separation = true;  // coefficients running away: separated classes
      break;
    }
  }
  if (!fit.converged && fit.grad_inf_norm < opts.gtol) fit.converged = true;
  return fit;
}

struct FmnlResult {
  std::vector<std::string> covariate_names;  // intercept first
  int reference_class = 0;
  Eigen::MatrixXd gamma;     // C x P, reference row zero
  Eigen::MatrixXd se;        // robust (sandwich) standard errors, NaN on the reference row
  Eigen::MatrixXd p_value;   // two-sided normal, NaN on the reference row
  Eigen::MatrixXd cov;       // free-coordinate covariance, (C-1)P square
  double quasi_loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separation = false;
};

// Full quasi-ML fit from gamma = 0 with robust standard errors. The sandwich
// uses per-respondent scores: cov = A^-1 B A^-1 with A the quasi-likelihood
// Hessian and B the outer product of the scores.
inline FmnlResult estimate_fmnl(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X,
                                const std::vector<std::string>& covariate_names, int ref,
                                const FmnlOptions& opts = {}) {
  const int N = static_cast<int>(X.rows());
  const int P = static_cast<int>(X.cols());
  const int C = static_cast<int>(W.cols());
  if (static_cast<int>(covariate_names.size()) != P)
    throw std::invalid_argument("covariate name count mismatch");

  FmnlFit fit = fractional_logit_fit(W, X, ref, nullptr, opts);

  FmnlResult res;
  res.covariate_names = covariate_names;
  res.reference_class = ref;
  res.gamma = fit.gamma;
  res.quasi_loglik = fit.quasi_loglik;
  res.iterations = fit.iterations;
  res.converged = fit.converged;
  res.separation = fit.separation;

  auto row_of = [&](int c) { return c < ref ? c : c - 1; };
  const int D = (C - 1) * P;
  Eigen::VectorXd score;
  Eigen::MatrixXd A;
  fmnl_quasi_loglik(W, X, res.gamma, ref, &score, &A);

  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd eta(C), prob(C), s(D);
  for (int n = 0; n < N; ++n) {
    eta.noalias() = res.gamma * X.row(n).transpose();
    const double lse = logsumexp(eta);
    double wsum = 0.0;
    for (int c = 0; c < C; ++c) {
      prob[c] = std::exp(eta[c] - lse);
      wsum += W(n, c);
    }
    s.setZero();
    for (int c = 0; c < C; ++c) {
      if (c == ref) continue;
      s.segment(row_of(c) * P, P) =
          (W(n, c) - wsum * prob[c]) * X.row(n).transpose();
    }
    B.noalias() += s * s.transpose();
  }

  Eigen::MatrixXd Ainv;
  {
    Eigen::MatrixXd An = -A;
    An.diagonal().array() += 1e-12;
    Ainv = An.ldlt().solve(Eigen::MatrixXd::Identity(D, D));
  }
  res.cov = Ainv * B * Ainv;

  res.se = Eigen::MatrixXd::Constant(C, P, kNaN);
  res.p_value = Eigen::MatrixXd::Constant(C, P, kNaN);
  for (int c = 0; c < C; ++c) {
    if (c == ref) continue;
    for (int p = 0; p < P; ++p) {
      const double v = res.cov(row_of(c) * P + p, row_of(c) * P + p);
      const double se = v > 0.0 ? std::sqrt(v) : kNaN;
      res.se(c, p) = se;
      res.p_value(c, p) = std::isnan(se) ? kNaN : normal_two_sided_p(res.gamma(c, p) / se);
    }
  }
  return res;
}

// Row-wise softmax of X gamma'.
inline Eigen::MatrixXd predict_shares(const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& X) {
  const int N = static_cast<int>(X.rows());
  const int C = static_cast<int>(gamma.rows());
  Eigen::MatrixXd out(N, C);
  Eigen::VectorXd eta(C);
  for (int n = 0; n < N; ++n) {
    eta.noalias() = gamma * X.row(n).transpose();
    const double lse = logsumexp(eta);
    for (int c = 0; c < C; ++c) out(n, c) = std::exp(eta[c] - lse);
  }
  return out;
}

}  // namespace lccm
