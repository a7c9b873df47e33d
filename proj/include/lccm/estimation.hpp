#pragma once

// Maximum-likelihood estimation of the latent-class choice model.
//
// The marginal likelihood of one respondent mixes the class-conditional
// sequence likelihoods over the membership probabilities:
//   LL_n = log sum_c exp( log pi_c(z_n) + sum_t log P(y_nt | c) )
// Estimation runs EM (posterior E-step, weighted kernel fits plus a
// fractional-logit membership fit as the M-step) followed by a BFGS polish of
// the full marginal log-likelihood, from several random starts. Sign
// constraints that collapse onto their bound (|beta| < 1e-4) are pinned to
// exactly zero and the remainder re-polished.
//
// Standard errors come from a central-difference Hessian of the analytic
// gradient in natural parameter space; a non-positive-definite information
// matrix falls back to an eigenvalue pseudo-inverse and is flagged.

#include "lccm/fmnl.hpp"
#include "lccm/model.hpp"
#include "lccm/optim.hpp"
#include "lccm/stats.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

namespace lccm {

// Membership probabilities for one covariate row (intercept included).
inline Eigen::VectorXd membership_probs(const Eigen::MatrixXd& alpha, const Eigen::VectorXd& z) {
  Eigen::VectorXd eta = alpha * z;
  const double lse = logsumexp(eta);
  return (eta.array() - lse).exp();
}

// Kernel log-likelihood of one respondent's full choice sequence under one
// class's coefficients.
inline double class_sequence_loglik(const ModelContext& ctx, const Respondent& r,
                                    const Eigen::VectorXd& beta_row,
                                    const Eigen::VectorXd& lambda_row) {
  double ll = 0.0;
  for (const auto& s : r.situations)
    ll += ctx.situation_log_probs(s, beta_row, lambda_row)[s.chosen];
  return ll;
}

// Everything the E-step and the likelihood need, computed in one sweep and in
// a fixed order so repeated runs agree bit for bit.
struct LikelihoodParts {
  Eigen::MatrixXd class_ll;   // N x C kernel sequence log-likelihoods
  Eigen::MatrixXd log_prior;  // N x C membership log-probabilities
  Eigen::MatrixXd posterior;  // N x C
  Eigen::VectorXd resp_ll;    // N
  double total = 0.0;
};

namespace detail {

inline void fill_prior_posterior(const ModelContext& ctx, const Params& p, LikelihoodParts& parts) {
  const int N = ctx.data->n_respondents();
  const int C = ctx.n_classes();
  parts.log_prior.resize(N, C);
  parts.posterior.resize(N, C);
  parts.resp_ll.resize(N);
  Eigen::VectorXd eta(C), post(C);
  for (int n = 0; n < N; ++n) {
    eta.noalias() = p.alpha * ctx.Z.row(n).transpose();
    const double lse = logsumexp(eta);
    for (int c = 0; c < C; ++c) {
      parts.log_prior(n, c) = eta[c] - lse;
      post[c] = parts.log_prior(n, c) + parts.class_ll(n, c);
    }
    const double ll_n = logsumexp(post);
    parts.resp_ll[n] = ll_n;
    for (int c = 0; c < C; ++c) parts.posterior(n, c) = std::exp(post[c] - ll_n);
  }
  parts.total = chunked_sum(
      std::span<const double>(parts.resp_ll.data(), static_cast<size_t>(N)));
}

}  // namespace detail

inline LikelihoodParts compute_parts(const ModelContext& ctx, const Params& p) {
  const int N = ctx.data->n_respondents();
  const int C = ctx.n_classes();
  LikelihoodParts parts;
  parts.class_ll.resize(N, C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      parts.class_ll(n, c) =
          class_sequence_loglik(ctx, ctx.data->respondents[n], p.beta.row(c), p.lambda.row(c));
  detail::fill_prior_posterior(ctx, p, parts);
  return parts;
}

inline double marginal_loglik(const ModelContext& ctx, const Params& p) {
  return compute_parts(ctx, p).total;
}

// Posterior class membership per respondent; by construction it shares every
// log-space quantity with marginal_loglik.
inline Eigen::MatrixXd posterior_membership(const ModelContext& ctx, const Params& p) {
  return compute_parts(ctx, p).posterior;
}

// Natural-space packing (no constraint transform); used by the Hessian.
inline Eigen::VectorXd pack_natural(const PackLayout& layout, const Params& p) {
  Eigen::VectorXd x(layout.size());
  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    x[i] = e.kind == PackEntry::Beta    ? p.beta(e.cls, e.index)
           : e.kind == PackEntry::Lambda ? p.lambda(e.cls, e.index)
                                         : p.alpha(e.cls, e.index);
  }
  return x;
}

inline Params unpack_natural(const ModelContext& ctx, const PackLayout& layout,
                             const Eigen::VectorXd& x,
                             const std::vector<std::vector<uint8_t>>* bound_fixed = nullptr) {
  Params p = unpack_params(ctx, layout, Eigen::VectorXd::Zero(layout.size()), bound_fixed);
  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    if (e.kind == PackEntry::Beta) p.beta(e.cls, e.index) = x[i];
    else if (e.kind == PackEntry::Lambda) p.lambda(e.cls, e.index) = x[i];
    else p.alpha(e.cls, e.index) = x[i];
  }
  return p;
}

// Marginal log-likelihood and its gradient with respect to the natural values
// of the layout coordinates.
inline double loglik_and_grad_natural(const ModelContext& ctx, const Params& p,
                                      const PackLayout& layout, Eigen::VectorXd& grad) {
  const int N = ctx.data->n_respondents();
  const int C = ctx.n_classes();
  LikelihoodParts parts = compute_parts(ctx, p);

  std::vector<Eigen::VectorXd> beta_grad(C, Eigen::VectorXd::Zero(ctx.n_beta()));
  std::vector<Eigen::VectorXd> lambda_grad(C, Eigen::VectorXd::Zero(std::max(ctx.n_nests(), 1)));
  Eigen::MatrixXd alpha_grad = Eigen::MatrixXd::Zero(C, ctx.n_z());

  for (int n = 0; n < N; ++n) {
    const auto& r = ctx.data->respondents[n];
    for (int c = 0; c < C; ++c) {
      const double w = parts.posterior(n, c);
      if (w < 1e-16) continue;
      for (const auto& s : r.situations) {
        KernelGrad kg = ctx.situation_logp_grad(s, p.beta.row(c), p.lambda.row(c));
        ctx.accumulate_beta_grad(s, kg, w, beta_grad[c]);
        if (ctx.nested()) lambda_grad[c] += w * kg.dlambda;
      }
    }
    for (int c = 0; c < C; ++c) {
      if (c == ctx.spec.reference_class) continue;
      const double d = parts.posterior(n, c) - std::exp(parts.log_prior(n, c));
      alpha_grad.row(c) += d * ctx.Z.row(n);
    }
  }

  grad.resize(layout.size());
  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    grad[i] = e.kind == PackEntry::Beta    ? beta_grad[e.cls][e.index]
              : e.kind == PackEntry::Lambda ? lambda_grad[e.cls][e.index]
                                            : alpha_grad(e.cls, e.index);
  }
  return parts.total;
}

namespace detail {

// Hack-free bridge to the unconstrained optimizer: unpack, evaluate, chain
// the constraint transform into the gradient, negate.
inline ObjectiveFn make_marginal_objective(const ModelContext& ctx, const PackLayout& layout,
                                           const std::vector<std::vector<uint8_t>>* bound_fixed) {
  return [&ctx, &layout, bound_fixed](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    Params p = unpack_params(ctx, layout, theta, bound_fixed);
    if (!p.beta.allFinite() || !p.alpha.allFinite() ||
        (p.lambda.size() && !p.lambda.allFinite())) {
      if (grad) grad->setZero(layout.size());
      return kInf;
    }
    Eigen::VectorXd g;
    const double ll = loglik_and_grad_natural(ctx, p, layout, g);
    if (!std::isfinite(ll)) {
      if (grad) grad->setZero(layout.size());
      return kInf;
    }
    if (grad) {
      grad->resize(layout.size());
      for (int i = 0; i < layout.size(); ++i) {
        const auto& e = layout.entries[i];
        const double nat = e.kind == PackEntry::Beta    ? p.beta(e.cls, e.index)
                           : e.kind == PackEntry::Lambda ? p.lambda(e.cls, e.index)
                                                         : p.alpha(e.cls, e.index);
        (*grad)[i] = -g[i] * transform_jacobian(e, nat);
      }
    }
    return -ll;
  };
}

// Per-class weighted kernel objective for the M-step.
inline PackLayout class_layout(const ModelContext& ctx, int cls,
                               const std::vector<std::vector<uint8_t>>& bound_fixed) {
  PackLayout layout;
  for (int b = 0; b < ctx.n_beta(); ++b) {
    if (ctx.beta_constraint(b) == Constraint::Fixed) continue;
    if (bound_fixed[cls][b]) continue;
    layout.entries.push_back({PackEntry::Beta, cls, b, ctx.beta_constraint(b)});
  }
  for (int m = 0; m < ctx.n_nests(); ++m) {
    if (ctx.lambda_is_fixed[m]) continue;
    layout.entries.push_back({PackEntry::Lambda, cls, m, Constraint::Free});
  }
  return layout;
}

inline double weighted_class_negll(const ModelContext& ctx, const Eigen::VectorXd& w,
                                   const Eigen::VectorXd& beta_row,
                                   const Eigen::VectorXd& lambda_row, const PackLayout& layout,
                                   Eigen::VectorXd* grad) {
  const int N = ctx.data->n_respondents();
  std::vector<double> contrib(N);
  Eigen::VectorXd beta_grad = Eigen::VectorXd::Zero(ctx.n_beta());
  Eigen::VectorXd lambda_grad = Eigen::VectorXd::Zero(std::max(ctx.n_nests(), 1));
  for (int n = 0; n < N; ++n) {
    contrib[n] = 0.0;
    if (w[n] < 1e-16 && !grad) continue;
    double ll = 0.0;
    for (const auto& s : ctx.data->respondents[n].situations) {
      if (grad) {
        KernelGrad kg = ctx.situation_logp_grad(s, beta_row, lambda_row);
        ll += kg.logp;
        ctx.accumulate_beta_grad(s, kg, w[n], beta_grad);
        if (ctx.nested()) lambda_grad += w[n] * kg.dlambda;
      } else {
        ll += ctx.situation_log_probs(s, beta_row, lambda_row)[s.chosen];
      }
    }
    contrib[n] = w[n] * ll;
  }
  if (grad) {
    grad->resize(layout.size());
    for (int i = 0; i < layout.size(); ++i) {
      const auto& e = layout.entries[i];
      const double nat = e.kind == PackEntry::Beta ? beta_row[e.index] : lambda_row[e.index];
      const double g = e.kind == PackEntry::Beta ? beta_grad[e.index] : lambda_grad[e.index];
      (*grad)[i] = -g * transform_jacobian(e, nat);
    }
  }
  return -chunked_sum(std::span<const double>(contrib.data(), contrib.size()));
}

}  // namespace detail

struct EstimateOptions {
  int n_starts = 20;
  uint64_t seed = 1;
  int threads = 1;
  double em_tol = 1e-8;          // relative marginal-LL change
  int max_em_iterations = 500;
  int max_polish_iterations = 100;
  double polish_ftol = 1e-10;    // relative improvement stop for the polish
  double start_window = 1e-4;    // absolute LL slack for "start reached the best"
  double bound_fix_threshold = 1e-4;
  bool compute_se = true;

  enum class Ordering { ShareDescending, CwdAscending };
  Ordering ordering = Ordering::ShareDescending;
  std::string ordering_attribute;  // CwdAscending only
  std::string ordering_numeraire;
};

struct SingleFit {
  Params params;
  std::vector<std::vector<uint8_t>> bound_fixed;  // C x n_beta
  double loglik = -kInf;
  std::vector<double> em_path;  // marginal LL after init and each EM iteration
  int em_iterations = 0;
  int polish_iterations = 0;
  OptimStatus polish_status = OptimStatus::MaxIterations;
  double grad_inf_norm = kNaN;
};

// One EM + polish + bound-fix pass from a given starting point.
inline SingleFit fit_from_init(const ModelContext& ctx, const Params& init,
                               const EstimateOptions& opts) {
  const int C = ctx.n_classes();
  SingleFit fit;
  fit.bound_fixed.assign(C, std::vector<uint8_t>(ctx.n_beta(), 0));

  // Round-trip through the layout so fixed coordinates hold their spec values
  // whatever the caller passed in.
  {
    PackLayout layout = build_layout(ctx, &fit.bound_fixed);
    fit.params = unpack_params(ctx, layout, pack_params(ctx, layout, init), &fit.bound_fixed);
  }

  LikelihoodParts parts = compute_parts(ctx, fit.params);
  double ll = parts.total;
  fit.em_path.push_back(ll);

  for (int it = 0; it < opts.max_em_iterations; ++it) {
    // M-step, choice kernels: weighted fit per class, warm-started. The line
    // search only accepts improvements, so the EM objective cannot decrease.
    for (int c = 0; c < C; ++c) {
      PackLayout lc = detail::class_layout(ctx, c, fit.bound_fixed);
      if (lc.size() == 0) continue;
      Eigen::VectorXd w = parts.posterior.col(c);
      Params& p = fit.params;
      ObjectiveFn obj = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
        Eigen::VectorXd beta_row = p.beta.row(c);
        Eigen::VectorXd lambda_row = p.lambda.row(c);
        for (int i = 0; i < lc.size(); ++i) {
          const auto& e = lc.entries[i];
          const double v = natural_from_theta(e, theta[i]);
          if (e.kind == PackEntry::Beta) beta_row[e.index] = v;
          else lambda_row[e.index] = v;
        }
        if (!beta_row.allFinite() || !lambda_row.allFinite()) {
          if (grad) grad->setZero(lc.size());
          return kInf;
        }
        const double f =
            detail::weighted_class_negll(ctx, w, beta_row, lambda_row, lc, grad);
        return std::isfinite(f) ? f : kInf;
      };
      OptimOptions oo;
      oo.max_iterations = 40;
      oo.gtol = 1e-6 * std::max(1.0, std::fabs(ll));
      oo.ftol_rel = 1e-12;
      Eigen::VectorXd theta0(lc.size());
      for (int i = 0; i < lc.size(); ++i) {
        const auto& e = lc.entries[i];
        const double v = e.kind == PackEntry::Beta ? fit.params.beta(c, e.index)
                                                   : fit.params.lambda(c, e.index);
        theta0[i] = theta_from_natural(e, v);
      }
      OptimResult r = bfgs_minimize(obj, theta0, oo);
      for (int i = 0; i < lc.size(); ++i) {
        const auto& e = lc.entries[i];
        const double v = natural_from_theta(e, r.x[i]);
        if (e.kind == PackEntry::Beta) fit.params.beta(c, e.index) = v;
        else fit.params.lambda(c, e.index) = v;
      }
    }

    // M-step, membership: a fractional logit on the posteriors.
    if (C > 1) {
      FmnlOptions fo;
      fo.max_iterations = 50;
      fo.gtol = 1e-9 * std::max(1.0, std::fabs(ll));
      FmnlFit mf = fractional_logit_fit(parts.posterior, ctx.Z, ctx.spec.reference_class,
                                        &fit.params.alpha, fo);
      fit.params.alpha = mf.gamma;
    }

    parts = compute_parts(ctx, fit.params);
    fit.em_path.push_back(parts.total);
    fit.em_iterations = it + 1;
    const double change = parts.total - ll;
    ll = parts.total;
    if (std::fabs(change) < opts.em_tol * (std::fabs(ll) + 1.0)) break;
  }

  // Quasi-Newton polish of the full marginal log-likelihood, repeated while
  // sign-constrained coefficients keep collapsing onto their bound.
  for (int round = 0; round < 1 + C * ctx.n_beta(); ++round) {
    PackLayout layout = build_layout(ctx, &fit.bound_fixed);
    ObjectiveFn obj = detail::make_marginal_objective(ctx, layout, &fit.bound_fixed);
    OptimOptions oo;
    oo.max_iterations = opts.max_polish_iterations;
    oo.gtol = 1e-6 * std::max(1.0, std::fabs(ll));
    oo.ftol_rel = opts.polish_ftol;
    OptimResult r = bfgs_minimize(obj, pack_params(ctx, layout, fit.params), oo);
    fit.params = unpack_params(ctx, layout, r.x, &fit.bound_fixed);
    fit.loglik = -r.f;
    fit.polish_iterations = r.iterations;
    fit.polish_status = r.status;
    fit.grad_inf_norm = r.grad_inf_norm;
    ll = fit.loglik;

    bool changed = false;
    for (int c = 0; c < C; ++c)
      for (int b = 0; b < ctx.n_beta(); ++b) {
        if (fit.bound_fixed[c][b] || ctx.beta_constraint(b) == Constraint::Fixed) continue;
        if (ctx.beta_constraint(b) == Constraint::Free) continue;
        if (std::fabs(fit.params.beta(c, b)) < opts.bound_fix_threshold) {
          fit.bound_fixed[c][b] = 1;
          fit.params.beta(c, b) = 0.0;
          changed = true;
        }
      }
    if (!changed) break;
    ll = marginal_loglik(ctx, fit.params);
  }
  return fit;
}

struct ParamCell {
  double value = kNaN;
  double se = kNaN;
  double p = kNaN;
  bool fixed = false;        // pinned by the ModelSpec
  bool bound_fixed = false;  // pinned by the estimator at a constraint bound
  bool frozen = false;       // carried over from a previous stage, not estimated
};

struct FitStats {
  double loglik = 0.0;
  double null_loglik = 0.0;
  int n_params = 0;
  int n_obs = 0;
  double adj_rho2 = 0.0;
  double aic = 0.0;
  double bic = 0.0;
};

// Null model: every available alternative equally likely in every situation.
inline double null_loglik(const ChoiceDataset& data) {
  std::vector<double> terms;
  for (const auto& r : data.respondents)
    for (const auto& s : r.situations) terms.push_back(-std::log(double(s.n_available())));
  return chunked_sum(std::span<const double>(terms.data(), terms.size()));
}

inline FitStats fit_stats(double loglik, double null_ll, int n_params, int n_obs) {
  FitStats f;
  f.loglik = loglik;
  f.null_loglik = null_ll;
  f.n_params = n_params;
  f.n_obs = n_obs;
  f.adj_rho2 = 1.0 - (loglik - n_params) / null_ll;
  f.aic = 2.0 * n_params - 2.0 * loglik;
  f.bic = n_params * std::log(double(n_obs)) - 2.0 * loglik;
  return f;
}

struct EstimationResult {
  ModelSpec spec;
  std::vector<std::string> beta_names;  // terms then constants
  std::vector<std::string> nest_names;
  std::vector<std::string> z_names;
  std::vector<std::string> respondent_ids;

  Params params;
  std::vector<std::vector<ParamCell>> beta;    // C x n_beta
  std::vector<std::vector<ParamCell>> lambda;  // C x n_nests
  std::vector<std::vector<ParamCell>> alpha;   // C x n_z (reference row fixed)

  double loglik = -kInf;
  FitStats stats;
  Eigen::VectorXd class_shares;  // mean posterior per class
  Eigen::MatrixXd posteriors;    // N x C

  std::vector<double> em_path;
  int em_iterations = 0;
  int polish_iterations = 0;
  double grad_inf_norm = kNaN;
  std::string status;  // converged | stalled | max_iterations
  bool converged = false;
  bool hessian_unreliable = false;
  bool degenerate_class = false;
  bool frozen_kernel = false;

  int n_starts = 1;
  int best_start = 0;
  int starts_at_best = 1;
  std::vector<double> start_logliks;
};

namespace detail {

// Covariance of the free coordinates from the observed information matrix.
// Returns false when the negated Hessian is not positive definite (the
// pseudo-inverse is then used and the result should be flagged).
inline bool information_covariance(const Eigen::MatrixXd& hessian, Eigen::MatrixXd& cov) {
  const int n = static_cast<int>(hessian.rows());
  Eigen::MatrixXd info = -hessian;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all() &&
      ldlt.isPositive()) {
    cov = ldlt.solve(Eigen::MatrixXd::Identity(n, n));
    return true;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double floor = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i)
    if (ev[i] > floor) inv[i] = 1.0 / ev[i];
  cov = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  return false;
}

inline void apply_class_permutation(const ModelContext& ctx, Params& p,
                                    std::vector<std::vector<uint8_t>>& bound_fixed,
                                    Eigen::MatrixXd& posteriors,
                                    const std::vector<int>& perm) {
  const int C = ctx.n_classes();
  Params q = p;
  auto bf = bound_fixed;
  Eigen::MatrixXd post = posteriors;
  const int ref = ctx.spec.reference_class;
  for (int c = 0; c < C; ++c) {
    q.beta.row(c) = p.beta.row(perm[c]);
    if (p.lambda.size()) q.lambda.row(c) = p.lambda.row(perm[c]);
    // Membership logits are shift-invariant: rebase so the reference row is 0.
    q.alpha.row(c) = p.alpha.row(perm[c]) - p.alpha.row(perm[ref]);
    bf[c] = bound_fixed[perm[c]];
    post.col(c) = posteriors.col(perm[c]);
  }
  q.alpha.row(ref).setZero();
  p = q;
  bound_fixed = bf;
  posteriors = post;
}

}  // namespace detail

struct CompensatingDifferential {
  Eigen::VectorXd value;           // per class; NaN when undefined
  std::vector<std::string> note;   // "", "at bound", "not significant at 5%", ...
};

// Money-metric trade-off beta_attr / beta_numeraire * scale per class.
// Coefficients pinned at a sign bound, and coefficients that fail a 5% level
// two-sided test, contribute a differential of zero; a numeraire that is
// pinned or zero leaves the ratio undefined.
inline CompensatingDifferential compensating_differential(const EstimationResult& res,
                                                          const std::string& attribute,
                                                          const std::string& numeraire,
                                                          double scale = 1.0) {
  int ia = -1, in = -1;
  for (size_t i = 0; i < res.beta_names.size(); ++i) {
    if (res.beta_names[i] == attribute) ia = static_cast<int>(i);
    if (res.beta_names[i] == numeraire) in = static_cast<int>(i);
  }
  if (ia < 0) throw model_error("attribute '" + attribute + "' is not in the utility spec");
  if (in < 0) throw model_error("numeraire '" + numeraire + "' is not in the utility spec");

  const int C = res.spec.n_classes;
  CompensatingDifferential out;
  out.value = Eigen::VectorXd::Constant(C, kNaN);
  out.note.assign(C, "");
  for (int c = 0; c < C; ++c) {
    const ParamCell& num = res.beta[c][in];
    const ParamCell& att = res.beta[c][ia];
    if (num.bound_fixed || num.value == 0.0) {
      out.note[c] = "undefined: numeraire coefficient is zero";
      continue;
    }
    if (att.bound_fixed) {
      out.value[c] = 0.0;
      out.note[c] = "at bound";
      continue;
    }
    if (!att.fixed && !att.frozen && !(att.p < 0.05)) {
      out.value[c] = 0.0;
      out.note[c] = "not significant at 5%";
      continue;
    }
    out.value[c] = att.value / num.value * scale;
  }
  return out;
}

// Average predicted choice probability per class over every situation in the
// data, optionally aggregated over groups of alternatives. Rows sum to one.
inline Eigen::MatrixXd avg_predicted_probs(const ModelContext& ctx, const Params& p,
                                           const std::vector<std::vector<int>>& groups) {
  const int C = ctx.n_classes();
  const int G = static_cast<int>(groups.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(C, G);
  int n_situations = 0;
  for (const auto& r : ctx.data->respondents)
    for (const auto& s : r.situations) {
      ++n_situations;
      for (int c = 0; c < C; ++c) {
        Eigen::VectorXd lp = ctx.situation_log_probs(s, p.beta.row(c), p.lambda.row(c));
        for (int g = 0; g < G; ++g)
          for (int j : groups[g])
            if (s.avail[j]) out(c, g) += std::exp(lp[j]);
      }
    }
  return out / double(n_situations);
}

namespace detail {

inline void fill_result_tables(const ModelContext& ctx, const SingleFit& fit,
                               EstimationResult& res, bool compute_se) {
  const int C = ctx.n_classes();
  const int B = ctx.n_beta();
  const int M = ctx.n_nests();
  const int P = ctx.n_z();

  res.beta.assign(C, std::vector<ParamCell>(B));
  res.lambda.assign(C, std::vector<ParamCell>(M));
  res.alpha.assign(C, std::vector<ParamCell>(P));
  for (int c = 0; c < C; ++c) {
    for (int b = 0; b < B; ++b) {
      auto& cell = res.beta[c][b];
      cell.value = fit.params.beta(c, b);
      cell.fixed = ctx.beta_constraint(b) == Constraint::Fixed;
      cell.bound_fixed = fit.bound_fixed[c][b] != 0;
    }
    for (int m = 0; m < M; ++m) {
      auto& cell = res.lambda[c][m];
      cell.value = fit.params.lambda(c, m);
      cell.fixed = ctx.lambda_is_fixed[m] != 0;
    }
    for (int p = 0; p < P; ++p) {
      auto& cell = res.alpha[c][p];
      cell.value = fit.params.alpha(c, p);
      cell.fixed = c == ctx.spec.reference_class;
    }
  }
  if (!compute_se) return;

  PackLayout layout = build_layout(ctx, &fit.bound_fixed);
  if (layout.size() == 0) return;
  auto grad_fn = [&](const Eigen::VectorXd& x) {
    Params p = unpack_natural(ctx, layout, x, &fit.bound_fixed);
    Eigen::VectorXd g;
    loglik_and_grad_natural(ctx, p, layout, g);
    return g;
  };
  Eigen::MatrixXd H = numerical_hessian(grad_fn, pack_natural(layout, fit.params), 1e-5);
  Eigen::MatrixXd cov;
  res.hessian_unreliable = !information_covariance(H, cov);

  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    const double v = cov(i, i);
    const double se = v > 0.0 ? std::sqrt(v) : kNaN;
    ParamCell* cell = e.kind == PackEntry::Beta    ? &res.beta[e.cls][e.index]
                      : e.kind == PackEntry::Lambda ? &res.lambda[e.cls][e.index]
                                                    : &res.alpha[e.cls][e.index];
    cell->se = se;
    if (std::isnan(se)) {
      res.hessian_unreliable = true;
      continue;
    }
    if (e.kind == PackEntry::Lambda) {
      // One-sided test of lambda = 1 against lambda < 1.
      cell->p = normal_cdf((cell->value - 1.0) / se);
    } else {
      cell->p = normal_two_sided_p(cell->value / se);
    }
  }
}

}  // namespace detail

inline EstimationResult finalize_fit(const ModelContext& ctx, SingleFit fit,
                                     const EstimateOptions& opts) {
  const int C = ctx.n_classes();
  LikelihoodParts parts = compute_parts(ctx, fit.params);
  Eigen::MatrixXd posteriors = parts.posterior;

  // Class relabeling. Shares always refer to mean posterior mass.
  std::vector<int> perm(C);
  std::iota(perm.begin(), perm.end(), 0);
  if (C > 1) {
    if (opts.ordering == EstimateOptions::Ordering::CwdAscending) {
      int ia = -1, in = -1;
      for (size_t i = 0; i < ctx.spec.terms.size(); ++i) {
        if (ctx.spec.terms[i].attribute == opts.ordering_attribute) ia = static_cast<int>(i);
        if (ctx.spec.terms[i].attribute == opts.ordering_numeraire) in = static_cast<int>(i);
      }
      if (ia < 0 || in < 0)
        throw model_error("class ordering needs both the attribute and the numeraire in the utility spec");
      Eigen::VectorXd key(C);
      for (int c = 0; c < C; ++c) {
        const double num = fit.params.beta(c, in);
        key[c] = num != 0.0 ? fit.params.beta(c, ia) / num : kInf;
      }
      std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return key[a] < key[b]; });
    } else {
      Eigen::VectorXd share = posteriors.colwise().mean().transpose();
      std::stable_sort(perm.begin(), perm.end(),
                       [&](int a, int b) { return share[a] > share[b]; });
    }
    bool identity = true;
    for (int c = 0; c < C; ++c) identity = identity && perm[c] == c;
    if (!identity)
      detail::apply_class_permutation(ctx, fit.params, fit.bound_fixed, posteriors, perm);
  }

  EstimationResult res;
  res.spec = ctx.spec;
  for (int b = 0; b < ctx.n_beta(); ++b) res.beta_names.push_back(ctx.beta_name(b));
  res.nest_names = ctx.nest_names;
  res.z_names = ctx.z_names;
  for (const auto& r : ctx.data->respondents) res.respondent_ids.push_back(r.id);
  res.params = fit.params;
  res.posteriors = posteriors;
  res.class_shares = posteriors.colwise().mean().transpose();
  res.loglik = fit.loglik;
  res.em_path = fit.em_path;
  res.em_iterations = fit.em_iterations;
  res.polish_iterations = fit.polish_iterations;
  res.grad_inf_norm = fit.grad_inf_norm;
  switch (fit.polish_status) {
    case OptimStatus::Converged: res.status = "converged"; break;
    case OptimStatus::Stalled: res.status = "stalled"; break;
    default: res.status = "max_iterations";
  }
  res.converged = fit.polish_status == OptimStatus::Converged ||
                  (fit.polish_status == OptimStatus::Stalled &&
                   fit.grad_inf_norm < 1e-3 * std::max(1.0, std::fabs(fit.loglik)));
  res.degenerate_class = (res.class_shares.array() < 1e-3).any();

  detail::fill_result_tables(ctx, fit, res, opts.compute_se);

  PackLayout layout = build_layout(ctx, &fit.bound_fixed);
  res.stats = fit_stats(fit.loglik, null_loglik(*ctx.data), layout.size(),
                        ctx.data->n_situations());
  return res;
}

inline EstimationResult estimate(const ChoiceDataset& data, const ModelSpec& spec,
                                 const IndicatorMatrix* covariates = nullptr,
                                 const EstimateOptions& opts = {}) {
  ModelContext ctx = build_context(data, spec, covariates);
  const int S = std::max(1, opts.n_starts);

  std::vector<SingleFit> fits(S);
  auto run_start = [&](int s) {
    std::mt19937_64 rng(mix_seed(opts.seed, static_cast<uint64_t>(s)));
    fits[s] = fit_from_init(ctx, random_init(ctx, rng), opts);
  };
  const int T = std::max(1, std::min(opts.threads, S));
  if (T == 1) {
    for (int s = 0; s < S; ++s) run_start(s);
  } else {
    std::atomic<int> next(0);
    std::vector<std::thread> pool;
    for (int t = 0; t < T; ++t)
      pool.emplace_back([&]() {
        for (int s = next.fetch_add(1); s < S; s = next.fetch_add(1)) run_start(s);
      });
    for (auto& th : pool) th.join();
  }

  int best = 0;
  for (int s = 1; s < S; ++s)
    if (fits[s].loglik > fits[best].loglik) best = s;

  EstimationResult res = finalize_fit(ctx, fits[best], opts);
  res.n_starts = S;
  res.best_start = best;
  res.starts_at_best = 0;
  for (int s = 0; s < S; ++s) {
    res.start_logliks.push_back(fits[s].loglik);
    if (fits[s].loglik >= fits[best].loglik - opts.start_window) ++res.starts_at_best;
  }
  return res;
}

// Single-start estimation from caller-supplied initial values.
inline EstimationResult estimate_from_init(const ChoiceDataset& data, const ModelSpec& spec,
                                           const Params& init,
                                           const IndicatorMatrix* covariates = nullptr,
                                           const EstimateOptions& opts = {}) {
  ModelContext ctx = build_context(data, spec, covariates);
  SingleFit fit = fit_from_init(ctx, init, opts);
  EstimationResult res = finalize_fit(ctx, fit, opts);
  res.n_starts = 1;
  res.start_logliks = {fit.loglik};
  return res;
}

// Second-stage membership estimation: the choice kernel coefficients stay
// exactly as estimated (bit for bit), only the membership logit over the new
// covariates is fit by EM plus polish. Class labels are inherited.
inline EstimationResult estimate_sequential_membership(const ChoiceDataset& data,
                                                       const ModelSpec& spec,
                                                       const EstimationResult& base,
                                                       const IndicatorMatrix* covariates,
                                                       const EstimateOptions& opts = {}) {
  ModelContext ctx = build_context(data, spec, covariates);
  const int C = ctx.n_classes();
  const int N = data.n_respondents();
  if (base.spec.n_classes != C) throw model_error("class count differs from the base model");

  // Kernel log-likelihoods are frozen; compute them once.
  Eigen::MatrixXd class_ll(N, C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      class_ll(n, c) = class_sequence_loglik(ctx, data.respondents[n], base.params.beta.row(c),
                                             base.params.lambda.row(c));

  auto eval = [&](const Eigen::MatrixXd& alpha, Eigen::MatrixXd* post) {
    Eigen::VectorXd eta(C), s(C);
    std::vector<double> lls(N);
    if (post) post->resize(N, C);
    for (int n = 0; n < N; ++n) {
      eta.noalias() = alpha * ctx.Z.row(n).transpose();
      const double lse = logsumexp(eta);
      for (int c = 0; c < C; ++c) s[c] = eta[c] - lse + class_ll(n, c);
      const double ll_n = logsumexp(s);
      lls[n] = ll_n;
      if (post)
        for (int c = 0; c < C; ++c) (*post)(n, c) = std::exp(s[c] - ll_n);
    }
    return chunked_sum(std::span<const double>(lls.data(), lls.size()));
  };

  Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(C, ctx.n_z());
  Eigen::MatrixXd post;
  double ll = eval(alpha, &post);
  std::vector<double> em_path = {ll};
  int em_iterations = 0;
  for (int it = 0; it < opts.max_em_iterations; ++it) {
    FmnlOptions fo;
    fo.max_iterations = 50;
    fo.gtol = 1e-9 * std::max(1.0, std::fabs(ll));
    FmnlFit mf = fractional_logit_fit(post, ctx.Z, ctx.spec.reference_class, &alpha, fo);
    alpha = mf.gamma;
    const double ll_new = eval(alpha, &post);
    em_path.push_back(ll_new);
    em_iterations = it + 1;
    const double change = ll_new - ll;
    ll = ll_new;
    if (std::fabs(change) < opts.em_tol * (std::fabs(ll) + 1.0)) break;
  }

  // Polish over the membership coordinates only.
  PackLayout layout;
  for (int c = 0; c < C; ++c) {
    if (c == ctx.spec.reference_class) continue;
    for (int p = 0; p < ctx.n_z(); ++p)
      layout.entries.push_back({PackEntry::Alpha, c, p, Constraint::Free});
  }
  auto unpack_alpha = [&](const Eigen::VectorXd& x) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(C, ctx.n_z());
    for (int i = 0; i < layout.size(); ++i)
      a(layout.entries[i].cls, layout.entries[i].index) = x[i];
    return a;
  };
  ObjectiveFn obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    Eigen::MatrixXd a = unpack_alpha(x);
    Eigen::MatrixXd w;
    const double f = eval(a, &w);
    if (grad) {
      grad->resize(layout.size());
      Eigen::VectorXd eta(C);
      Eigen::MatrixXd agrad = Eigen::MatrixXd::Zero(C, ctx.n_z());
      for (int n = 0; n < N; ++n) {
        eta.noalias() = a * ctx.Z.row(n).transpose();
        const double lse = logsumexp(eta);
        for (int c = 0; c < C; ++c) {
          if (c == ctx.spec.reference_class) continue;
          agrad.row(c) += (w(n, c) - std::exp(eta[c] - lse)) * ctx.Z.row(n);
        }
      }
      for (int i = 0; i < layout.size(); ++i)
        (*grad)[i] = -agrad(layout.entries[i].cls, layout.entries[i].index);
    }
    return -f;
  };
  Eigen::VectorXd x0(layout.size());
  for (int i = 0; i < layout.size(); ++i)
    x0[i] = alpha(layout.entries[i].cls, layout.entries[i].index);
  OptimOptions oo;
  oo.max_iterations = opts.max_polish_iterations;
  oo.gtol = 1e-6 * std::max(1.0, std::fabs(ll));
  oo.ftol_rel = opts.polish_ftol;
  OptimResult r = bfgs_minimize(obj, x0, oo);
  alpha = unpack_alpha(r.x);
  ll = -r.f;
  eval(alpha, &post);

  SingleFit fit;
  fit.params = base.params;
  fit.params.alpha = alpha;
  fit.bound_fixed.assign(C, std::vector<uint8_t>(ctx.n_beta(), 0));
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < ctx.n_beta(); ++b)
      fit.bound_fixed[c][b] = base.beta[c][b].bound_fixed ? 1 : 0;
  fit.loglik = ll;
  fit.em_path = em_path;
  fit.em_iterations = em_iterations;
  fit.polish_iterations = r.iterations;
  fit.polish_status = r.status;
  fit.grad_inf_norm = r.grad_inf_norm;

  // Class labels are inherited from the base model, so no reordering here.
  EstimationResult res;
  res.spec = ctx.spec;
  for (int b = 0; b < ctx.n_beta(); ++b) res.beta_names.push_back(ctx.beta_name(b));
  res.nest_names = ctx.nest_names;
  res.z_names = ctx.z_names;
  for (const auto& rr : data.respondents) res.respondent_ids.push_back(rr.id);
  res.params = fit.params;
  res.posteriors = post;
  res.class_shares = post.colwise().mean().transpose();
  res.loglik = ll;
  res.em_path = em_path;
  res.em_iterations = em_iterations;
  res.polish_iterations = r.iterations;
  res.grad_inf_norm = r.grad_inf_norm;
  switch (r.status) {
    case OptimStatus::Converged: res.status = "converged"; break;
    case OptimStatus::Stalled: res.status = "stalled"; break;
    default: res.status = "max_iterations";
  }
  res.converged = r.status == OptimStatus::Converged ||
                  (r.status == OptimStatus::Stalled &&
                   r.grad_inf_norm < 1e-3 * std::max(1.0, std::fabs(ll)));
  res.degenerate_class = (res.class_shares.array() < 1e-3).any();
  res.frozen_kernel = true;

  detail::fill_result_tables(ctx, fit, res, false);
  for (int c = 0; c < C; ++c) {
    for (auto& cell : res.beta[c]) cell.frozen = true;
    for (auto& cell : res.lambda[c]) cell.frozen = true;
  }

  if (opts.compute_se && layout.size() > 0) {
    auto grad_fn = [&](const Eigen::VectorXd& x) {
      Eigen::VectorXd g;
      obj(x, &g);
      return Eigen::VectorXd(-g);  // gradient of +LL
    };
    Eigen::VectorXd xn(layout.size());
    for (int i = 0; i < layout.size(); ++i)
      xn[i] = alpha(layout.entries[i].cls, layout.entries[i].index);
    Eigen::MatrixXd H = numerical_hessian(grad_fn, xn, 1e-5);
    Eigen::MatrixXd cov;
    res.hessian_unreliable = !detail::information_covariance(H, cov);
    for (int i = 0; i < layout.size(); ++i) {
      const auto& e = layout.entries[i];
      const double v = cov(i, i);
      const double se = v > 0.0 ? std::sqrt(v) : kNaN;
      res.alpha[e.cls][e.index].se = se;
      if (!std::isnan(se))
        res.alpha[e.cls][e.index].p = normal_two_sided_p(res.alpha[e.cls][e.index].value / se);
      else
        res.hessian_unreliable = true;
    }
  }

  res.stats = fit_stats(ll, null_loglik(data), layout.size(), data.n_situations());
  return res;
}

// Greedy-free exact matching of estimated classes to a reference set of
// coefficients: the permutation minimizing the summed squared distance
// between beta rows. C is small, so all C! orders are tried.
inline std::vector<int> match_classes(const Eigen::MatrixXd& beta,
                                      const Eigen::MatrixXd& reference_beta) {
  const int C = static_cast<int>(beta.rows());
  std::vector<int> perm(C), best(C);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_cost = kInf;
  do {
    double cost = 0.0;
    for (int c = 0; c < C; ++c)
      cost += (beta.row(perm[c]) - reference_beta.row(c)).squaredNorm();
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;  // best[c] = estimated class matching reference class c
}

}  // namespace lccm
