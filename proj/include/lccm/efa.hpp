#pragma once

// Exploratory factor analysis of attitudinal indicators.
//
// Pipeline: listwise-complete standardization -> correlation matrix R ->
// principal-axis factoring with squared-multiple-correlation starting
// communalities, iterated to a fixed point -> varimax rotation with Kaiser
// row normalization -> factors ordered by explained variance with the
// dominant loading made positive. The factor count defaults to the number of
// eigenvalues of R above 1.
//
// Retention flags items by salient loadings (|loading| >= threshold): none
// salient and multiple salient both exclude an item. Regression (Thurstone)
// score coefficients R^-1 * Lambda are recomputed on the retained subset;
// the loading matrix itself is left untouched.

#include "lccm/dataset.hpp"
#include "lccm/stats.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace lccm {

class efa_error : public std::runtime_error {
public:
  explicit efa_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct EfaOptions {
  int n_factors = 0;  // 0: eigenvalue-above-1 rule
  double tol = 1e-6;  // communality fixed-point tolerance
  int max_iterations = 100;
  bool unit_variance_scores = false;  // rescale scores to unit fit-sample variance
};

enum class ItemStatus { Retained, NoSalientLoading, CrossLoading };

struct EfaResult {
  std::vector<std::string> item_names;
  int n_factors = 0;
  int n_complete = 0;

  Eigen::VectorXd item_means, item_sds;  // from the listwise-complete fit sample
  Eigen::MatrixXd correlation;
  Eigen::VectorXd eigenvalues;  // of R, descending

  Eigen::MatrixXd loadings;  // items x factors, rotated
  Eigen::VectorXd communalities;
  Eigen::VectorXd uniquenesses;

  std::vector<ItemStatus> status;
  double salience_threshold = 0.0;  // 0 until apply_retention
  Eigen::MatrixXd score_coefficients;  // zero rows for excluded items
  Eigen::VectorXd score_scale;         // per-factor divisor applied to scores

  bool converged = false;
  int iterations = 0;
  bool unit_variance_scores = false;

  std::vector<int> retained_items() const {
    std::vector<int> out;
    for (size_t k = 0; k < status.size(); ++k)
      if (status[k] == ItemStatus::Retained) out.push_back(static_cast<int>(k));
    return out;
  }
};

namespace detail {

// Score coefficients over the listed items; rows outside the set stay zero.
inline void recompute_scores(EfaResult& r, const std::vector<int>& items) {
  const int K = static_cast<int>(r.item_names.size());
  const int F = r.n_factors;
  const int Kr = static_cast<int>(items.size());
  Eigen::MatrixXd Rr(Kr, Kr), Lr(Kr, F);
  for (int a = 0; a < Kr; ++a) {
    Lr.row(a) = r.loadings.row(items[a]);
    for (int b = 0; b < Kr; ++b) Rr(a, b) = r.correlation(items[a], items[b]);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(Rr);
  if (ldlt.info() != Eigen::Success)
    throw efa_error("correlation matrix of the retained items is singular");
  Eigen::MatrixXd coef = ldlt.solve(Lr);

  r.score_scale = Eigen::VectorXd::Ones(F);
  if (r.unit_variance_scores) {
    // Var(score_f) = (Lambda' R^-1 Lambda)_ff on the retained set.
    Eigen::MatrixXd V = Lr.transpose() * coef;
    for (int f = 0; f < F; ++f)
      if (V(f, f) > 0.0) r.score_scale[f] = std::sqrt(V(f, f));
  }
  r.score_coefficients = Eigen::MatrixXd::Zero(K, F);
  for (int a = 0; a < Kr; ++a)
    r.score_coefficients.row(items[a]) = coef.row(a).array() / r.score_scale.transpose().array();
}

inline void varimax_rotate(Eigen::MatrixXd& L, const Eigen::VectorXd& communalities) {
  const int K = static_cast<int>(L.rows());
  const int F = static_cast<int>(L.cols());
  if (F < 2) return;

  // Kaiser normalization: rotate unit-communality rows.
  Eigen::VectorXd scale(K);
  for (int k = 0; k < K; ++k) scale[k] = communalities[k] > 1e-12 ? std::sqrt(communalities[k]) : 0.0;
  Eigen::MatrixXd W = L;
  for (int k = 0; k < K; ++k)
    W.row(k) = scale[k] > 0.0 ? (L.row(k) / scale[k]).eval() : Eigen::RowVectorXd::Zero(F).eval();

  for (int sweep = 0; sweep < 100; ++sweep) {
    double biggest = 0.0;
    for (int p = 0; p < F - 1; ++p)
      for (int q = p + 1; q < F; ++q) {
        double A = 0, B = 0, Cs = 0, D = 0;
        for (int k = 0; k < K; ++k) {
          const double u = W(k, p) * W(k, p) - W(k, q) * W(k, q);
          const double v = 2.0 * W(k, p) * W(k, q);
          A += u;
          B += v;
          Cs += u * u - v * v;
          D += 2.0 * u * v;
        }
        const double num = D - 2.0 * A * B / K;
        const double den = Cs - (A * A - B * B) / K;
        const double phi = 0.25 * std::atan2(num, den);
        if (std::fabs(phi) < 1e-10) continue;
        biggest = std::max(biggest, std::fabs(phi));
        const double cs = std::cos(phi), sn = std::sin(phi);
        for (int k = 0; k < K; ++k) {
          const double a = W(k, p), b = W(k, q);
          W(k, p) = cs * a + sn * b;
          W(k, q) = -sn * a + cs * b;
        }
      }
    if (biggest < 1e-9) break;
  }

  for (int k = 0; k < K; ++k) L.row(k) = W.row(k) * scale[k];
}

}  // namespace detail

inline EfaResult fit_efa(const IndicatorMatrix& indicators, const EfaOptions& opts = {}) {
  const int K = indicators.n_cols();
  if (K < 2) throw efa_error("factor analysis needs at least 2 indicators");
  std::vector<int> rows = indicators.complete_rows();
  const int N = static_cast<int>(rows.size());
  if (N < K + 1)
    throw efa_error("only " + std::to_string(N) +
                    " complete responses for " + std::to_string(K) + " indicators");

  EfaResult r;
  r.item_names = indicators.names;
  r.n_complete = N;
  r.unit_variance_scores = opts.unit_variance_scores;

  Eigen::MatrixXd Z(N, K);
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) Z(i, k) = indicators.values(rows[i], k);
  r.item_means = Z.colwise().mean().transpose();
  r.item_sds.resize(K);
  for (int k = 0; k < K; ++k) {
    Z.col(k).array() -= r.item_means[k];
    const double sd = std::sqrt(Z.col(k).squaredNorm() / N);
    if (sd < 1e-12)
      throw efa_error("indicator '" + indicators.names[k] + "' has zero variance");
    r.item_sds[k] = sd;
    Z.col(k) /= sd;
  }
  r.correlation = (Z.transpose() * Z) / N;

  for (int a = 0; a < K; ++a)
    for (int b = a + 1; b < K; ++b)
      if (std::fabs(r.correlation(a, b)) > 1.0 - 1e-10)
        throw efa_error("indicators '" + indicators.names[a] + "' and '" + indicators.names[b] +
                        "' are collinear");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.correlation);
  if (es.info() != Eigen::Success) throw efa_error("eigendecomposition failed");
  r.eigenvalues = es.eigenvalues().reverse();

  int F = opts.n_factors;
  if (F <= 0) {
    F = 0;
    for (int i = 0; i < K; ++i)
      if (r.eigenvalues[i] > 1.0) ++F;
    if (F == 0) throw efa_error("no eigenvalue of the correlation matrix exceeds 1");
  }
  if (F >= K) throw efa_error("factor count must be below the indicator count");
  r.n_factors = F;

  // Starting communalities: squared multiple correlations 1 - 1/diag(R^-1).
  Eigen::MatrixXd Rinv = r.correlation.ldlt().solve(Eigen::MatrixXd::Identity(K, K));
  Eigen::VectorXd h(K);
  for (int k = 0; k < K; ++k) h[k] = 1.0 - 1.0 / Rinv(k, k);

  Eigen::MatrixXd L(K, F);
  r.converged = false;
  for (int it = 0; it < opts.max_iterations; ++it) {
    Eigen::MatrixXd Rh = r.correlation;
    Rh.diagonal() = h;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eh(Rh);
    for (int f = 0; f < F; ++f) {
      const int idx = K - 1 - f;  // eigenvalues ascend; take the top F
      const double ev = std::max(eh.eigenvalues()[idx], 0.0);
      L.col(f) = eh.eigenvectors().col(idx) * std::sqrt(ev);
    }
    Eigen::VectorXd h_new = L.rowwise().squaredNorm().cwiseMin(1.0);
    r.iterations = it + 1;
    const double delta = (h_new - h).cwiseAbs().maxCoeff();
    h = h_new;
    if (delta < opts.tol) {
      r.converged = true;
      break;
    }
  }

  r.communalities = h;
  detail::varimax_rotate(L, h);

  // Deterministic presentation: factors by explained variance, dominant
  // loading positive.
  std::vector<int> order(F);
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd ssl = L.colwise().squaredNorm().transpose();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ssl[a] > ssl[b]; });
  Eigen::MatrixXd Lo(K, F);
  for (int f = 0; f < F; ++f) Lo.col(f) = L.col(order[f]);
  for (int f = 0; f < F; ++f) {
    int arg = 0;
    for (int k = 1; k < K; ++k)
      if (std::fabs(Lo(k, f)) > std::fabs(Lo(arg, f))) arg = k;
    if (Lo(arg, f) < 0.0) Lo.col(f) = -Lo.col(f);
  }
  r.loadings = Lo;
  r.uniquenesses = (1.0 - h.array()).matrix();
  r.status.assign(K, ItemStatus::Retained);

  std::vector<int> all(K);
  std::iota(all.begin(), all.end(), 0);
  detail::recompute_scores(r, all);
  return r;
}

// Flags items without exactly one salient loading and refits the score
// coefficients on the surviving items. Loadings are unchanged.
inline EfaResult apply_retention(const EfaResult& fitted, double threshold = 0.32) {
  if (!(threshold > 0.0)) throw efa_error("salience threshold must be positive");
  EfaResult r = fitted;
  r.salience_threshold = threshold;
  const int K = static_cast<int>(r.item_names.size());
  for (int k = 0; k < K; ++k) {
    int salient = 0;
    for (int f = 0; f < r.n_factors; ++f)
      if (std::fabs(r.loadings(k, f)) >= threshold) ++salient;
    r.status[k] = salient == 0  ? ItemStatus::NoSalientLoading
                  : salient > 1 ? ItemStatus::CrossLoading
                                : ItemStatus::Retained;
  }
  std::vector<int> keep = r.retained_items();
  if (keep.empty()) throw efa_error("no item has exactly one salient loading");
  detail::recompute_scores(r, keep);
  return r;
}

// Regression factor scores for any indicator table with the same columns.
// Rows missing a retained item get a NaN row.
inline Eigen::MatrixXd factor_scores(const EfaResult& r, const IndicatorMatrix& indicators) {
  const int K = static_cast<int>(r.item_names.size());
  if (indicators.n_cols() != K) throw efa_error("indicator columns do not match the fit");
  for (int k = 0; k < K; ++k)
    if (indicators.names[k] != r.item_names[k])
      throw efa_error("indicator columns do not match the fit");

  std::vector<int> keep = r.retained_items();
  const int N = indicators.n_rows();
  Eigen::MatrixXd S = Eigen::MatrixXd::Constant(N, r.n_factors, kNaN);
  Eigen::VectorXd z(K);
  for (int n = 0; n < N; ++n) {
    bool ok = true;
    for (int k : keep)
      if (indicators.is_missing(n, k)) { ok = false; break; }
    if (!ok) continue;
    z.setZero();
    for (int k : keep) z[k] = (indicators.values(n, k) - r.item_means[k]) / r.item_sds[k];
    S.row(n) = (r.score_coefficients.transpose() * z).transpose();
  }
  return S;
}

}  // namespace lccm
