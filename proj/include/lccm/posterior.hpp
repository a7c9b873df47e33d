#pragma once

// Posterior-weighted profiling of respondent indicators across latent
// classes. Respondent n contributes to class c with weight w_nc, its
// posterior membership probability.
//
//   class mean      m_c = sum_n w_nc x_n / W_c,          W_c = sum_n w_nc
//   class variance  v_c = sum_n w_nc (x_n - m_c)^2 / W_c
//   one-way F       [sum_c W_c (m_c - m)^2 / (C-1)] /
//                   [sum_c sum_n w_nc (x_n - m_c)^2 / (N-C)]
// with m the plain sample mean over the N non-missing respondents and df
// (C-1, N-C). Pairwise class comparisons use Welch's t with Kish effective
// sample sizes n_c = W_c^2 / sum_n w_nc^2; the variance entering the t test
// is Bessel-corrected, v_c * n_c / (n_c - 1), so that crisp 0/1 weights
// reproduce the classical two-sample Welch test exactly.

#include "lccm/dataset.hpp"
#include "lccm/stats.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

namespace lccm {

struct AnovaResult {
  double F = kNaN;
  double p = kNaN;
  double df1 = 0.0, df2 = 0.0;
  double grand_mean = kNaN;
  Eigen::VectorXd class_means;    // NaN for zero-weight classes
  Eigen::VectorXd class_vars;     // weighted, uncorrected
  Eigen::VectorXd class_weights;  // W_c
  double between_ms = kNaN, within_ms = kNaN;
  int n_used = 0;
};

// x and W row-aligned, no missing values (callers filter first).
inline AnovaResult weighted_anova(const Eigen::VectorXd& x, const Eigen::MatrixXd& W) {
  const int N = static_cast<int>(x.size());
  const int C = static_cast<int>(W.cols());
  if (W.rows() != N) throw std::invalid_argument("weights and values are misaligned");
  if (C < 2) throw std::invalid_argument("profiling requires at least 2 classes");
  if (N < 1) throw std::invalid_argument("no observations");
  for (int n = 0; n < N; ++n) {
    if (std::isnan(x[n])) throw std::invalid_argument("missing value passed to weighted_anova");
    for (int c = 0; c < C; ++c)
      if (W(n, c) < 0.0) throw std::invalid_argument("negative posterior weight");
  }

  AnovaResult res;
  res.n_used = N;
  res.class_means = Eigen::VectorXd::Constant(C, kNaN);
  res.class_vars = Eigen::VectorXd::Constant(C, kNaN);
  res.class_weights = Eigen::VectorXd::Zero(C);
  res.grand_mean = x.mean();

  double between = 0.0, within = 0.0;
  for (int c = 0; c < C; ++c) {
    const double Wc = W.col(c).sum();
    res.class_weights[c] = Wc;
    if (Wc == 0.0) continue;  // empty class: no contribution to either sum
    const double mc = W.col(c).dot(x) / Wc;
    res.class_means[c] = mc;
    double ss = 0.0;
    for (int n = 0; n < N; ++n) ss += W(n, c) * (x[n] - mc) * (x[n] - mc);
    res.class_vars[c] = ss / Wc;
    within += ss;
    between += Wc * (mc - res.grand_mean) * (mc - res.grand_mean);
  }

  res.df1 = C - 1;
  res.df2 = N - C;
  if (res.df2 <= 0) return res;  // too few respondents for the test
  res.between_ms = between / res.df1;
  res.within_ms = within / res.df2;
  if (between == 0.0) {
    res.F = 0.0;
    res.p = 1.0;
  } else if (within == 0.0) {
    res.F = kInf;
    res.p = 0.0;
  } else {
    res.F = res.between_ms / res.within_ms;
    res.p = f_upper_p(res.F, res.df1, res.df2);
  }
  return res;
}

struct WelchResult {
  double t = kNaN;
  double df = kNaN;
  double p = kNaN;
  double mean_a = kNaN, mean_b = kNaN;
  double n_eff_a = kNaN, n_eff_b = kNaN;
};

// Welch two-sample t test between two posterior-weighted groups over the
// same value vector.
inline WelchResult pairwise_t(const Eigen::VectorXd& x, const Eigen::VectorXd& wa,
                              const Eigen::VectorXd& wb) {
  const int N = static_cast<int>(x.size());
  if (wa.size() != N || wb.size() != N)
    throw std::invalid_argument("weights and values are misaligned");

  WelchResult res;
  auto group = [&](const Eigen::VectorXd& w, double& mean, double& var_bessel, double& n_eff) {
    double s = 0.0, s2 = 0.0;
    for (int n = 0; n < N; ++n) {
      if (w[n] < 0.0) throw std::invalid_argument("negative posterior weight");
      s += w[n];
      s2 += w[n] * w[n];
    }
    if (s2 == 0.0) { mean = var_bessel = n_eff = kNaN; return; }
    n_eff = s * s / s2;
    const double m = w.dot(x) / s;
    mean = m;
    double ss = 0.0;
    for (int n = 0; n < N; ++n) ss += w[n] * (x[n] - m) * (x[n] - m);
    const double v = ss / s;                       // weighted, uncorrected
    var_bessel = n_eff > 1.0 ? v * n_eff / (n_eff - 1.0) : kNaN;
  };

  double va = kNaN, vb = kNaN;
  group(wa, res.mean_a, va, res.n_eff_a);
  group(wb, res.mean_b, vb, res.n_eff_b);
  if (std::isnan(va) || std::isnan(vb)) return res;

  const double qa = va / res.n_eff_a;
  const double qb = vb / res.n_eff_b;
  const double se2 = qa + qb;
  if (se2 == 0.0) {
    res.t = res.mean_a == res.mean_b ? 0.0 : (res.mean_a > res.mean_b ? kInf : -kInf);
    res.df = res.n_eff_a + res.n_eff_b - 2.0;
    res.p = res.t == 0.0 ? 1.0 : 0.0;
    return res;
  }
  res.t = (res.mean_a - res.mean_b) / std::sqrt(se2);
  res.df = se2 * se2 / (qa * qa / (res.n_eff_a - 1.0) + qb * qb / (res.n_eff_b - 1.0));
  res.p = t_two_sided_p(res.t, res.df);
  return res;
}

struct IndicatorProfile {
  std::string name;
  int n_complete = 0;
  AnovaResult anova;
  Eigen::MatrixXd pair_t;   // C x C, NaN diagonal; antisymmetric
  Eigen::MatrixXd pair_df;
  Eigen::MatrixXd pair_p;
};

struct ClassProfile {
  std::vector<std::string> class_labels;
  Eigen::VectorXd avg_weight;  // mean posterior share across all respondents
  std::vector<IndicatorProfile> indicators;
};

// Row i of `posterior` must describe the respondent in row i of `indicators`
// (join the tables first). Missing indicator values are dropped pairwise:
// each indicator is profiled over its own complete cases.
inline ClassProfile class_profile(const IndicatorMatrix& indicators,
                                  const Eigen::MatrixXd& posterior) {
  const int N = indicators.n_rows();
  const int C = static_cast<int>(posterior.cols());
  if (posterior.rows() != N)
    throw std::invalid_argument("posterior rows do not match the indicator table");
  if (C < 2) throw std::invalid_argument("profiling requires at least 2 classes");

  ClassProfile out;
  for (int c = 0; c < C; ++c) out.class_labels.push_back("class" + std::to_string(c + 1));
  out.avg_weight = posterior.colwise().mean().transpose();

  for (int k = 0; k < indicators.n_cols(); ++k) {
    std::vector<int> rows = indicators.complete_rows({k});
    IndicatorProfile prof;
    prof.name = indicators.names[k];
    prof.n_complete = static_cast<int>(rows.size());
    prof.pair_t = Eigen::MatrixXd::Constant(C, C, kNaN);
    prof.pair_df = Eigen::MatrixXd::Constant(C, C, kNaN);
    prof.pair_p = Eigen::MatrixXd::Constant(C, C, kNaN);
    if (!rows.empty()) {
      Eigen::VectorXd x(rows.size());
      Eigen::MatrixXd W(rows.size(), C);
      for (size_t i = 0; i < rows.size(); ++i) {
        x[static_cast<int>(i)] = indicators.values(rows[i], k);
        W.row(static_cast<int>(i)) = posterior.row(rows[i]);
      }
      prof.anova = weighted_anova(x, W);
      for (int a = 0; a < C; ++a)
        for (int b = 0; b < C; ++b) {
          if (a == b) continue;
          WelchResult w = pairwise_t(x, W.col(a), W.col(b));
          prof.pair_t(a, b) = w.t;
          prof.pair_df(a, b) = w.df;
          prof.pair_p(a, b) = w.p;
        }
    }
    out.indicators.push_back(std::move(prof));
  }
  return out;
}

}  // namespace lccm
