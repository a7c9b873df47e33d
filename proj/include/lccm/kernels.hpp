#pragma once

// Choice kernels. Everything is computed in log space with max-shifted
// logsumexp; unavailable alternatives carry log-probability -inf and zero
// gradient.
//
// Two-level nested logit with inclusive-value coefficient lambda_m per nest:
//   log P(i) = u_i/lambda_m - A_m + lambda_m*A_m - logsumexp_m'(lambda_m'*A_m')
// where A_m = logsumexp over available j in nest m of u_j/lambda_m and the
// outer logsumexp runs over nests with at least one available member. With
// every lambda equal to 1 this collapses to plain multinomial logit.

#include "lccm/stats.hpp"

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace lccm {

struct NestStructure {
  std::vector<std::vector<int>> members;  // partition of the alternatives
  std::vector<int> nest_of;               // alternative -> nest index

  int n_nests() const { return static_cast<int>(members.size()); }

  static NestStructure from_members(std::vector<std::vector<int>> groups, int n_alternatives) {
    NestStructure n;
    n.members = std::move(groups);
    n.nest_of.assign(n_alternatives, -1);
    for (size_t m = 0; m < n.members.size(); ++m) {
      if (n.members[m].empty()) throw std::invalid_argument("nest with no alternatives");
      for (int j : n.members[m]) {
        if (j < 0 || j >= n_alternatives) throw std::invalid_argument("nest member out of range");
        if (n.nest_of[j] != -1) throw std::invalid_argument("alternative assigned to two nests");
        n.nest_of[j] = static_cast<int>(m);
      }
    }
    for (int j = 0; j < n_alternatives; ++j)
      if (n.nest_of[j] == -1) throw std::invalid_argument("alternative missing from nest structure");
    return n;
  }

  static NestStructure singletons(int n_alternatives) {
    std::vector<std::vector<int>> groups;
    for (int j = 0; j < n_alternatives; ++j) groups.push_back({j});
    return from_members(std::move(groups), n_alternatives);
  }

  bool is_singleton(int m) const { return members[m].size() == 1; }
};

namespace detail {
inline void check_avail(const Eigen::VectorXd& u, const std::vector<uint8_t>& avail) {
  if (static_cast<int>(avail.size()) != u.size())
    throw std::invalid_argument("availability mask size mismatch");
  for (uint8_t a : avail)
    if (a) return;
  throw std::invalid_argument("no available alternatives");
}
}  // namespace detail

inline Eigen::VectorXd mnl_log_probs(const Eigen::VectorXd& u,
                                     const std::vector<uint8_t>& avail) {
  detail::check_avail(u, avail);
  const int J = static_cast<int>(u.size());
  double m = -kInf;
  for (int j = 0; j < J; ++j)
    if (avail[j] && u[j] > m) m = u[j];
  double s = 0.0;
  for (int j = 0; j < J; ++j)
    if (avail[j]) s += std::exp(u[j] - m);
  const double lse = m + std::log(s);
  Eigen::VectorXd out(J);
  for (int j = 0; j < J; ++j) out[j] = avail[j] ? u[j] - lse : -kInf;
  return out;
}

struct KernelGrad {
  double logp = 0.0;
  Eigen::VectorXd du;       // d logP(chosen) / d u_j, zero for unavailable j
  Eigen::VectorXd dlambda;  // per nest; empty for plain logit
};

inline KernelGrad mnl_logp_grad(const Eigen::VectorXd& u, const std::vector<uint8_t>& avail,
                                int chosen) {
  if (chosen < 0 || chosen >= u.size() || !avail[chosen])
    throw std::invalid_argument("chosen alternative is not available");
  Eigen::VectorXd lp = mnl_log_probs(u, avail);
  KernelGrad g;
  g.logp = lp[chosen];
  g.du = Eigen::VectorXd::Zero(u.size());
  for (int j = 0; j < u.size(); ++j)
    if (avail[j]) g.du[j] = -std::exp(lp[j]);
  g.du[chosen] += 1.0;
  return g;
}

namespace detail {

struct NestEval {
  std::vector<double> A;      // within-nest logsumexp of u/lambda (NaN if empty)
  std::vector<double> ubar;   // within-nest expected utility
  std::vector<double> logq;   // log nest probability (-inf if empty)
  double lse = 0.0;           // logsumexp over lambda_m * A_m
};

inline NestEval eval_nests(const Eigen::VectorXd& u, const std::vector<uint8_t>& avail,
                           const NestStructure& nests, const Eigen::VectorXd& lambda) {
  if (lambda.size() != nests.n_nests())
    throw std::invalid_argument("one lambda per nest required");
  for (int m = 0; m < lambda.size(); ++m)
    if (!(lambda[m] > 0.0))
      throw std::invalid_argument("nest coefficient must be positive");

  const int M = nests.n_nests();
  NestEval e;
  e.A.assign(M, kNaN);
  e.ubar.assign(M, kNaN);
  e.logq.assign(M, -kInf);

  std::vector<double> iv(M, -kInf);
  for (int m = 0; m < M; ++m) {
    double mx = -kInf;
    for (int j : nests.members[m])
      if (avail[j] && u[j] / lambda[m] > mx) mx = u[j] / lambda[m];
    if (mx == -kInf) continue;  // nest has no available member
    double s = 0.0, su = 0.0;
    for (int j : nests.members[m]) {
      if (!avail[j]) continue;
      double w = std::exp(u[j] / lambda[m] - mx);
      s += w;
      su += w * u[j];
    }
    e.A[m] = mx + std::log(s);
    e.ubar[m] = su / s;
    iv[m] = lambda[m] * e.A[m];
  }
  e.lse = logsumexp(std::span<const double>(iv.data(), iv.size()));
  for (int m = 0; m < M; ++m)
    if (iv[m] != -kInf) e.logq[m] = iv[m] - e.lse;
  return e;
}

}  // namespace detail

inline Eigen::VectorXd nl_log_probs(const Eigen::VectorXd& u, const std::vector<uint8_t>& avail,
                                    const NestStructure& nests, const Eigen::VectorXd& lambda) {
  detail::check_avail(u, avail);
  auto e = detail::eval_nests(u, avail, nests, lambda);
  const int J = static_cast<int>(u.size());
  Eigen::VectorXd out = Eigen::VectorXd::Constant(J, -kInf);
  for (int j = 0; j < J; ++j) {
    if (!avail[j]) continue;
    const int m = nests.nest_of[j];
    out[j] = u[j] / lambda[m] - e.A[m] + e.logq[m];
  }
  return out;
}

inline KernelGrad nl_logp_grad(const Eigen::VectorXd& u, const std::vector<uint8_t>& avail,
                               const NestStructure& nests, const Eigen::VectorXd& lambda,
                               int chosen) {
  if (chosen < 0 || chosen >= u.size() || !avail[chosen])
    throw std::invalid_argument("chosen alternative is not available");
  detail::check_avail(u, avail);
  auto e = detail::eval_nests(u, avail, nests, lambda);

  const int J = static_cast<int>(u.size());
  const int M = nests.n_nests();
  const int cm = nests.nest_of[chosen];

  KernelGrad g;
  g.logp = u[chosen] / lambda[cm] - e.A[cm] + e.logq[cm];
  g.du = Eigen::VectorXd::Zero(J);
  g.dlambda = Eigen::VectorXd::Zero(M);

  for (int j = 0; j < J; ++j) {
    if (!avail[j]) continue;
    const int m = nests.nest_of[j];
    const double s = std::exp(u[j] / lambda[m] - e.A[m]);  // within-nest share
    const double q = std::exp(e.logq[m]);
    double d = -q * s;
    if (m == cm) d += s - s / lambda[m];
    if (j == chosen) d += 1.0 / lambda[cm];
    g.du[j] = d;
  }

  for (int m = 0; m < M; ++m) {
    if (e.logq[m] == -kInf) continue;  // empty nest contributes nothing
    const double q = std::exp(e.logq[m]);
    const double div = e.A[m] - e.ubar[m] / lambda[m];  // d(lambda*A)/d lambda
    double d = -q * div;
    if (m == cm)
      d += (e.ubar[m] - u[chosen]) / (lambda[m] * lambda[m]) + div;
    g.dlambda[m] = d;
  }
  return g;
}

}  // namespace lccm
