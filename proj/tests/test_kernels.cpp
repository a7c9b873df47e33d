#include "lccm/kernels.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

using namespace lccm;
using Eigen::VectorXd;

namespace {

std::vector<uint8_t> all_avail(int j) { return std::vector<uint8_t>(j, 1); }

// Direct-arithmetic two-level logit, written without any log-space tricks so it
// can serve as an independent check on the numerically hardened implementation.
VectorXd nl_probs_direct(const VectorXd& u, const std::vector<uint8_t>& avail,
                         const NestStructure& nests, const VectorXd& lambda) {
  int j = static_cast<int>(u.size());
  std::vector<double> inclusive(nests.n_nests(), 0.0);
  for (int i = 0; i < j; ++i)
    if (avail[i]) inclusive[nests.nest_of[i]] += std::exp(u[i] / lambda[nests.nest_of[i]]);
  double denom = 0.0;
  for (int m = 0; m < nests.n_nests(); ++m)
    if (inclusive[m] > 0.0) denom += std::pow(inclusive[m], lambda[m]);
  VectorXd p = VectorXd::Zero(j);
  for (int i = 0; i < j; ++i) {
    if (!avail[i]) continue;
    int m = nests.nest_of[i];
    p[i] = std::exp(u[i] / lambda[m]) * std::pow(inclusive[m], lambda[m] - 1.0) / denom;
  }
  return p;
}

}  // namespace

TEST_CASE("equal utilities give exact uniform shares") {
  for (int j : {2, 3, 7, 12}) {
    VectorXd u = VectorXd::Constant(j, 0.37);
    VectorXd logp = mnl_log_probs(u, all_avail(j));
    for (int i = 0; i < j; ++i)
      REQUIRE_THAT(std::exp(logp[i]), Catch::Matchers::WithinAbs(1.0 / j, 1e-15));
  }
}

TEST_CASE("a single available alternative is chosen with certainty") {
  VectorXd u(2);
  u << -4.0, 11.0;
  VectorXd logp = mnl_log_probs(u, {1, 0});
  REQUIRE(logp[0] == 0.0);
  REQUIRE(logp[1] == -kInf);
}

TEST_CASE("large utilities do not overflow") {
  VectorXd u(2);
  u << 1000.0, 1001.0;
  VectorXd logp = mnl_log_probs(u, all_avail(2));
  double e = std::exp(1.0);
  REQUIRE_THAT(std::exp(logp[0]), Catch::Matchers::WithinRel(1.0 / (1.0 + e), 1e-12));
  REQUIRE_THAT(std::exp(logp[1]), Catch::Matchers::WithinRel(e / (1.0 + e), 1e-12));
}

TEST_CASE("probabilities over available alternatives sum to one") {
  std::mt19937_64 rng(7101);
  std::uniform_real_distribution<double> du(-3.0, 3.0);
  for (int rep = 0; rep < 50; ++rep) {
    int j = 2 + static_cast<int>(rng() % 6);
    VectorXd u(j);
    for (int i = 0; i < j; ++i) u[i] = du(rng);
    std::vector<uint8_t> avail = all_avail(j);
    if (j > 2) avail[rng() % j] = 0;
    int navail = 0;
    for (auto a : avail) navail += a;
    if (navail < 1) continue;
    VectorXd logp = mnl_log_probs(u, avail);
    double total = 0.0;
    for (int i = 0; i < j; ++i)
      if (avail[i]) total += std::exp(logp[i]);
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("utility translation leaves choice probabilities unchanged") {
  std::mt19937_64 rng(88);
  std::uniform_real_distribution<double> du(-2.0, 2.0);
  VectorXd u(5);
  for (int i = 0; i < 5; ++i) u[i] = du(rng);
  VectorXd logp0 = mnl_log_probs(u, all_avail(5));
  for (double c : {-250.0, 0.003, 17.0}) {
    VectorXd logp1 = mnl_log_probs(u.array() + c, all_avail(5));
    for (int i = 0; i < 5; ++i)
      REQUIRE_THAT(logp1[i], Catch::Matchers::WithinAbs(logp0[i], 1e-12));
  }
}

TEST_CASE("no available alternative is an error") {
  VectorXd u(3);
  u << 1.0, 2.0, 3.0;
  REQUIRE_THROWS_WITH(mnl_log_probs(u, {0, 0, 0}),
                      Catch::Matchers::ContainsSubstring("no available alternatives"));
}

TEST_CASE("nest structure construction validates the partition") {
  REQUIRE_NOTHROW(NestStructure::from_members({{0, 1}, {2}}, 3));
  REQUIRE_THROWS(NestStructure::from_members({{0, 1}, {1, 2}}, 3));  // overlap
  REQUIRE_THROWS(NestStructure::from_members({{0}, {2}}, 3));        // gap
  REQUIRE_THROWS(NestStructure::from_members({{0, 3}}, 3));          // out of range
  NestStructure s = NestStructure::singletons(4);
  REQUIRE(s.n_nests() == 4);
  for (int m = 0; m < 4; ++m) REQUIRE(s.is_singleton(m));
}

TEST_CASE("all scale parameters at one collapses nesting to plain logit") {
  std::mt19937_64 rng(424242);
  std::uniform_real_distribution<double> du(-3.0, 3.0);
  for (int rep = 0; rep < 60; ++rep) {
    int j = 3 + static_cast<int>(rng() % 5);
    VectorXd u(j);
    for (int i = 0; i < j; ++i) u[i] = du(rng);
    std::vector<std::vector<int>> groups;
    std::vector<int> perm(j);
    for (int i = 0; i < j; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    size_t pos = 0;
    while (pos < perm.size()) {
      size_t take = 1 + rng() % std::min<size_t>(3, perm.size() - pos);
      groups.emplace_back(perm.begin() + pos, perm.begin() + pos + take);
      pos += take;
    }
    NestStructure nests = NestStructure::from_members(groups, j);
    VectorXd lambda = VectorXd::Ones(nests.n_nests());
    std::vector<uint8_t> avail = all_avail(j);
    avail[rng() % j] = 0;
    bool any = false;
    for (auto a : avail) any = any || a;
    if (!any) continue;
    VectorXd nl = nl_log_probs(u, avail, nests, lambda);
    VectorXd mnl = mnl_log_probs(u, avail);
    for (int i = 0; i < j; ++i) {
      if (!avail[i]) {
        REQUIRE(nl[i] == -kInf);
        continue;
      }
      REQUIRE_THAT(nl[i], Catch::Matchers::WithinAbs(mnl[i], 1e-12));
    }
  }
}

TEST_CASE("nested probabilities match a direct-arithmetic evaluation") {
  std::mt19937_64 rng(9090);
  std::uniform_real_distribution<double> du(-2.0, 2.0);
  std::uniform_real_distribution<double> dl(0.3, 1.0);
  for (int rep = 0; rep < 60; ++rep) {
    int j = 4 + static_cast<int>(rng() % 3);
    VectorXd u(j);
    for (int i = 0; i < j; ++i) u[i] = du(rng);
    std::vector<std::vector<int>> groups = {{0, 1}, {2, 3}};
    if (j > 4) {
      std::vector<int> rest;
      for (int i = 4; i < j; ++i) rest.push_back(i);
      groups.push_back(rest);
    }
    NestStructure nests = NestStructure::from_members(groups, j);
    VectorXd lambda(nests.n_nests());
    for (int m = 0; m < nests.n_nests(); ++m) lambda[m] = dl(rng);
    std::vector<uint8_t> avail = all_avail(j);
    if (rep % 3 == 0) avail[rng() % j] = 0;
    VectorXd direct = nl_probs_direct(u, avail, nests, lambda);
    VectorXd logp = nl_log_probs(u, avail, nests, lambda);
    for (int i = 0; i < j; ++i) {
      if (!avail[i]) continue;
      REQUIRE_THAT(std::exp(logp[i]), Catch::Matchers::WithinRel(direct[i], 1e-12));
    }
  }
}

TEST_CASE("nested probabilities sum to one and respect availability") {
  NestStructure nests = NestStructure::from_members({{0, 1, 2}, {3, 4}}, 5);
  VectorXd u(5);
  u << 0.5, -1.0, 2.0, 0.0, 1.5;
  VectorXd lambda(2);
  lambda << 0.6, 0.9;
  std::vector<uint8_t> avail = {1, 1, 0, 1, 1};
  VectorXd logp = nl_log_probs(u, avail, nests, lambda);
  REQUIRE(logp[2] == -kInf);
  double total = 0.0;
  for (int i = 0; i < 5; ++i)
    if (avail[i]) total += std::exp(logp[i]);
  REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("empty nests drop out of the upper level") {
  NestStructure nests = NestStructure::from_members({{0, 1}, {2, 3}}, 4);
  VectorXd u(4);
  u << 1.0, 0.2, 5.0, 5.0;
  VectorXd lambda(2);
  lambda << 0.7, 0.5;
  std::vector<uint8_t> avail = {1, 1, 0, 0};
  VectorXd logp = nl_log_probs(u, avail, nests, lambda);
  // With the second nest empty the choice is within the first nest only.
  VectorXd sub = mnl_log_probs((u / lambda[0]).eval(), {1, 1, 0, 0});
  REQUIRE_THAT(logp[0], Catch::Matchers::WithinAbs(sub[0], 1e-12));
  REQUIRE_THAT(logp[1], Catch::Matchers::WithinAbs(sub[1], 1e-12));
}

TEST_CASE("plain logit gradient matches finite differences") {
  std::mt19937_64 rng(31337);
  std::uniform_real_distribution<double> du(-3.0, 3.0);
  int checked = 0;
  for (int rep = 0; rep < 120; ++rep) {
    int j = 2 + static_cast<int>(rng() % 6);
    VectorXd u(j);
    for (int i = 0; i < j; ++i) u[i] = du(rng);
    std::vector<uint8_t> avail = all_avail(j);
    if (j > 2 && rep % 2 == 0) avail[rng() % j] = 0;
    std::vector<int> choices;
    for (int i = 0; i < j; ++i)
      if (avail[i]) choices.push_back(i);
    if (choices.size() < 2) continue;
    int chosen = choices[rng() % choices.size()];

    KernelGrad kg = mnl_logp_grad(u, avail, chosen);
    const double h = 1e-6;
    for (int k = 0; k < j; ++k) {
      if (!avail[k]) {
        REQUIRE(kg.du[k] == 0.0);
        continue;
      }
      VectorXd up = u, um = u;
      up[k] += h;
      um[k] -= h;
      double fd = (mnl_log_probs(up, avail)[chosen] - mnl_log_probs(um, avail)[chosen]) / (2 * h);
      REQUIRE_THAT(kg.du[k], Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
    }
    ++checked;
  }
  REQUIRE(checked >= 100);
}

TEST_CASE("nested logit gradient matches finite differences") {
  std::mt19937_64 rng(271828);
  std::uniform_real_distribution<double> du(-2.5, 2.5);
  std::uniform_real_distribution<double> dl(0.25, 1.0);
  int checked = 0;
  for (int rep = 0; rep < 150; ++rep) {
    int j = 3 + static_cast<int>(rng() % 4);
    VectorXd u(j);
    for (int i = 0; i < j; ++i) u[i] = du(rng);
    std::vector<std::vector<int>> groups;
    std::vector<int> perm(j);
    for (int i = 0; i < j; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    size_t pos = 0;
    while (pos < perm.size()) {
      size_t take = 1 + rng() % std::min<size_t>(3, perm.size() - pos);
      groups.emplace_back(perm.begin() + pos, perm.begin() + pos + take);
      pos += take;
    }
    NestStructure nests = NestStructure::from_members(groups, j);
    VectorXd lambda(nests.n_nests());
    for (int m = 0; m < nests.n_nests(); ++m) lambda[m] = dl(rng);
    std::vector<uint8_t> avail = all_avail(j);
    if (rep % 3 == 0) avail[rng() % j] = 0;
    std::vector<int> choices;
    for (int i = 0; i < j; ++i)
      if (avail[i]) choices.push_back(i);
    if (choices.size() < 2) continue;
    int chosen = choices[rng() % choices.size()];

    KernelGrad kg = nl_logp_grad(u, avail, nests, lambda, chosen);
    const double h = 1e-6;
    bool ok = true;
    for (int k = 0; k < j && ok; ++k) {
      if (!avail[k]) continue;
      VectorXd up = u, um = u;
      up[k] += h;
      um[k] -= h;
      double fd = (nl_log_probs(up, avail, nests, lambda)[chosen] -
                   nl_log_probs(um, avail, nests, lambda)[chosen]) /
                  (2 * h);
      CAPTURE(rep, k, chosen, fd, kg.du[k]);
      REQUIRE_THAT(kg.du[k], Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
    }
    for (int m = 0; m < nests.n_nests(); ++m) {
      VectorXd lp = lambda, lm = lambda;
      lp[m] += h;
      lm[m] -= h;
      double fd = (nl_log_probs(u, avail, nests, lp)[chosen] -
                   nl_log_probs(u, avail, nests, lm)[chosen]) /
                  (2 * h);
      CAPTURE(rep, m, chosen, fd, kg.dlambda[m]);
      REQUIRE_THAT(kg.dlambda[m],
                   Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
    }
    ++checked;
  }
  REQUIRE(checked >= 100);
}

TEST_CASE("gradient at unit scales equals the logit gradient") {
  NestStructure nests = NestStructure::from_members({{0, 2}, {1, 3}}, 4);
  VectorXd u(4);
  u << 0.3, -0.7, 1.1, 0.0;
  VectorXd lambda = VectorXd::Ones(2);
  KernelGrad nl = nl_logp_grad(u, all_avail(4), nests, lambda, 2);
  KernelGrad ml = mnl_logp_grad(u, all_avail(4), 2);
  for (int i = 0; i < 4; ++i)
    REQUIRE_THAT(nl.du[i], Catch::Matchers::WithinAbs(ml.du[i], 1e-12));
  REQUIRE_THAT(nl.logp, Catch::Matchers::WithinAbs(ml.logp, 1e-12));
}
