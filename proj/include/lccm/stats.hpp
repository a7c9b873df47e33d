#pragma once

// Distribution tails, effective sample sizes and a few numeric helpers
// shared across the library. Tail probabilities are delegated to Boost.Math
// which carries the precision the tests demand (relative error ~1e-14).

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace lccm {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

inline double normal_sf(double z) {
  boost::math::normal_distribution<double> d;
  return boost::math::cdf(boost::math::complement(d, z));
}

inline double normal_cdf(double z) {
  boost::math::normal_distribution<double> d;
  return boost::math::cdf(d, z);
}

// Two-sided p-value for a standard normal test statistic.
inline double normal_two_sided_p(double z) {
  if (std::isnan(z)) return kNaN;
  return 2.0 * normal_sf(std::fabs(z));
}

// Two-sided p-value for a t statistic with (possibly fractional) df.
inline double t_two_sided_p(double t, double df) {
  if (std::isnan(t) || !(df > 0)) return kNaN;
  if (std::isinf(t)) return 0.0;
  boost::math::students_t_distribution<double> d(df);
  return 2.0 * boost::math::cdf(boost::math::complement(d, std::fabs(t)));
}

// Upper-tail probability P(F >= f) with df (d1, d2).
inline double f_upper_p(double f, double d1, double d2) {
  if (std::isnan(f) || !(d1 > 0) || !(d2 > 0)) return kNaN;
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  boost::math::fisher_f_distribution<double> d(d1, d2);
  return boost::math::cdf(boost::math::complement(d, f));
}

// Kish effective sample size (sum w)^2 / sum w^2. Zero when all weights are 0.
inline double kish_effective_n(std::span<const double> w) {
  double s = 0.0, s2 = 0.0;
  for (double x : w) {
    if (x < 0.0) throw std::invalid_argument("negative weight in effective sample size");
    s += x;
    s2 += x * x;
  }
  if (s2 == 0.0) return 0.0;
  return s * s / s2;
}

inline double kish_effective_n(const Eigen::VectorXd& w) {
  return kish_effective_n(std::span<const double>(w.data(), static_cast<size_t>(w.size())));
}

// log(sum_i exp(x_i)) with the max shifted out. -inf entries are skipped;
// returns -inf when everything is -inf.
inline double logsumexp(std::span<const double> x) {
  double m = -kInf;
  for (double v : x)
    if (v > m) m = v;
  if (m == -kInf) return -kInf;
  double s = 0.0;
  for (double v : x)
    if (v != -kInf) s += std::exp(v - m);
  return m + std::log(s);
}

inline double logsumexp(const Eigen::VectorXd& x) {
  return logsumexp(std::span<const double>(x.data(), static_cast<size_t>(x.size())));
}

// Fixed-order chunked accumulation: values are summed in blocks of 64 and the
// block totals summed in order. The result depends only on the element order,
// never on how callers might partition work.
inline double chunked_sum(std::span<const double> x) {
  constexpr size_t kChunk = 64;
  double total = 0.0;
  size_t i = 0;
  while (i < x.size()) {
    size_t end = std::min(i + kChunk, x.size());
    double block = 0.0;
    for (; i < end; ++i) block += x[i];
    total += block;
  }
  return total;
}

// SplitMix64; used to derive independent per-unit RNG seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace lccm
