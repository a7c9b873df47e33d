#pragma once

// Synthetic panel generator with known ground truth, plus a deliberately
// naive likelihood oracle for cross-checking the estimator's log-space math.
//
// Every respondent gets an independent RNG stream derived from (seed, index),
// so output is identical whatever the batch or thread layout. Uniform and
// normal variates are produced from raw mt19937_64 bits here rather than
// through std::distributions, whose streams differ across standard libraries.

#include "lccm/dataset.hpp"
#include "lccm/estimation.hpp"
#include "lccm/model.hpp"
#include "lccm/optim.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace lccm {

namespace rngdet {

// 53-bit uniform in [0, 1).
inline double uniform01(std::mt19937_64& g) {
  return (g() >> 11) * 0x1.0p-53;
}

// Box-Muller, one fresh pair per call (second value discarded to keep the
// stream position independent of call history).
inline double normal(std::mt19937_64& g) {
  double u1 = uniform01(g);
  while (u1 <= 0.0) u1 = uniform01(g);
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline int categorical(std::mt19937_64& g, const Eigen::VectorXd& probs) {
  const double u = uniform01(g);
  double acc = 0.0;
  for (int i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace rngdet

struct GenAttribute {
  std::string name;
  std::vector<double> levels;  // draw uniformly from these when non-empty...
  double lo = 0.0, hi = 1.0;   // ...otherwise uniform on [lo, hi]
};

struct GenIndicators {
  std::vector<std::string> names;
  double scale_lo = 1.0, scale_hi = 7.0;
  Eigen::MatrixXd class_means;  // C x K
  double sd = 1.0;
};

struct GenFactorStructure {
  Eigen::MatrixXd loadings;  // K x F, rows scaled for unit total variance
  double factor_sd = 1.0;
};

struct GeneratorSpec {
  ModelSpec model;
  Params truth;
  std::vector<std::string> alternative_ids;
  std::vector<GenAttribute> attributes;
  int n_respondents = 0;
  int n_situations = 0;
  uint64_t seed = 1;

  bool with_indicators = false;
  GenIndicators indicators;        // class-mean mode: Likert-rounded values
  bool factor_mode = false;        // continuous indicator values from factors
  GenFactorStructure factors;
};

struct GenOutput {
  ChoiceDataset choices;
  IndicatorMatrix indicators;  // empty unless requested
  std::vector<int> true_class;  // aligned with choices.respondents
};

inline GenOutput generate(const GeneratorSpec& g) {
  if (g.n_respondents < 1 || g.n_situations < 1)
    throw model_error("generator needs at least one respondent and one situation");
  if (g.alternative_ids.size() < 2) throw model_error("generator needs at least 2 alternatives");
  if (g.attributes.empty()) throw model_error("generator needs at least one attribute");
  if (!g.model.membership_covariates.empty())
    throw model_error("generator draws class membership from constants-only priors");

  // Skeleton dataset so the model context can resolve names and nests.
  ChoiceDataset skeleton;
  skeleton.alternative_ids = g.alternative_ids;
  std::sort(skeleton.alternative_ids.begin(), skeleton.alternative_ids.end(), &id_less);
  for (const auto& a : g.attributes) skeleton.attribute_names.push_back(a.name);
  ModelContext ctx = build_context(skeleton, g.model);

  const int J = skeleton.n_alternatives();
  const int K = static_cast<int>(g.attributes.size());
  const int C = g.model.n_classes;
  if (g.truth.beta.rows() != C || g.truth.beta.cols() != ctx.n_beta())
    throw model_error("true beta has the wrong shape");
  if (ctx.nested() && (g.truth.lambda.rows() != C || g.truth.lambda.cols() != ctx.n_nests()))
    throw model_error("true lambda has the wrong shape");

  Eigen::VectorXd prior = membership_probs(g.truth.alpha, Eigen::VectorXd::Ones(1));

  int KI = 0;
  if (g.with_indicators) {
    KI = static_cast<int>(g.indicators.names.size());
    if (KI == 0) throw model_error("indicator generation requested without indicator names");
    if (g.factor_mode) {
      if (g.factors.loadings.rows() != KI)
        throw model_error("factor loadings do not match the indicator count");
    } else if (g.indicators.class_means.rows() != C || g.indicators.class_means.cols() != KI) {
      throw model_error("indicator class means must be classes x indicators");
    }
  }

  GenOutput out;
  out.choices.alternative_ids = skeleton.alternative_ids;
  out.choices.attribute_names = skeleton.attribute_names;
  if (g.with_indicators) {
    out.indicators.names = g.indicators.names;
    out.indicators.scale_lo = g.indicators.scale_lo;
    out.indicators.scale_hi = g.indicators.scale_hi;
    out.indicators.values.resize(g.n_respondents, KI);
  }

  const double mid = 0.5 * (g.indicators.scale_lo + g.indicators.scale_hi);
  const int F = g.factor_mode ? static_cast<int>(g.factors.loadings.cols()) : 0;

  for (int n = 0; n < g.n_respondents; ++n) {
    std::mt19937_64 rng(mix_seed(g.seed, static_cast<uint64_t>(n)));
    const int cls = rngdet::categorical(rng, prior);
    out.true_class.push_back(cls);

    Respondent r;
    r.id = std::to_string(n + 1);
    for (int t = 0; t < g.n_situations; ++t) {
      Situation s;
      s.task_id = std::to_string(t + 1);
      s.avail.assign(J, 1);
      s.attrs.resize(J, K);
      for (int j = 0; j < J; ++j)
        for (int k = 0; k < K; ++k) {
          const auto& law = g.attributes[k];
          if (!law.levels.empty()) {
            const int idx = std::min<int>(static_cast<int>(rngdet::uniform01(rng) * law.levels.size()),
                                          static_cast<int>(law.levels.size()) - 1);
            s.attrs(j, k) = law.levels[idx];
          } else {
            s.attrs(j, k) = law.lo + rngdet::uniform01(rng) * (law.hi - law.lo);
          }
        }
      Eigen::VectorXd lp = ctx.situation_log_probs(s, g.truth.beta.row(cls),
                                                   ctx.nested() ? Eigen::VectorXd(g.truth.lambda.row(cls))
                                                                : Eigen::VectorXd());
      s.chosen = rngdet::categorical(rng, lp.array().exp().matrix());
      r.situations.push_back(std::move(s));
    }
    out.choices.respondents.push_back(std::move(r));

    if (g.with_indicators) {
      out.indicators.respondent_ids.push_back(std::to_string(n + 1));
      if (g.factor_mode) {
        Eigen::VectorXd f(F);
        for (int q = 0; q < F; ++q) f[q] = g.factors.factor_sd * rngdet::normal(rng);
        for (int k = 0; k < KI; ++k) {
          const double explained =
              g.factors.factor_sd * g.factors.factor_sd * g.factors.loadings.row(k).squaredNorm();
          const double noise_sd = std::sqrt(std::max(1.0 - explained, 0.01));
          double v = mid + g.factors.loadings.row(k).dot(f) + noise_sd * rngdet::normal(rng);
          // Continuous on purpose: rounding would attenuate the loadings.
          out.indicators.values(n, k) =
              std::min(std::max(v, g.indicators.scale_lo), g.indicators.scale_hi);
        }
      } else {
        for (int k = 0; k < KI; ++k) {
          double v = g.indicators.class_means(cls, k) + g.indicators.sd * rngdet::normal(rng);
          v = std::min(std::max(v, g.indicators.scale_lo), g.indicators.scale_hi);
          out.indicators.values(n, k) = std::round(v);
        }
      }
    }
  }
  out.choices.validate();
  return out;
}

// Marginal log-likelihood computed the slow, obvious way: plain-exponential
// choice probabilities multiplied across situations and mixed over classes in
// probability space. Deliberately avoids every log-space shortcut the real
// implementation uses. Guarded to stay in safe floating-point territory.
inline double brute_force_marginal(const ChoiceDataset& data, const ModelSpec& spec,
                                   const Params& params,
                                   const IndicatorMatrix* covariates = nullptr) {
  if (data.n_respondents() > 20) throw model_error("brute force oracle: at most 20 respondents");
  for (const auto& r : data.respondents)
    if (r.situations.size() > 5) throw model_error("brute force oracle: at most 5 situations");
  if (spec.n_classes > 4) throw model_error("brute force oracle: at most 4 classes");

  ModelContext ctx = build_context(data, spec, covariates);
  const int C = spec.n_classes;
  double total = 0.0;
  for (int n = 0; n < data.n_respondents(); ++n) {
    // Membership shares, no max-shift.
    Eigen::VectorXd eta = params.alpha * ctx.Z.row(n).transpose();
    Eigen::VectorXd prior = eta.array().exp();
    prior /= prior.sum();

    double marginal = 0.0;
    for (int c = 0; c < C; ++c) {
      double seq = 1.0;
      for (const auto& s : data.respondents[n].situations) {
        Eigen::VectorXd u = ctx.utilities(s, params.beta.row(c));
        double p = 0.0;
        if (spec.kernel == KernelType::Logit) {
          double denom = 0.0;
          for (int j = 0; j < u.size(); ++j)
            if (s.avail[j]) denom += std::exp(u[j]);
          p = std::exp(u[s.chosen]) / denom;
        } else {
          const auto& nests = ctx.nests;
          const int M = nests.n_nests();
          std::vector<double> S(M, 0.0);
          for (int m = 0; m < M; ++m)
            for (int j : nests.members[m])
              if (s.avail[j]) S[m] += std::exp(u[j] / params.lambda(c, m));
          double denom = 0.0;
          for (int m = 0; m < M; ++m)
            if (S[m] > 0.0) denom += std::pow(S[m], params.lambda(c, m));
          const int m = nests.nest_of[s.chosen];
          p = std::exp(u[s.chosen] / params.lambda(c, m)) *
              std::pow(S[m], params.lambda(c, m) - 1.0) / denom;
        }
        seq *= p;
      }
      marginal += prior[c] * seq;
    }
    total += std::log(marginal);
  }
  return total;
}

}  // namespace lccm
