#pragma once

// Model description and parameter bookkeeping for the latent-class choice
// model. A model has C classes sharing one utility specification (attribute
// coefficients + alternative-specific constants), an optional two-level nest
// structure, and a class-membership logit over respondent covariates with one
// reference class pinned at zero.
//
// Free parameters live in an unconstrained vector for the optimizer:
//   free beta        theta = beta
//   sign-constrained beta = +-exp(theta)
//   nest coefficient beta = sigmoid(theta), keeping lambda in (0, 1)
// Fixed and bound-fixed coordinates are excluded from the vector entirely.

#include "lccm/dataset.hpp"
#include "lccm/kernels.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace lccm {

class model_error : public std::runtime_error {
public:
  explicit model_error(const std::string& msg) : std::runtime_error(msg) {}
};

enum class KernelType { Logit, NestedLogit };
enum class Constraint { Free, NonNegative, NonPositive, Fixed };

struct UtilityTerm {
  std::string attribute;
  Constraint constraint = Constraint::Free;
  double fixed_value = 0.0;
};

struct AscTerm {
  std::string alternative;
  Constraint constraint = Constraint::Free;
  double fixed_value = 0.0;
};

struct NestEntry {
  std::string name;
  std::vector<std::string> alternatives;
  bool lambda_fixed = false;
  double lambda_value = 1.0;
};

struct ModelSpec {
  int n_classes = 1;
  KernelType kernel = KernelType::Logit;
  std::vector<UtilityTerm> terms;
  std::vector<AscTerm> ascs;
  std::vector<NestEntry> nests;  // alternatives left out become singleton nests
  std::vector<std::string> membership_covariates;
  int reference_class = 0;

  int n_beta() const { return static_cast<int>(terms.size() + ascs.size()); }
};

struct Params {
  Eigen::MatrixXd beta;    // C x n_beta, natural space, terms then constants
  Eigen::MatrixXd lambda;  // C x n_nests for nested logit, otherwise 0 x 0
  Eigen::MatrixXd alpha;   // C x (1 + P); the reference row stays identically zero
};

// Resolved model: name lookups done once, nest structure closed over all
// alternatives, membership design matrix built (intercept first).
struct ModelContext {
  ModelSpec spec;
  const ChoiceDataset* data = nullptr;

  std::vector<int> term_attr;  // utility term -> attribute column
  std::vector<int> asc_alt;    // constant -> alternative index
  NestStructure nests;         // nested logit only
  std::vector<uint8_t> lambda_is_fixed;   // per nest
  std::vector<double> lambda_fixed_value; // per nest
  std::vector<std::string> nest_names;

  Eigen::MatrixXd Z;                // N x (1 + P) membership design
  std::vector<std::string> z_names; // "const", then covariate names

  int n_classes() const { return spec.n_classes; }
  int n_beta() const { return spec.n_beta(); }
  int n_nests() const { return spec.kernel == KernelType::NestedLogit ? nests.n_nests() : 0; }
  int n_z() const { return static_cast<int>(Z.cols()); }
  bool nested() const { return spec.kernel == KernelType::NestedLogit; }

  std::string beta_name(int idx) const {
    const int T = static_cast<int>(spec.terms.size());
    if (idx < T) return spec.terms[idx].attribute;
    return "const:" + spec.ascs[idx - T].alternative;
  }
  Constraint beta_constraint(int idx) const {
    const int T = static_cast<int>(spec.terms.size());
    return idx < T ? spec.terms[idx].constraint : spec.ascs[idx - T].constraint;
  }
  double beta_fixed_value(int idx) const {
    const int T = static_cast<int>(spec.terms.size());
    return idx < T ? spec.terms[idx].fixed_value : spec.ascs[idx - T].fixed_value;
  }

  // Systematic utilities of one situation under one class's coefficients.
  Eigen::VectorXd utilities(const Situation& s, const Eigen::VectorXd& beta_row) const {
    const int T = static_cast<int>(spec.terms.size());
    Eigen::VectorXd u = Eigen::VectorXd::Zero(s.attrs.rows());
    for (int t = 0; t < T; ++t) u += beta_row[t] * s.attrs.col(term_attr[t]);
    for (size_t a = 0; a < asc_alt.size(); ++a) u[asc_alt[a]] += beta_row[T + a];
    return u;
  }

  Eigen::VectorXd situation_log_probs(const Situation& s, const Eigen::VectorXd& beta_row,
                                      const Eigen::VectorXd& lambda_row) const {
    Eigen::VectorXd u = utilities(s, beta_row);
    if (nested()) return nl_log_probs(u, s.avail, nests, lambda_row);
    return mnl_log_probs(u, s.avail);
  }

  KernelGrad situation_logp_grad(const Situation& s, const Eigen::VectorXd& beta_row,
                                 const Eigen::VectorXd& lambda_row) const {
    Eigen::VectorXd u = utilities(s, beta_row);
    if (nested()) return nl_logp_grad(u, s.avail, nests, lambda_row, s.chosen);
    return mnl_logp_grad(u, s.avail, s.chosen);
  }

  // Chain rule from d logP / d u back to the beta coordinates.
  void accumulate_beta_grad(const Situation& s, const KernelGrad& kg, double weight,
                            Eigen::Ref<Eigen::VectorXd> beta_grad) const {
    const int T = static_cast<int>(spec.terms.size());
    for (int t = 0; t < T; ++t)
      beta_grad[t] += weight * kg.du.dot(s.attrs.col(term_attr[t]));
    for (size_t a = 0; a < asc_alt.size(); ++a)
      beta_grad[T + a] += weight * kg.du[asc_alt[a]];
  }
};

// Respondent-level covariate lookup used to build the membership design.
// The indicator table doubles as a covariate table; a null pointer is fine
// for constants-only models.
inline ModelContext build_context(const ChoiceDataset& data, const ModelSpec& spec,
                                  const IndicatorMatrix* covariates = nullptr) {
  if (spec.n_classes < 1) throw model_error("number of classes must be at least 1");
  if (spec.reference_class < 0 || spec.reference_class >= spec.n_classes)
    throw model_error("reference class out of range");
  if (spec.terms.empty() && spec.ascs.empty())
    throw model_error("utility specification is empty");

  ModelContext ctx;
  ctx.spec = spec;
  ctx.data = &data;

  for (const auto& t : spec.terms) {
    int k = data.attribute_index(t.attribute);
    if (k < 0) throw model_error("unknown attribute '" + t.attribute + "' in utility terms");
    for (int prev : ctx.term_attr)
      if (prev == k) throw model_error("attribute '" + t.attribute + "' listed twice");
    ctx.term_attr.push_back(k);
  }
  int n_free_asc = 0;
  for (const auto& a : spec.ascs) {
    int j = data.alternative_index(a.alternative);
    if (j < 0) throw model_error("unknown alternative '" + a.alternative + "' in constants");
    for (int prev : ctx.asc_alt)
      if (prev == j) throw model_error("constant for '" + a.alternative + "' listed twice");
    ctx.asc_alt.push_back(j);
    if (a.constraint != Constraint::Fixed) ++n_free_asc;
  }
  // Identification: some alternative must carry a pinned-down constant.
  if (!spec.ascs.empty() && spec.ascs.size() == static_cast<size_t>(data.n_alternatives()) &&
      n_free_asc == static_cast<int>(spec.ascs.size()))
    throw model_error("constants on every alternative require one fixed reference constant");

  if (spec.kernel == KernelType::NestedLogit) {
    const int J = data.n_alternatives();
    std::vector<int> nest_of(J, -1);
    std::vector<std::vector<int>> groups;
    for (const auto& n : spec.nests) {
      if (n.alternatives.empty()) throw model_error("nest '" + n.name + "' has no alternatives");
      std::vector<int> members;
      for (const auto& alt : n.alternatives) {
        int j = data.alternative_index(alt);
        if (j < 0) throw model_error("unknown alternative '" + alt + "' in nest '" + n.name + "'");
        if (nest_of[j] != -1)
          throw model_error("alternative '" + alt + "' appears in two nests");
        nest_of[j] = static_cast<int>(groups.size());
        members.push_back(j);
      }
      groups.push_back(members);
      ctx.nest_names.push_back(n.name);
      bool singleton = members.size() == 1;
      ctx.lambda_is_fixed.push_back(n.lambda_fixed || singleton ? 1 : 0);
      double v = n.lambda_fixed ? n.lambda_value : 1.0;
      if (singleton) v = 1.0;  // a one-member nest has no independent scale
      if (n.lambda_fixed && !(n.lambda_value > 0.0 && n.lambda_value <= 1.0))
        throw model_error("nest '" + n.name + "' coefficient must lie in (0, 1]");
      ctx.lambda_fixed_value.push_back(v);
    }
    for (int j = 0; j < J; ++j) {
      if (nest_of[j] != -1) continue;
      groups.push_back({j});
      ctx.nest_names.push_back(data.alternative_ids[j]);
      ctx.lambda_is_fixed.push_back(1);
      ctx.lambda_fixed_value.push_back(1.0);
    }
    ctx.nests = NestStructure::from_members(std::move(groups), J);
  } else if (!spec.nests.empty()) {
    throw model_error("nest structure given for a plain logit kernel");
  }

  const int N = data.n_respondents();
  const int P = static_cast<int>(spec.membership_covariates.size());
  ctx.Z.resize(N, 1 + P);
  ctx.Z.col(0).setOnes();
  ctx.z_names = {"const"};
  if (P > 0) {
    if (!covariates)
      throw model_error("membership covariates requested but no covariate table supplied");
    std::vector<int> cols;
    for (const auto& name : spec.membership_covariates) {
      int k = covariates->column_index(name);
      if (k < 0) throw model_error("unknown membership covariate '" + name + "'");
      cols.push_back(k);
      ctx.z_names.push_back(name);
    }
    if (covariates->n_rows() != N)
      throw model_error("covariate table does not match the choice data (join first)");
    for (int i = 0; i < N; ++i) {
      if (covariates->respondent_ids[i] != data.respondents[i].id)
        throw model_error("covariate table does not match the choice data (join first)");
      for (int p = 0; p < P; ++p) {
        double v = covariates->values(i, cols[p]);
        if (std::isnan(v))
          throw model_error("respondent '" + data.respondents[i].id +
                            "' is missing membership covariate '" +
                            spec.membership_covariates[p] + "'");
        ctx.Z(i, 1 + p) = v;
      }
    }
  }
  return ctx;
}

// One optimizer coordinate. Bound-fixed betas (sign constraints that collapsed
// to zero) are dropped from the layout like hard-fixed ones.
struct PackEntry {
  enum Kind { Beta, Lambda, Alpha } kind;
  int cls = 0;
  int index = 0;  // beta column / nest / membership column
  Constraint constraint = Constraint::Free;
};

struct PackLayout {
  std::vector<PackEntry> entries;
  int size() const { return static_cast<int>(entries.size()); }
};

inline PackLayout build_layout(const ModelContext& ctx,
                               const std::vector<std::vector<uint8_t>>* bound_fixed = nullptr) {
  PackLayout layout;
  const int C = ctx.n_classes();
  for (int c = 0; c < C; ++c) {
    for (int b = 0; b < ctx.n_beta(); ++b) {
      if (ctx.beta_constraint(b) == Constraint::Fixed) continue;
      if (bound_fixed && (*bound_fixed)[c][b]) continue;
      layout.entries.push_back({PackEntry::Beta, c, b, ctx.beta_constraint(b)});
    }
    for (int m = 0; m < ctx.n_nests(); ++m) {
      if (ctx.lambda_is_fixed[m]) continue;
      layout.entries.push_back({PackEntry::Lambda, c, m, Constraint::Free});
    }
  }
  for (int c = 0; c < C; ++c) {
    if (c == ctx.spec.reference_class) continue;
    for (int p = 0; p < ctx.n_z(); ++p)
      layout.entries.push_back({PackEntry::Alpha, c, p, Constraint::Free});
  }
  return layout;
}

inline std::string entry_name(const ModelContext& ctx, const PackEntry& e) {
  switch (e.kind) {
    case PackEntry::Beta:
      return "class" + std::to_string(e.cls + 1) + ":" + ctx.beta_name(e.index);
    case PackEntry::Lambda:
      return "class" + std::to_string(e.cls + 1) + ":lambda:" + ctx.nest_names[e.index];
    default:
      return "class" + std::to_string(e.cls + 1) + ":member:" + ctx.z_names[e.index];
  }
}

namespace detail {
inline double clamp_positive(double v) { return v < 1e-300 ? 1e-300 : v; }
}

inline double theta_from_natural(const PackEntry& e, double v) {
  if (e.kind == PackEntry::Lambda) {
    double x = std::min(std::max(v, 1e-12), 1.0 - 1e-12);
    return std::log(x / (1.0 - x));
  }
  switch (e.constraint) {
    case Constraint::NonNegative: return std::log(detail::clamp_positive(v));
    case Constraint::NonPositive: return std::log(detail::clamp_positive(-v));
    default: return v;
  }
}

inline double natural_from_theta(const PackEntry& e, double t) {
  if (e.kind == PackEntry::Lambda) return 1.0 / (1.0 + std::exp(-t));
  switch (e.constraint) {
    case Constraint::NonNegative: return std::exp(t);
    case Constraint::NonPositive: return -std::exp(t);
    default: return t;
  }
}

// d natural / d theta evaluated at the natural value.
inline double transform_jacobian(const PackEntry& e, double natural) {
  if (e.kind == PackEntry::Lambda) return natural * (1.0 - natural);
  switch (e.constraint) {
    case Constraint::NonNegative: return natural;
    case Constraint::NonPositive: return natural;  // v = -exp(t), dv/dt = v
    default: return 1.0;
  }
}

inline Eigen::VectorXd pack_params(const ModelContext&, const PackLayout& layout,
                                   const Params& p) {
  Eigen::VectorXd theta(layout.size());
  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    double v = e.kind == PackEntry::Beta    ? p.beta(e.cls, e.index)
               : e.kind == PackEntry::Lambda ? p.lambda(e.cls, e.index)
                                             : p.alpha(e.cls, e.index);
    theta[i] = theta_from_natural(e, v);
  }
  return theta;
}

// Fills every coordinate: fixed betas and lambdas from the ModelSpec, bound-fixed
// betas at zero, the reference alpha row at zero, free coordinates from theta.
inline Params unpack_params(const ModelContext& ctx, const PackLayout& layout,
                            const Eigen::VectorXd& theta,
                            const std::vector<std::vector<uint8_t>>* bound_fixed = nullptr) {
  const int C = ctx.n_classes();
  Params p;
  p.beta.resize(C, ctx.n_beta());
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < ctx.n_beta(); ++b) {
      if (ctx.beta_constraint(b) == Constraint::Fixed) p.beta(c, b) = ctx.beta_fixed_value(b);
      else if (bound_fixed && (*bound_fixed)[c][b]) p.beta(c, b) = 0.0;
      else p.beta(c, b) = 0.0;  // overwritten below
    }
  p.lambda.resize(C, ctx.n_nests());
  for (int c = 0; c < C; ++c)
    for (int m = 0; m < ctx.n_nests(); ++m)
      p.lambda(c, m) = ctx.lambda_fixed_value.empty() ? 1.0 : ctx.lambda_fixed_value[m];
  p.alpha = Eigen::MatrixXd::Zero(C, ctx.n_z());

  for (int i = 0; i < layout.size(); ++i) {
    const auto& e = layout.entries[i];
    const double v = natural_from_theta(e, theta[i]);
    if (e.kind == PackEntry::Beta) p.beta(e.cls, e.index) = v;
    else if (e.kind == PackEntry::Lambda) p.lambda(e.cls, e.index) = v;
    else p.alpha(e.cls, e.index) = v;
  }
  return p;
}

// Random starting point in natural space: free coefficients U(-0.5, 0.5),
// sign-constrained ones pushed off zero, membership coefficients U(-1, 1),
// free nest coefficients U(0.4, 0.95).
inline Params random_init(const ModelContext& ctx, std::mt19937_64& rng) {
  const int C = ctx.n_classes();
  std::uniform_real_distribution<double> u_beta(-0.5, 0.5);
  std::uniform_real_distribution<double> u_alpha(-1.0, 1.0);
  std::uniform_real_distribution<double> u_lambda(0.4, 0.95);

  Params p;
  p.beta.resize(C, ctx.n_beta());
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < ctx.n_beta(); ++b) {
      switch (ctx.beta_constraint(b)) {
        case Constraint::Fixed: p.beta(c, b) = ctx.beta_fixed_value(b); break;
        case Constraint::NonNegative: p.beta(c, b) = std::max(std::fabs(u_beta(rng)), 1e-3); break;
        case Constraint::NonPositive: p.beta(c, b) = -std::max(std::fabs(u_beta(rng)), 1e-3); break;
        default: p.beta(c, b) = u_beta(rng);
      }
    }
  p.lambda.resize(C, ctx.n_nests());
  for (int c = 0; c < C; ++c)
    for (int m = 0; m < ctx.n_nests(); ++m)
      p.lambda(c, m) = ctx.lambda_is_fixed[m] ? ctx.lambda_fixed_value[m] : u_lambda(rng);
  p.alpha = Eigen::MatrixXd::Zero(C, ctx.n_z());
  for (int c = 0; c < C; ++c) {
    if (c == ctx.spec.reference_class) continue;
    for (int p2 = 0; p2 < ctx.n_z(); ++p2) p.alpha(c, p2) = u_alpha(rng);
  }
  return p;
}

}  // namespace lccm
