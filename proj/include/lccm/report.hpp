#pragma once

// Serialization of estimation, profiling, factor-analysis and share-model
// results. All numeric output funnels through fmt_double, and JSON uses
// insertion-ordered objects, so identical inputs produce identical bytes.

#include "lccm/csv.hpp"
#include "lccm/efa.hpp"
#include "lccm/estimation.hpp"
#include "lccm/fmnl.hpp"
#include "lccm/posterior.hpp"

#include <json.hpp>

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

namespace lccm {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline ordered_json num_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;  // +-inf serialize as null via nlohmann as well
}

inline std::string cell_flag(const ParamCell& c) {
  if (c.frozen) return "frozen";
  if (c.bound_fixed) return "bound";
  if (c.fixed) return "fixed";
  return "";
}

inline std::string fmt_or_empty(double v) { return std::isnan(v) ? "" : fmt_double(v); }

}  // namespace detail

inline ordered_json result_to_json(const EstimationResult& res) {
  ordered_json j;
  j["model"]["classes"] = res.spec.n_classes;
  j["model"]["kernel"] = res.spec.kernel == KernelType::Logit ? "logit" : "nested_logit";
  j["model"]["reference_class"] = res.spec.reference_class + 1;
  j["model"]["membership_covariates"] = res.spec.membership_covariates;
  {
    ordered_json nests = ordered_json::array();
    for (size_t m = 0; m < res.nest_names.size(); ++m) nests.push_back(res.nest_names[m]);
    j["model"]["nests"] = nests;
  }

  j["fit"]["loglik"] = detail::num_or_null(res.loglik);
  j["fit"]["null_loglik"] = res.stats.null_loglik;
  j["fit"]["n_params"] = res.stats.n_params;
  j["fit"]["n_obs"] = res.stats.n_obs;
  j["fit"]["n_respondents"] = static_cast<int>(res.respondent_ids.size());
  j["fit"]["adj_rho2"] = res.stats.adj_rho2;
  j["fit"]["aic"] = res.stats.aic;
  j["fit"]["bic"] = res.stats.bic;

  j["convergence"]["status"] = res.status;
  j["convergence"]["converged"] = res.converged;
  j["convergence"]["em_iterations"] = res.em_iterations;
  j["convergence"]["polish_iterations"] = res.polish_iterations;
  j["convergence"]["grad_inf_norm"] = detail::num_or_null(res.grad_inf_norm);
  j["convergence"]["starts"]["count"] = res.n_starts;
  j["convergence"]["starts"]["best"] = res.best_start;
  j["convergence"]["starts"]["at_best"] = res.starts_at_best;
  j["convergence"]["starts"]["logliks"] = res.start_logliks;
  j["convergence"]["em_loglik_path"] = res.em_path;

  ordered_json classes = ordered_json::array();
  for (int c = 0; c < res.spec.n_classes; ++c) {
    ordered_json jc;
    jc["label"] = "class" + std::to_string(c + 1);
    jc["share"] = res.class_shares[c];
    auto dump_cells = [&](const std::vector<ParamCell>& cells,
                          const std::vector<std::string>& names) {
      ordered_json arr = ordered_json::array();
      for (size_t i = 0; i < cells.size(); ++i) {
        ordered_json e;
        e["name"] = names[i];
        e["value"] = detail::num_or_null(cells[i].value);
        e["se"] = detail::num_or_null(cells[i].se);
        e["p"] = detail::num_or_null(cells[i].p);
        std::string flag = detail::cell_flag(cells[i]);
        if (!flag.empty()) e["flag"] = flag;
        arr.push_back(e);
      }
      return arr;
    };
    jc["utility"] = dump_cells(res.beta[c], res.beta_names);
    if (!res.lambda[c].empty()) jc["nest_coefficients"] = dump_cells(res.lambda[c], res.nest_names);
    jc["membership"] = dump_cells(res.alpha[c], res.z_names);
    classes.push_back(jc);
  }
  j["classes"] = classes;

  j["flags"]["hessian_unreliable"] = res.hessian_unreliable;
  j["flags"]["degenerate_class"] = res.degenerate_class;
  j["flags"]["frozen_kernel"] = res.frozen_kernel;
  return j;
}

// Wide coefficient table, one row per coefficient, one column block per class.
inline void write_result_csv(std::ostream& out, const EstimationResult& res) {
  const int C = res.spec.n_classes;
  Table t;
  t.header = {"section", "name"};
  for (int c = 0; c < C; ++c) {
    const std::string p = "class" + std::to_string(c + 1) + "_";
    t.header.push_back(p + "estimate");
    t.header.push_back(p + "se");
    t.header.push_back(p + "p");
    t.header.push_back(p + "flag");
  }
  auto add_rows = [&](const std::string& section, const std::vector<std::string>& names,
                      auto cell_at) {
    for (size_t i = 0; i < names.size(); ++i) {
      std::vector<std::string> row = {section, names[i]};
      for (int c = 0; c < C; ++c) {
        const ParamCell& cell = cell_at(c, i);
        row.push_back(detail::fmt_or_empty(cell.value));
        row.push_back(detail::fmt_or_empty(cell.se));
        row.push_back(detail::fmt_or_empty(cell.p));
        row.push_back(detail::cell_flag(cell));
      }
      t.rows.push_back(std::move(row));
    }
  };
  add_rows("utility", res.beta_names, [&](int c, size_t i) { return res.beta[c][i]; });
  if (!res.nest_names.empty() && !res.lambda[0].empty())
    add_rows("nest", res.nest_names, [&](int c, size_t i) { return res.lambda[c][i]; });
  add_rows("membership", res.z_names, [&](int c, size_t i) { return res.alpha[c][i]; });

  std::vector<std::string> share_row = {"summary", "class_share"};
  for (int c = 0; c < C; ++c) {
    share_row.push_back(fmt_double(res.class_shares[c]));
    share_row.push_back("");
    share_row.push_back("");
    share_row.push_back("");
  }
  t.rows.push_back(share_row);
  write_csv(out, t);
}

inline void write_posterior_csv(std::ostream& out, const std::vector<std::string>& resp_ids,
                                const Eigen::MatrixXd& posterior) {
  Table t;
  t.header = {"resp_id"};
  for (int c = 0; c < posterior.cols(); ++c)
    t.header.push_back("p_class_" + std::to_string(c + 1));
  for (int n = 0; n < posterior.rows(); ++n) {
    std::vector<std::string> row = {resp_ids[n]};
    for (int c = 0; c < posterior.cols(); ++c) row.push_back(fmt_double(posterior(n, c)));
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

inline Eigen::MatrixXd read_posterior_csv(std::istream& in, std::vector<std::string>* ids) {
  Table t = parse_csv(in);
  if (t.header.empty() || t.header[0] != "resp_id" || t.header.size() < 3)
    throw data_error("posterior CSV must have resp_id and at least two class columns");
  const int C = static_cast<int>(t.header.size()) - 1;
  for (int c = 0; c < C; ++c)
    if (t.header[c + 1] != "p_class_" + std::to_string(c + 1))
      throw data_error("posterior CSV column " + std::to_string(c + 2) +
                       " must be p_class_" + std::to_string(c + 1));
  Eigen::MatrixXd W(t.rows.size(), C);
  for (size_t n = 0; n < t.rows.size(); ++n) {
    if (ids) ids->push_back(trim(t.rows[n][0]));
    for (int c = 0; c < C; ++c)
      W(static_cast<int>(n), c) = parse_double(t.rows[n][c + 1], "posterior row " + std::to_string(n + 2));
  }
  return W;
}

inline void write_profile_csv(std::ostream& out, const ClassProfile& prof) {
  const int C = static_cast<int>(prof.class_labels.size());
  Table t;
  t.header = {"indicator", "n"};
  for (int c = 0; c < C; ++c) t.header.push_back(prof.class_labels[c] + "_mean");
  for (int c = 0; c < C; ++c) t.header.push_back(prof.class_labels[c] + "_var");
  t.header.insert(t.header.end(), {"grand_mean", "F", "df1", "df2", "p"});
  for (const auto& ind : prof.indicators) {
    std::vector<std::string> row = {ind.name, std::to_string(ind.n_complete)};
    for (int c = 0; c < C; ++c) row.push_back(detail::fmt_or_empty(ind.anova.class_means.size() ? ind.anova.class_means[c] : kNaN));
    for (int c = 0; c < C; ++c) row.push_back(detail::fmt_or_empty(ind.anova.class_vars.size() ? ind.anova.class_vars[c] : kNaN));
    row.push_back(detail::fmt_or_empty(ind.anova.grand_mean));
    row.push_back(std::isinf(ind.anova.F) ? "inf" : detail::fmt_or_empty(ind.anova.F));
    row.push_back(fmt_double(ind.anova.df1));
    row.push_back(fmt_double(ind.anova.df2));
    row.push_back(detail::fmt_or_empty(ind.anova.p));
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

inline void write_pairwise_csv(std::ostream& out, const ClassProfile& prof) {
  const int C = static_cast<int>(prof.class_labels.size());
  Table t;
  t.header = {"indicator", "class_a", "class_b", "t", "df", "p"};
  for (const auto& ind : prof.indicators)
    for (int a = 0; a < C; ++a)
      for (int b = a + 1; b < C; ++b) {
        t.rows.push_back({ind.name, prof.class_labels[a], prof.class_labels[b],
                          detail::fmt_or_empty(ind.pair_t(a, b)),
                          detail::fmt_or_empty(ind.pair_df(a, b)),
                          detail::fmt_or_empty(ind.pair_p(a, b))});
      }
  write_csv(out, t);
}

// Markdown rendering of the profiling report. Classes with no posterior mass
// on an indicator's complete cases show as "-".
inline std::string profile_report(const ClassProfile& prof) {
  const int C = static_cast<int>(prof.class_labels.size());
  std::ostringstream out;
  out << "# Class profile\n\n";
  out << "Average class shares:";
  for (int c = 0; c < C; ++c)
    out << " " << prof.class_labels[c] << "=" << fmt_fixed(prof.avg_weight[c], 3);
  out << "\n\n";

  std::vector<std::string> header = {"indicator", "n"};
  for (int c = 0; c < C; ++c) header.push_back(prof.class_labels[c]);
  header.insert(header.end(), {"F", "df", "p"});
  std::vector<std::vector<std::string>> rows;
  for (const auto& ind : prof.indicators) {
    std::vector<std::string> row = {ind.name, std::to_string(ind.n_complete)};
    for (int c = 0; c < C; ++c) {
      const double m = ind.anova.class_means.size() ? ind.anova.class_means[c] : kNaN;
      row.push_back(std::isnan(m) ? "-" : fmt_fixed(m, 3));
    }
    row.push_back(std::isnan(ind.anova.F) ? "-"
                  : std::isinf(ind.anova.F) ? "inf" : fmt_fixed(ind.anova.F, 2));
    row.push_back("(" + fmt_double(ind.anova.df1) + ", " + fmt_double(ind.anova.df2) + ")");
    row.push_back(std::isnan(ind.anova.p) ? "-" : fmt_fixed(ind.anova.p, 4));
    rows.push_back(std::move(row));
  }
  out << markdown_table(header, rows) << "\n";

  out << "## Pairwise comparisons (Welch t, Kish effective sizes)\n\n";
  std::vector<std::string> ph = {"indicator", "pair", "t", "df", "p"};
  std::vector<std::vector<std::string>> prows;
  for (const auto& ind : prof.indicators)
    for (int a = 0; a < C; ++a)
      for (int b = a + 1; b < C; ++b) {
        const double tv = ind.pair_t(a, b);
        prows.push_back({ind.name,
                         prof.class_labels[a] + " vs " + prof.class_labels[b],
                         std::isnan(tv) ? "-" : fmt_fixed(tv, 3),
                         std::isnan(ind.pair_df(a, b)) ? "-" : fmt_fixed(ind.pair_df(a, b), 1),
                         std::isnan(ind.pair_p(a, b)) ? "-" : fmt_fixed(ind.pair_p(a, b), 4)});
      }
  out << markdown_table(ph, prows);
  return out.str();
}

// Loadings table with sub-threshold entries suppressed (blank cells).
inline void write_efa_loadings_csv(std::ostream& out, const EfaResult& r) {
  Table t;
  t.header = {"item"};
  for (int f = 0; f < r.n_factors; ++f) t.header.push_back("factor_" + std::to_string(f + 1));
  t.header.push_back("communality");
  t.header.push_back("status");
  const double thr = r.salience_threshold;
  for (size_t k = 0; k < r.item_names.size(); ++k) {
    std::vector<std::string> row = {r.item_names[k]};
    for (int f = 0; f < r.n_factors; ++f) {
      const double l = r.loadings(static_cast<int>(k), f);
      row.push_back(thr > 0.0 && std::fabs(l) < thr ? "" : fmt_double(l));
    }
    row.push_back(fmt_double(r.communalities[static_cast<int>(k)]));
    switch (r.status[k]) {
      case ItemStatus::Retained: row.push_back("retained"); break;
      case ItemStatus::NoSalientLoading: row.push_back("no_salient_loading"); break;
      case ItemStatus::CrossLoading: row.push_back("cross_loading"); break;
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

inline ordered_json efa_to_json(const EfaResult& r) {
  ordered_json j;
  j["n_factors"] = r.n_factors;
  j["n_complete"] = r.n_complete;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["salience_threshold"] = r.salience_threshold;
  j["eigenvalues"] = std::vector<double>(r.eigenvalues.data(),
                                         r.eigenvalues.data() + r.eigenvalues.size());
  ordered_json items = ordered_json::array();
  for (size_t k = 0; k < r.item_names.size(); ++k) {
    ordered_json e;
    e["name"] = r.item_names[k];
    std::vector<double> l;
    for (int f = 0; f < r.n_factors; ++f) l.push_back(r.loadings(static_cast<int>(k), f));
    e["loadings"] = l;
    e["communality"] = r.communalities[static_cast<int>(k)];
    e["status"] = r.status[k] == ItemStatus::Retained            ? "retained"
                  : r.status[k] == ItemStatus::NoSalientLoading ? "no_salient_loading"
                                                                 : "cross_loading";
    items.push_back(e);
  }
  j["items"] = items;
  return j;
}

inline void write_scores_csv(std::ostream& out, const std::vector<std::string>& resp_ids,
                             const Eigen::MatrixXd& scores) {
  Table t;
  t.header = {"resp_id"};
  for (int f = 0; f < scores.cols(); ++f) t.header.push_back("factor_" + std::to_string(f + 1));
  for (int n = 0; n < scores.rows(); ++n) {
    std::vector<std::string> row = {resp_ids[n]};
    for (int f = 0; f < scores.cols(); ++f)
      row.push_back(std::isnan(scores(n, f)) ? "" : fmt_double(scores(n, f)));
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

inline ordered_json fmnl_to_json(const FmnlResult& r) {
  ordered_json j;
  j["reference_class"] = r.reference_class + 1;
  j["quasi_loglik"] = r.quasi_loglik;
  j["converged"] = r.converged;
  j["separation"] = r.separation;
  j["iterations"] = r.iterations;
  ordered_json classes = ordered_json::array();
  for (int c = 0; c < r.gamma.rows(); ++c) {
    ordered_json jc;
    jc["label"] = "class" + std::to_string(c + 1);
    ordered_json coefs = ordered_json::array();
    for (int p = 0; p < r.gamma.cols(); ++p) {
      ordered_json e;
      e["name"] = r.covariate_names[p];
      e["value"] = r.gamma(c, p);
      e["se"] = detail::num_or_null(r.se(c, p));
      e["p"] = detail::num_or_null(r.p_value(c, p));
      coefs.push_back(e);
    }
    jc["coefficients"] = coefs;
    classes.push_back(jc);
  }
  j["classes"] = classes;
  return j;
}

inline void write_fmnl_csv(std::ostream& out, const FmnlResult& r) {
  const int C = static_cast<int>(r.gamma.rows());
  Table t;
  t.header = {"name"};
  for (int c = 0; c < C; ++c) {
    const std::string p = "class" + std::to_string(c + 1) + "_";
    t.header.push_back(p + "estimate");
    t.header.push_back(p + "se");
    t.header.push_back(p + "p");
  }
  for (int p = 0; p < r.gamma.cols(); ++p) {
    std::vector<std::string> row = {r.covariate_names[p]};
    for (int c = 0; c < C; ++c) {
      row.push_back(fmt_double(r.gamma(c, p)));
      row.push_back(detail::fmt_or_empty(r.se(c, p)));
      row.push_back(detail::fmt_or_empty(r.p_value(c, p)));
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

inline void write_avg_probs_csv(std::ostream& out, const Eigen::MatrixXd& probs,
                                const std::vector<std::string>& group_names) {
  Table t;
  t.header = {"class"};
  for (const auto& g : group_names) t.header.push_back(g);
  for (int c = 0; c < probs.rows(); ++c) {
    std::vector<std::string> row = {"class" + std::to_string(c + 1)};
    for (int g = 0; g < probs.cols(); ++g) row.push_back(fmt_double(probs(c, g)));
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

}  // namespace lccm
