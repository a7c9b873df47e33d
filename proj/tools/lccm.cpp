// Command-line front end for the latent-class choice toolkit.
//
// All commands read a single JSON run configuration; --seed, --threads and
// --out override the corresponding config entries so sweeps can share one
// file. Outputs are plain CSV/JSON/markdown in the output directory, and every
// command is deterministic given (config, seed, threads).
//
// Exit codes: 0 success, 1 input or configuration error, 2 the requested fit
// did not converge (result files are still written).

#include "lccm/lccm.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using lccm::ordered_json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

class cli_error : public std::runtime_error {
public:
  explicit cli_error(const std::string& msg) : std::runtime_error(msg) {}
};

ordered_json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cli_error("cannot open " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw cli_error(path.string() + ": " + e.what());
  }
}

std::string require_string(const ordered_json& j, const std::string& key,
                           const std::string& where) {
  if (!j.contains(key) || !j[key].is_string())
    throw cli_error(where + " needs a string field \"" + key + "\"");
  return j[key].get<std::string>();
}

lccm::ChoiceDataset load_choices(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cli_error("cannot open choice data " + path.string());
  return lccm::load_choice_csv(in);
}

lccm::IndicatorMatrix load_indicators(const fs::path& path, const ordered_json& data_block) {
  std::ifstream in(path);
  if (!in) throw cli_error("cannot open indicator data " + path.string());
  double lo = -lccm::kInf, hi = lccm::kInf;
  if (data_block.contains("scale")) {
    const auto& s = data_block["scale"];
    if (!s.is_array() || s.size() != 2) throw cli_error("data.scale must be [lo, hi]");
    lo = s[0].get<double>();
    hi = s[1].get<double>();
  }
  return lccm::load_indicator_csv(in, lo, hi);
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cli_error("cannot write " + path.string());
  out << content;
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  write_text(path, j.dump(2) + "\n");
}

lccm::Constraint parse_constraint(const std::string& s, const std::string& where) {
  if (s == "free") return lccm::Constraint::Free;
  if (s == "nonnegative") return lccm::Constraint::NonNegative;
  if (s == "nonpositive") return lccm::Constraint::NonPositive;
  if (s == "fixed") return lccm::Constraint::Fixed;
  throw cli_error(where + ": unknown constraint \"" + s +
                  "\" (use free, nonnegative, nonpositive or fixed)");
}

lccm::ModelSpec model_from_json(const ordered_json& m) {
  lccm::ModelSpec spec;
  spec.n_classes = m.value("classes", 1);
  const std::string kernel = m.value("kernel", std::string("logit"));
  if (kernel == "logit") {
    spec.kernel = lccm::KernelType::Logit;
  } else if (kernel == "nested_logit") {
    spec.kernel = lccm::KernelType::NestedLogit;
  } else {
    throw cli_error("model.kernel must be \"logit\" or \"nested_logit\"");
  }
  if (!m.contains("terms")) throw cli_error("model.terms is required");
  for (const auto& t : m["terms"]) {
    lccm::UtilityTerm term;
    if (t.is_string()) {
      term.attribute = t.get<std::string>();
    } else {
      term.attribute = require_string(t, "name", "model.terms");
      term.constraint = parse_constraint(t.value("constraint", std::string("free")), "model.terms");
      term.fixed_value = t.value("value", 0.0);
    }
    spec.terms.push_back(term);
  }
  for (const auto& a : m.value("ascs", ordered_json::array())) {
    lccm::AscTerm asc;
    if (a.is_string()) {
      asc.alternative = a.get<std::string>();
    } else {
      asc.alternative = require_string(a, "alternative", "model.ascs");
      asc.constraint = parse_constraint(a.value("constraint", std::string("free")), "model.ascs");
      asc.fixed_value = a.value("value", 0.0);
    }
    spec.ascs.push_back(asc);
  }
  for (const auto& n : m.value("nests", ordered_json::array())) {
    lccm::NestEntry nest;
    nest.name = require_string(n, "name", "model.nests");
    if (!n.contains("members") || !n["members"].is_array())
      throw cli_error("model.nests entries need a \"members\" array");
    for (const auto& mem : n["members"]) nest.alternatives.push_back(mem.get<std::string>());
    nest.lambda_fixed = n.value("fixed", false);
    nest.lambda_value = n.value("value", 1.0);
    spec.nests.push_back(nest);
  }
  for (const auto& z : m.value("membership_covariates", ordered_json::array()))
    spec.membership_covariates.push_back(z.get<std::string>());
  spec.reference_class = m.value("reference_class", 1) - 1;
  return spec;
}

lccm::EstimateOptions options_from_json(const ordered_json& cfg) {
  lccm::EstimateOptions opts;
  if (!cfg.contains("options")) return opts;
  const auto& o = cfg["options"];
  opts.n_starts = o.value("starts", opts.n_starts);
  opts.seed = o.value("seed", opts.seed);
  opts.threads = o.value("threads", opts.threads);
  opts.em_tol = o.value("em_tol", opts.em_tol);
  opts.max_em_iterations = o.value("em_iterations", opts.max_em_iterations);
  opts.max_polish_iterations = o.value("polish_iterations", opts.max_polish_iterations);
  opts.compute_se = o.value("compute_se", opts.compute_se);
  const std::string ordering = o.value("ordering", std::string("share"));
  if (ordering == "share") {
    opts.ordering = lccm::EstimateOptions::Ordering::ShareDescending;
  } else if (ordering == "ratio") {
    opts.ordering = lccm::EstimateOptions::Ordering::CwdAscending;
    opts.ordering_attribute = o.value("ordering_attribute", std::string());
    opts.ordering_numeraire = o.value("ordering_numeraire", std::string());
  } else {
    throw cli_error("options.ordering must be \"share\" or \"ratio\"");
  }
  return opts;
}

MatrixXd matrix_from_json(const ordered_json& j, const std::string& where) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw cli_error(where + " must be an array of rows");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j[0].size());
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j[r].size()) != cols) throw cli_error(where + " rows differ in length");
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

// Inputs shared by the estimation-side commands: the choice data, and when
// membership covariates are configured, the covariate table joined to it.
struct EstimationInputs {
  lccm::ChoiceDataset choices;
  lccm::IndicatorMatrix covariates;
  bool has_covariates = false;
};

EstimationInputs gather_inputs(const ordered_json& cfg, const lccm::ModelSpec& spec) {
  if (!cfg.contains("data")) throw cli_error("config needs a \"data\" block");
  const auto& data = cfg["data"];
  EstimationInputs in;
  in.choices = load_choices(require_string(data, "choices", "data"));
  if (!spec.membership_covariates.empty()) {
    if (!data.contains("indicators"))
      throw cli_error("membership covariates need data.indicators");
    lccm::IndicatorMatrix ind =
        load_indicators(require_string(data, "indicators", "data"), data);
    lccm::JoinResult jr = lccm::join(in.choices, ind);
    if (jr.dropped_choice_respondents > 0)
      std::cerr << "note: dropped " << jr.dropped_choice_respondents
                << " respondent(s) without covariate rows\n";
    in.choices = std::move(jr.choices);
    in.covariates = std::move(jr.indicators);
    in.has_covariates = true;
  }
  return in;
}

// Rebuilds the estimated parameters from a result JSON. Values are written
// with shortest-round-trip formatting, so this reproduces them bit for bit.
lccm::Params params_from_result(const ordered_json& j, const lccm::ModelContext& ctx) {
  const auto& classes = j.at("classes");
  if (static_cast<int>(classes.size()) != ctx.n_classes())
    throw cli_error("estimate file does not match the configured class count");
  lccm::Params p;
  p.beta.resize(ctx.n_classes(), ctx.n_beta());
  p.lambda.resize(ctx.n_classes(), ctx.nested() ? ctx.n_nests() : 0);
  p.alpha = MatrixXd::Zero(ctx.n_classes(), ctx.n_z());
  for (int c = 0; c < ctx.n_classes(); ++c) {
    const auto& jc = classes[c];
    const auto& utility = jc.at("utility");
    if (static_cast<int>(utility.size()) != ctx.n_beta())
      throw cli_error("estimate file does not match the configured utility terms");
    for (int b = 0; b < ctx.n_beta(); ++b) p.beta(c, b) = utility[b].at("value").get<double>();
    if (ctx.nested()) {
      const auto& nests = jc.at("nest_coefficients");
      for (int m = 0; m < ctx.n_nests(); ++m) p.lambda(c, m) = nests[m].at("value").get<double>();
    }
    const auto& membership = jc.at("membership");
    if (static_cast<int>(membership.size()) != ctx.n_z())
      throw cli_error("estimate file does not match the configured covariates");
    for (int z = 0; z < ctx.n_z(); ++z) p.alpha(c, z) = membership[z].at("value").get<double>();
  }
  return p;
}

// Posterior table plus the indicator rows aligned to it. Respondents without
// an indicator row get NaN rows, which downstream listwise handling skips.
struct PosteriorInputs {
  std::vector<std::string> ids;
  MatrixXd posterior;
  lccm::IndicatorMatrix indicators;
};

PosteriorInputs gather_posterior(const ordered_json& cfg, const fs::path& out_dir,
                                 const std::string& block_name) {
  fs::path post_path = out_dir / "posterior.csv";
  std::string ind_path;
  if (cfg.contains(block_name)) {
    const auto& b = cfg[block_name];
    if (b.contains("posterior")) post_path = b["posterior"].get<std::string>();
    if (b.contains("indicators")) ind_path = b["indicators"].get<std::string>();
  }
  if (ind_path.empty() && cfg.contains("data") && cfg["data"].contains("indicators"))
    ind_path = cfg["data"]["indicators"].get<std::string>();
  if (ind_path.empty()) throw cli_error(block_name + " needs an indicator table");

  std::ifstream post_in(post_path);
  if (!post_in)
    throw cli_error("cannot open " + post_path.string() + " (run the estimate and posterior commands first)");
  PosteriorInputs in;
  in.posterior = lccm::read_posterior_csv(post_in, &in.ids);

  lccm::IndicatorMatrix raw =
      load_indicators(ind_path, cfg.contains("data") ? cfg["data"] : ordered_json::object());
  std::map<std::string, int> row_of;
  for (size_t i = 0; i < raw.respondent_ids.size(); ++i)
    row_of[raw.respondent_ids[i]] = static_cast<int>(i);

  in.indicators.names = raw.names;
  in.indicators.respondent_ids = in.ids;
  in.indicators.scale_lo = raw.scale_lo;
  in.indicators.scale_hi = raw.scale_hi;
  in.indicators.values =
      MatrixXd::Constant(static_cast<int>(in.ids.size()), raw.n_cols(), lccm::kNaN);
  int missing = 0;
  for (size_t i = 0; i < in.ids.size(); ++i) {
    auto it = row_of.find(in.ids[i]);
    if (it == row_of.end()) {
      ++missing;
      continue;
    }
    in.indicators.values.row(static_cast<int>(i)) = raw.values.row(it->second);
  }
  if (missing > 0)
    std::cerr << "note: " << missing << " respondent(s) have no indicator row\n";
  return in;
}

// Design matrix (intercept first) for the named covariate columns, restricted
// to rows where every covariate is present. Weight rows are filtered along.
void build_design(const lccm::IndicatorMatrix& ind, const std::vector<std::string>& covs,
                  const MatrixXd& posterior, MatrixXd& W, MatrixXd& X,
                  std::vector<std::string>& names) {
  std::vector<int> cols;
  for (const auto& name : covs) {
    const int k = ind.column_index(name);
    if (k < 0) throw cli_error("covariate \"" + name + "\" is not an indicator column");
    cols.push_back(k);
  }
  std::vector<int> rows = ind.complete_rows(cols);
  if (rows.empty()) throw cli_error("no respondent has all requested covariates");
  X.resize(static_cast<int>(rows.size()), 1 + static_cast<int>(cols.size()));
  W.resize(static_cast<int>(rows.size()), posterior.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    X(static_cast<int>(i), 0) = 1.0;
    for (size_t k = 0; k < cols.size(); ++k)
      X(static_cast<int>(i), 1 + static_cast<int>(k)) = ind.values(rows[i], cols[k]);
    W.row(static_cast<int>(i)) = posterior.row(rows[i]);
  }
  names.assign(1, "const");
  names.insert(names.end(), covs.begin(), covs.end());
}

int cmd_simulate(const ordered_json& cfg, const fs::path& out_dir, uint64_t* seed_override) {
  if (!cfg.contains("simulate")) throw cli_error("config needs a \"simulate\" block");
  const auto& s = cfg["simulate"];

  lccm::GeneratorSpec g;
  g.model = model_from_json(s.contains("model") ? s["model"] : cfg.at("model"));
  g.n_respondents = s.value("respondents", 0);
  g.n_situations = s.value("situations", 0);
  g.seed = seed_override ? *seed_override : s.value("seed", uint64_t{1});
  if (!s.contains("alternatives")) throw cli_error("simulate.alternatives is required");
  for (const auto& a : s["alternatives"]) g.alternative_ids.push_back(a.get<std::string>());
  if (!s.contains("attributes")) throw cli_error("simulate.attributes is required");
  for (const auto& a : s["attributes"]) {
    lccm::GenAttribute attr;
    attr.name = require_string(a, "name", "simulate.attributes");
    if (a.contains("levels")) {
      for (const auto& v : a["levels"]) attr.levels.push_back(v.get<double>());
    } else {
      attr.lo = a.value("low", 0.0);
      attr.hi = a.value("high", 1.0);
    }
    g.attributes.push_back(attr);
  }

  g.truth.beta = matrix_from_json(s.at("beta"), "simulate.beta");
  g.truth.alpha = s.contains("alpha") ? matrix_from_json(s["alpha"], "simulate.alpha")
                                      : MatrixXd::Zero(g.model.n_classes, 1);
  if (s.contains("lambda")) g.truth.lambda = matrix_from_json(s["lambda"], "simulate.lambda");

  if (s.contains("indicators")) {
    const auto& ind = s["indicators"];
    for (const auto& n : ind.at("names")) g.indicators.names.push_back(n.get<std::string>());
    if (ind.contains("scale")) {
      g.indicators.scale_lo = ind["scale"][0].get<double>();
      g.indicators.scale_hi = ind["scale"][1].get<double>();
    }
    if (ind.contains("loadings")) {
      g.factor_mode = true;
      g.factors.loadings = matrix_from_json(ind["loadings"], "simulate.indicators.loadings");
      g.factors.factor_sd = ind.value("factor_sd", 1.0);
    } else {
      g.with_indicators = true;
      g.indicators.class_means = matrix_from_json(ind.at("class_means"), "simulate.indicators.class_means");
      g.indicators.sd = ind.value("sd", 1.0);
    }
    if (g.factor_mode) {
      g.with_indicators = false;
    }
  }

  lccm::GenOutput out = lccm::generate(g);

  std::ostringstream choices;
  lccm::write_choice_csv(choices, out.choices);
  write_text(out_dir / "choices.csv", choices.str());
  if (out.indicators.n_cols() > 0) {
    std::ostringstream ind;
    lccm::write_indicator_csv(ind, out.indicators);
    write_text(out_dir / "indicators.csv", ind.str());
  }

  ordered_json truth;
  truth["seed"] = g.seed;
  truth["classes"] = g.model.n_classes;
  auto mat_to_json = [](const MatrixXd& m) {
    ordered_json rows = ordered_json::array();
    for (int r = 0; r < m.rows(); ++r) {
      ordered_json row = ordered_json::array();
      for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(row);
    }
    return rows;
  };
  truth["beta"] = mat_to_json(g.truth.beta);
  truth["alpha"] = mat_to_json(g.truth.alpha);
  if (g.truth.lambda.size() > 0) truth["lambda"] = mat_to_json(g.truth.lambda);
  ordered_json assignment = ordered_json::array();
  for (size_t n = 0; n < out.true_class.size(); ++n) {
    ordered_json e;
    e["resp_id"] = out.choices.respondents[n].id;
    e["class"] = out.true_class[n] + 1;
    assignment.push_back(e);
  }
  truth["true_class"] = assignment;
  write_json_file(out_dir / "truth.json", truth);

  std::cout << "wrote " << (out_dir / "choices.csv").string() << "\n";
  return 0;
}

int cmd_estimate(const ordered_json& cfg, const fs::path& out_dir,
                 const lccm::EstimateOptions& opts) {
  lccm::ModelSpec spec = model_from_json(cfg.at("model"));
  EstimationInputs in = gather_inputs(cfg, spec);
  lccm::EstimationResult res =
      lccm::estimate(in.choices, spec, in.has_covariates ? &in.covariates : nullptr, opts);

  write_json_file(out_dir / "estimate.json", lccm::result_to_json(res));
  std::ostringstream csv;
  lccm::write_result_csv(csv, res);
  write_text(out_dir / "estimate.csv", csv.str());

  std::cout << "loglik " << lccm::fmt_double(res.loglik) << ", status " << res.status << "\n";
  std::cout << "wrote " << (out_dir / "estimate.json").string() << "\n";
  return res.converged ? 0 : 2;
}

int cmd_posterior(const ordered_json& cfg, const fs::path& out_dir) {
  lccm::ModelSpec spec = model_from_json(cfg.at("model"));
  EstimationInputs in = gather_inputs(cfg, spec);
  const fs::path est_path = out_dir / "estimate.json";
  if (!fs::exists(est_path))
    throw cli_error("missing " + est_path.string() + " (run the estimate command first)");
  ordered_json est = load_json(est_path);

  lccm::ModelContext ctx =
      lccm::build_context(in.choices, spec, in.has_covariates ? &in.covariates : nullptr);
  lccm::Params params = params_from_result(est, ctx);
  MatrixXd post = lccm::posterior_membership(ctx, params);

  std::vector<std::string> ids;
  for (const auto& r : in.choices.respondents) ids.push_back(r.id);
  std::ostringstream csv;
  lccm::write_posterior_csv(csv, ids, post);
  write_text(out_dir / "posterior.csv", csv.str());
  std::cout << "wrote " << (out_dir / "posterior.csv").string() << "\n";
  return 0;
}

int cmd_profile(const ordered_json& cfg, const fs::path& out_dir) {
  PosteriorInputs in = gather_posterior(cfg, out_dir, "profile");
  lccm::ClassProfile prof = lccm::class_profile(in.indicators, in.posterior);

  std::ostringstream pcsv, wcsv;
  lccm::write_profile_csv(pcsv, prof);
  lccm::write_pairwise_csv(wcsv, prof);
  write_text(out_dir / "profile.csv", pcsv.str());
  write_text(out_dir / "pairwise.csv", wcsv.str());
  write_text(out_dir / "profile.md", lccm::profile_report(prof));
  std::cout << "wrote " << (out_dir / "profile.md").string() << "\n";
  return 0;
}

int cmd_fmnl(const ordered_json& cfg, const fs::path& out_dir) {
  PosteriorInputs in = gather_posterior(cfg, out_dir, "fmnl");
  std::vector<std::string> covs;
  int ref = 0;
  if (cfg.contains("fmnl")) {
    for (const auto& c : cfg["fmnl"].value("covariates", ordered_json::array()))
      covs.push_back(c.get<std::string>());
    ref = cfg["fmnl"].value("reference_class", 1) - 1;
  }

  MatrixXd W, X;
  std::vector<std::string> names;
  if (covs.empty()) {
    // Intercept-only: every posterior row participates.
    X = MatrixXd::Ones(in.posterior.rows(), 1);
    W = in.posterior;
    names = {"const"};
  } else {
    build_design(in.indicators, covs, in.posterior, W, X, names);
  }

  lccm::FmnlResult res = lccm::estimate_fmnl(W, X, names, ref);
  write_json_file(out_dir / "fmnl.json", lccm::fmnl_to_json(res));
  std::ostringstream csv;
  lccm::write_fmnl_csv(csv, res);
  write_text(out_dir / "fmnl.csv", csv.str());
  std::cout << "wrote " << (out_dir / "fmnl.json").string() << "\n";
  return res.converged ? 0 : 2;
}

int cmd_efa(const ordered_json& cfg, const fs::path& out_dir) {
  std::string ind_path;
  lccm::EfaOptions opts;
  double threshold = 0.32;
  if (cfg.contains("efa")) {
    const auto& e = cfg["efa"];
    if (e.contains("indicators")) ind_path = e["indicators"].get<std::string>();
    opts.n_factors = e.value("factors", 0);
    opts.unit_variance_scores = e.value("unit_variance_scores", false);
    threshold = e.value("salience_threshold", threshold);
  }
  if (ind_path.empty() && cfg.contains("data") && cfg["data"].contains("indicators"))
    ind_path = cfg["data"]["indicators"].get<std::string>();
  if (ind_path.empty()) throw cli_error("efa needs an indicator table");

  lccm::IndicatorMatrix ind =
      load_indicators(ind_path, cfg.contains("data") ? cfg["data"] : ordered_json::object());
  lccm::EfaResult fitted = lccm::fit_efa(ind, opts);
  lccm::EfaResult retained = lccm::apply_retention(fitted, threshold);
  MatrixXd scores = lccm::factor_scores(retained, ind);

  write_json_file(out_dir / "efa.json", lccm::efa_to_json(retained));
  std::ostringstream lcsv, scsv;
  lccm::write_efa_loadings_csv(lcsv, retained);
  lccm::write_scores_csv(scsv, ind.respondent_ids, scores);
  write_text(out_dir / "loadings.csv", lcsv.str());
  write_text(out_dir / "scores.csv", scsv.str());
  std::cout << "wrote " << (out_dir / "efa.json").string() << "\n";
  return 0;
}

// Three routes to the same membership coefficients: a fractional logit on the
// baseline posteriors, a simultaneous fit with covariates in the membership
// model, and a sequential re-estimation around the frozen baseline kernel.
int cmd_compare(const ordered_json& cfg, const fs::path& out_dir,
                const lccm::EstimateOptions& opts) {
  if (!cfg.contains("compare")) throw cli_error("config needs a \"compare\" block");
  std::vector<std::string> covs;
  for (const auto& c : cfg["compare"].value("covariates", ordered_json::array()))
    covs.push_back(c.get<std::string>());
  if (covs.empty()) throw cli_error("compare.covariates must name at least one column");

  lccm::ModelSpec spec = model_from_json(cfg.at("model"));
  spec.membership_covariates.clear();
  if (!cfg.contains("data") || !cfg["data"].contains("indicators"))
    throw cli_error("compare needs data.indicators");
  lccm::ChoiceDataset choices = load_choices(require_string(cfg["data"], "choices", "data"));
  lccm::IndicatorMatrix ind =
      load_indicators(cfg["data"]["indicators"].get<std::string>(), cfg["data"]);
  lccm::JoinResult jr = lccm::join(choices, ind);

  lccm::EstimationResult base = lccm::estimate(jr.choices, spec, nullptr, opts);

  MatrixXd W, X;
  std::vector<std::string> names;
  build_design(jr.indicators, covs, base.posteriors, W, X, names);
  lccm::FmnlResult fm = lccm::estimate_fmnl(W, X, names, spec.reference_class);

  lccm::ModelSpec spec_cov = spec;
  spec_cov.membership_covariates = covs;
  lccm::EstimationResult simultaneous =
      lccm::estimate(jr.choices, spec_cov, &jr.indicators, opts);
  lccm::EstimationResult sequential =
      lccm::estimate_sequential_membership(jr.choices, spec_cov, base, &jr.indicators, opts);

  // The simultaneous fit orders its own classes; map them onto the baseline
  // labels and re-base its membership block on the shared reference class.
  std::vector<int> perm = lccm::match_classes(simultaneous.params.beta, base.params.beta);
  const int C = spec.n_classes;
  const int P = static_cast<int>(names.size());
  MatrixXd alpha_sim(C, P);
  for (int c = 0; c < C; ++c)
    alpha_sim.row(c) = simultaneous.params.alpha.row(perm[c]) -
                       simultaneous.params.alpha.row(perm[spec.reference_class]);
  const bool aligned = [&] {
    for (int c = 0; c < C; ++c)
      if (perm[c] != c) return false;
    return true;
  }();

  ordered_json rows = ordered_json::array();
  int n_large_t = 0, n_sign_agree = 0;
  double max_rel_diff = 0.0, max_abs_diff = 0.0;
  for (int c = 0; c < C; ++c) {
    if (c == spec.reference_class) continue;
    for (int p = 0; p < P; ++p) {
      const double a = fm.gamma(c, p);
      const double b = alpha_sim(c, p);
      const double d = sequential.params.alpha(c, p);
      ordered_json row;
      row["class"] = "class" + std::to_string(c + 1);
      row["name"] = names[p];
      row["fmnl"] = a;
      row["fmnl_se"] = lccm::detail::num_or_null(fm.se(c, p));
      row["simultaneous"] = b;
      row["simultaneous_se"] =
          aligned ? lccm::detail::num_or_null(simultaneous.alpha[c][p].se) : ordered_json();
      row["sequential"] = d;
      row["sequential_se"] = lccm::detail::num_or_null(sequential.alpha[c][p].se);
      const double t = std::isfinite(fm.se(c, p)) && fm.se(c, p) > 0.0 ? a / fm.se(c, p)
                                                                       : lccm::kNaN;
      row["fmnl_t"] = lccm::detail::num_or_null(t);
      const bool large = std::isfinite(t) && std::fabs(t) > 3.0;
      row["large_t"] = large;
      if (large) {
        ++n_large_t;
        const bool agree = (a > 0) == (b > 0) && (a > 0) == (d > 0);
        if (agree) ++n_sign_agree;
        const double scale = std::max({std::fabs(a), std::fabs(b), std::fabs(d)});
        const double spread = std::max({std::fabs(a - b), std::fabs(a - d), std::fabs(b - d)});
        max_abs_diff = std::max(max_abs_diff, spread);
        if (scale > 0) max_rel_diff = std::max(max_rel_diff, spread / scale);
        row["rel_spread"] = scale > 0 ? spread / scale : 0.0;
      }
      rows.push_back(row);
    }
  }

  ordered_json j;
  j["covariates"] = names;
  j["baseline_loglik"] = base.loglik;
  j["simultaneous_loglik"] = simultaneous.loglik;
  j["sequential_loglik"] = sequential.loglik;
  j["classes_aligned"] = aligned;
  j["fit_status"]["baseline"] = base.status;
  j["fit_status"]["fmnl"] = fm.converged ? "converged" : "not converged";
  j["fit_status"]["simultaneous"] = simultaneous.status;
  j["fit_status"]["sequential"] = sequential.status;
  j["converged"] = base.converged && simultaneous.converged && sequential.converged &&
                   fm.converged;
  j["coefficients"] = rows;
  j["summary"]["n_large_t"] = n_large_t;
  j["summary"]["sign_agreement_rate"] =
      n_large_t > 0 ? static_cast<double>(n_sign_agree) / n_large_t : 1.0;
  j["summary"]["max_abs_diff"] = max_abs_diff;
  j["summary"]["max_rel_diff"] = max_rel_diff;
  write_json_file(out_dir / "compare.json", j);

  std::ostringstream md;
  md << "# Membership model cross-check\n\n";
  md << "Coefficient spread is (max - min) / max |estimate| across the three fits,\n";
  md << "reported for coefficients with |t| > 3 in the fractional logit.\n\n";
  std::vector<std::string> header = {"class", "name", "fractional", "simultaneous",
                                     "sequential", "|t|>3", "spread"};
  std::vector<std::vector<std::string>> mdrows;
  for (const auto& row : rows) {
    mdrows.push_back({row["class"].get<std::string>(), row["name"].get<std::string>(),
                      lccm::fmt_fixed(row["fmnl"].get<double>(), 4),
                      lccm::fmt_fixed(row["simultaneous"].get<double>(), 4),
                      lccm::fmt_fixed(row["sequential"].get<double>(), 4),
                      row["large_t"].get<bool>() ? "yes" : "no",
                      row.contains("rel_spread")
                          ? lccm::fmt_fixed(row["rel_spread"].get<double>(), 4)
                          : "-"});
  }
  md << lccm::markdown_table(header, mdrows) << "\n";
  md << "Sign agreement on |t|>3 coefficients: " << n_sign_agree << "/" << n_large_t << "\n";
  write_text(out_dir / "compare.md", md.str());

  std::cout << "wrote " << (out_dir / "compare.json").string() << "\n";
  return j["converged"].get<bool>() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-class choice modelling toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_override;
  uint64_t seed_flag = 0;
  int threads_flag = 0;
  app.add_option("--config", config_path, "JSON run configuration")->required();
  auto* seed_opt = app.add_option("--seed", seed_flag, "override options.seed / simulate.seed");
  auto* threads_opt = app.add_option("--threads", threads_flag, "override options.threads");
  app.add_option("--out", out_override, "override output.dir");

  for (const char* name : {"estimate", "posterior", "profile", "fmnl", "efa", "simulate", "compare"})
    app.add_subcommand(name);

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().at(0)->get_name();

  try {
    ordered_json cfg = load_json(config_path);

    fs::path out_dir = out_override.empty()
                           ? fs::path(cfg.contains("output")
                                          ? cfg["output"].value("dir", std::string("out"))
                                          : std::string("out"))
                           : fs::path(out_override);
    fs::create_directories(out_dir);

    lccm::EstimateOptions opts = options_from_json(cfg);
    if (seed_opt->count() > 0) opts.seed = seed_flag;
    if (threads_opt->count() > 0) opts.threads = threads_flag;

    if (command == "simulate") {
      uint64_t seed = opts.seed;
      return cmd_simulate(cfg, out_dir, seed_opt->count() > 0 ? &seed : nullptr);
    }
    if (command == "estimate") return cmd_estimate(cfg, out_dir, opts);
    if (command == "posterior") return cmd_posterior(cfg, out_dir);
    if (command == "profile") return cmd_profile(cfg, out_dir);
    if (command == "fmnl") return cmd_fmnl(cfg, out_dir);
    if (command == "efa") return cmd_efa(cfg, out_dir);
    if (command == "compare") return cmd_compare(cfg, out_dir, opts);
    throw cli_error("unknown command " + command);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
