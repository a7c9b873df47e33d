#include "lccm/efa.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace lccm;
using Catch::Matchers::ContainsSubstring;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

IndicatorMatrix make_table(const std::vector<std::string>& names, const MatrixXd& values) {
  IndicatorMatrix m;
  m.names = names;
  m.values = values;
  for (int i = 0; i < values.rows(); ++i) m.respondent_ids.push_back(std::to_string(i + 1));
  return m;
}

// Indicators driven by two orthogonal factors with a designed loading matrix:
// three markers each, one deliberate cross-loader and one noise item.
IndicatorMatrix factor_sample(int n, unsigned seed) {
  MatrixXd lam(7, 2);
  lam << 0.8, 0.0,
         0.75, 0.0,
         0.7, 0.0,
         0.0, 0.8,
         0.0, 0.75,
         0.45, 0.45,
         0.1, 0.1;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd x(n, 7);
  for (int i = 0; i < n; ++i) {
    double f1 = nd(rng), f2 = nd(rng);
    for (int k = 0; k < 7; ++k) {
      double h = lam.row(k).squaredNorm();
      x(i, k) = lam(k, 0) * f1 + lam(k, 1) * f2 + std::sqrt(1.0 - h) * nd(rng);
    }
  }
  return make_table({"i1", "i2", "i3", "i4", "i5", "i6", "i7"}, x);
}

// Column of the fitted loadings that carries the given anchor item, sign-fixed
// so the anchor loads positively.
VectorXd aligned_column(const MatrixXd& loadings, int anchor) {
  int best = 0;
  for (int f = 1; f < loadings.cols(); ++f)
    if (std::fabs(loadings(anchor, f)) > std::fabs(loadings(anchor, best))) best = f;
  VectorXd col = loadings.col(best);
  if (col[anchor] < 0.0) col = -col;
  return col;
}

}  // namespace

TEST_CASE("two correlated items have a closed-form single factor") {
  MatrixXd v(3, 2);
  v << 1, 1, 2, 3, 3, 2;
  EfaResult r = fit_efa(make_table({"a", "b"}, v));

  REQUIRE(r.n_complete == 3);
  REQUIRE_THAT(r.correlation(0, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(r.eigenvalues[0], Catch::Matchers::WithinAbs(1.5, 1e-12));
  REQUIRE_THAT(r.eigenvalues[1], Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE(r.n_factors == 1);  // one eigenvalue above 1
  REQUIRE(r.converged);

  // Iterating the principal axis step on this matrix has fixed point h = 1/2
  // and loading sqrt(1/2) on both items.
  REQUIRE_THAT(r.communalities[0], Catch::Matchers::WithinAbs(0.5, 2e-6));
  REQUIRE_THAT(r.loadings(0, 0), Catch::Matchers::WithinAbs(std::sqrt(0.5), 2e-6));
  REQUIRE_THAT(r.loadings(1, 0), Catch::Matchers::WithinAbs(std::sqrt(0.5), 2e-6));
  REQUIRE(r.loadings(0, 0) > 0.0);

  // Regression coefficients R^-1 Lambda = (2/3) sqrt(1/2) per item.
  REQUIRE_THAT(r.score_coefficients(0, 0),
               Catch::Matchers::WithinAbs(2.0 / 3.0 * std::sqrt(0.5), 1e-5));

  // Population standardization: sd uses the 1/N convention.
  REQUIRE_THAT(r.item_sds[0], Catch::Matchers::WithinRel(std::sqrt(2.0 / 3.0), 1e-12));
  REQUIRE_THAT(r.item_means[0], Catch::Matchers::WithinRel(2.0, 1e-12));
}

TEST_CASE("designed loading pattern is recovered after rotation") {
  IndicatorMatrix ind = factor_sample(4000, 20240901);
  EfaOptions opts;
  opts.n_factors = 2;
  EfaResult r = fit_efa(ind, opts);
  REQUIRE(r.converged);

  VectorXd fa = aligned_column(r.loadings, 0);  // factor carried by items 1-3
  VectorXd fb = aligned_column(r.loadings, 3);  // factor carried by items 4-5
  MatrixXd expect(7, 2);
  expect << 0.8, 0.0, 0.75, 0.0, 0.7, 0.0, 0.0, 0.8, 0.0, 0.75, 0.45, 0.45, 0.1, 0.1;

  // The symmetric cross-loader tilts the varimax optimum a few degrees away
  // from the generating orientation, so only the dominant cells should land
  // on the planted values; the off cells just have to stay far from salience.
  for (int k = 0; k < 7; ++k) {
    CAPTURE(k, fa[k], fb[k]);
    if (expect(k, 0) >= 0.3) REQUIRE_THAT(fa[k], Catch::Matchers::WithinAbs(expect(k, 0), 0.05));
    if (expect(k, 1) >= 0.3) REQUIRE_THAT(fb[k], Catch::Matchers::WithinAbs(expect(k, 1), 0.05));
    if (expect(k, 0) == 0.0) REQUIRE(std::fabs(fa[k]) < 0.15);
    if (expect(k, 1) == 0.0) REQUIRE(std::fabs(fb[k]) < 0.15);
  }

  // Rotation-invariant check of the recovered common structure: the
  // reproduced item covariance must match the planted pattern's.
  MatrixXd reproduced = r.loadings * r.loadings.transpose();
  MatrixXd planted = expect * expect.transpose();
  REQUIRE((reproduced - planted).cwiseAbs().maxCoeff() < 0.05);

  // Orthogonal rotation preserves row norms, so the reported communalities
  // must equal the squared row norms of the rotated loadings.
  for (int k = 0; k < 7; ++k)
    REQUIRE_THAT(r.loadings.row(k).squaredNorm(),
                 Catch::Matchers::WithinAbs(r.communalities[k], 1e-8));
  for (int k = 0; k < 7; ++k)
    REQUIRE_THAT(r.uniquenesses[k],
                 Catch::Matchers::WithinAbs(1.0 - r.communalities[k], 1e-12));

  // Presentation contract: explained variance non-increasing, dominant
  // loading of each factor positive.
  REQUIRE(r.loadings.col(0).squaredNorm() >= r.loadings.col(1).squaredNorm());
}

TEST_CASE("retention flags cross-loaders and noise items") {
  IndicatorMatrix ind = factor_sample(4000, 77);
  EfaOptions opts;
  opts.n_factors = 2;
  EfaResult fitted = fit_efa(ind, opts);
  EfaResult r = apply_retention(fitted, 0.32);

  REQUIRE(r.salience_threshold == 0.32);
  REQUIRE(r.status[0] == ItemStatus::Retained);
  REQUIRE(r.status[1] == ItemStatus::Retained);
  REQUIRE(r.status[2] == ItemStatus::Retained);
  REQUIRE(r.status[3] == ItemStatus::Retained);
  REQUIRE(r.status[4] == ItemStatus::Retained);
  REQUIRE(r.status[5] == ItemStatus::CrossLoading);
  REQUIRE(r.status[6] == ItemStatus::NoSalientLoading);
  REQUIRE(r.retained_items() == std::vector<int>{0, 1, 2, 3, 4});

  // Loadings are reported for every item; only the score map shrinks.
  REQUIRE((r.loadings - fitted.loadings).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(r.score_coefficients.row(5).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(r.score_coefficients.row(6).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(r.score_coefficients.row(0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("factor scores follow the retained items only") {
  IndicatorMatrix ind = factor_sample(1000, 5150);
  EfaOptions opts;
  opts.n_factors = 2;
  EfaResult r = apply_retention(fit_efa(ind, opts), 0.32);

  MatrixXd scored = factor_scores(r, ind);
  REQUIRE(scored.rows() == ind.n_rows());
  REQUIRE(scored.cols() == 2);
  // Fit-sample scores are centred by construction.
  REQUIRE(std::fabs(scored.col(0).mean()) < 1e-10);

  // A missing excluded item does not block scoring; a missing retained one does.
  IndicatorMatrix holes = ind;
  holes.values(0, 6) = kNaN;  // excluded noise item
  holes.values(1, 0) = kNaN;  // retained marker
  MatrixXd s2 = factor_scores(r, holes);
  REQUIRE((s2.row(0) - scored.row(0)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(std::isnan(s2(1, 0)));
  REQUIRE(std::isnan(s2(1, 1)));
}

TEST_CASE("unit variance scores have unit variance on the fit sample") {
  IndicatorMatrix ind = factor_sample(600, 8);
  EfaOptions opts;
  opts.n_factors = 2;
  opts.unit_variance_scores = true;
  EfaResult r = fit_efa(ind, opts);
  MatrixXd s = factor_scores(r, ind);
  for (int f = 0; f < 2; ++f) {
    double mean = s.col(f).mean();
    double var = (s.col(f).array() - mean).square().sum() / s.rows();
    REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-8));
  }
  REQUIRE(r.score_scale.minCoeff() > 0.0);

  EfaOptions raw = opts;
  raw.unit_variance_scores = false;
  EfaResult r0 = fit_efa(ind, raw);
  REQUIRE((r0.score_scale - VectorXd::Ones(2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rows with missing cells are dropped before fitting") {
  IndicatorMatrix ind = factor_sample(200, 3);
  ind.values(5, 2) = kNaN;
  ind.values(17, 0) = kNaN;
  EfaOptions opts;
  opts.n_factors = 2;
  EfaResult r = fit_efa(ind, opts);
  REQUIRE(r.n_complete == 198);
}

TEST_CASE("input defects raise typed errors") {
  SECTION("single indicator") {
    MatrixXd v(5, 1);
    v << 1, 2, 3, 4, 5;
    REQUIRE_THROWS_AS(fit_efa(make_table({"a"}, v)), efa_error);
  }
  SECTION("too few complete rows") {
    MatrixXd v(2, 2);
    v << 1, 2, 2, 1;
    REQUIRE_THROWS_WITH(fit_efa(make_table({"a", "b"}, v)), ContainsSubstring("complete"));
  }
  SECTION("constant indicator") {
    MatrixXd v(4, 2);
    v << 1, 3, 1, 4, 1, 5, 1, 6;
    REQUIRE_THROWS_WITH(fit_efa(make_table({"flat", "b"}, v)),
                        ContainsSubstring("zero variance"));
  }
  SECTION("collinear pair is named") {
    MatrixXd v(4, 3);
    for (int i = 0; i < 4; ++i) {
      v(i, 0) = i + 1;
      v(i, 1) = 2.0 * (i + 1) + 1.0;
      v(i, 2) = (i % 2) ? 1.0 : -1.0;
    }
    REQUIRE_THROWS_WITH(fit_efa(make_table({"a", "b", "c"}, v)),
                        ContainsSubstring("'a'") && ContainsSubstring("'b'") &&
                            ContainsSubstring("collinear"));
  }
  SECTION("no factor clears the eigenvalue rule") {
    MatrixXd v(4, 2);
    v << 1, 1, 1, -1, -1, 1, -1, -1;  // exactly uncorrelated columns
    REQUIRE_THROWS_WITH(fit_efa(make_table({"a", "b"}, v)), ContainsSubstring("eigenvalue"));
  }
  SECTION("factor count must stay below item count") {
    MatrixXd v(4, 2);
    v << 1, 1, 2, 3, 3, 2, 4, 5;
    EfaOptions opts;
    opts.n_factors = 2;
    REQUIRE_THROWS_WITH(fit_efa(make_table({"a", "b"}, v), opts),
                        ContainsSubstring("below the indicator count"));
  }
  SECTION("retention threshold must be positive") {
    IndicatorMatrix ind = factor_sample(100, 4);
    EfaOptions opts;
    opts.n_factors = 2;
    EfaResult r = fit_efa(ind, opts);
    REQUIRE_THROWS_AS(apply_retention(r, 0.0), efa_error);
    REQUIRE_THROWS_AS(apply_retention(r, -0.3), efa_error);
  }
  SECTION("impossible retention reports the dead end") {
    IndicatorMatrix ind = factor_sample(100, 4);
    EfaOptions opts;
    opts.n_factors = 2;
    EfaResult r = fit_efa(ind, opts);
    REQUIRE_THROWS_WITH(apply_retention(r, 0.999),
                        ContainsSubstring("no item has exactly one salient loading"));
  }
  SECTION("score table must match the fitted columns") {
    IndicatorMatrix ind = factor_sample(100, 4);
    EfaOptions opts;
    opts.n_factors = 2;
    EfaResult r = fit_efa(ind, opts);
    IndicatorMatrix renamed = ind;
    renamed.names[0] = "other";
    REQUIRE_THROWS_AS(factor_scores(r, renamed), efa_error);
  }
}

TEST_CASE("linear rescaling of an item does not move the solution") {
  IndicatorMatrix ind = factor_sample(800, 61);
  EfaOptions opts;
  opts.n_factors = 2;
  EfaResult base = fit_efa(ind, opts);

  IndicatorMatrix scaled = ind;
  scaled.values.col(2) = (scaled.values.col(2).array() * 12.5 - 40.0).matrix();
  EfaResult moved = fit_efa(scaled, opts);
  REQUIRE((base.loadings - moved.loadings).cwiseAbs().maxCoeff() < 1e-9);
  REQUIRE((base.correlation - moved.correlation).cwiseAbs().maxCoeff() < 1e-12);
}
