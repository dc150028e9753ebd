#include <redmix/analysis.hpp>

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include <redmix/embedding.hpp>
#include <redmix/rng.hpp>
#include <redmix/toy_corpus.hpp>

using namespace redmix;

namespace {

EmbeddingTable tiny_table() {
  EmbeddingTable t;
  t.vocab = {"pad", "u", "v"};
  t.matrix.resize(3, 2);
  t.matrix << 0.3, 0.3,
              1.0, 0.1,
              -0.2, 1.0;
  return t;
}

AnchorPair synthetic_pair(double separation, double sigma) {
  AnchorPair pair;
  auto fill = [&](double shift, std::uint64_t seed) {
    RelaxedPromptDistribution d;
    d.mu.resize(2, 3);
    d.rho = Eigen::MatrixXd::Constant(2, 3, std::log(sigma));
    Prng rng(seed);
    for (Eigen::Index i = 0; i < d.mu.size(); ++i)
      d.mu.data()[i] = shift + 0.3 * rng.normal();
    return d;
  };
  pair.n_t = fill(separation, 501);
  pair.n_c = fill(-separation, 502);
  pair.target_prompt = TokenSequence{{1, 2}};
  pair.clean_prompt = TokenSequence{{1, 0}};
  return pair;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("gaussian spec validation and covariance assembly") {
  GaussianSpec spec;
  spec.mean = Eigen::VectorXd::Zero(3);
  spec.diag_variance = Eigen::VectorXd::Constant(3, 0.5);
  spec.validate();
  CHECK((spec.covariance() -
         0.5 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);

  GaussianSpec negative = spec;
  negative.diag_variance(1) = -0.1;
  CHECK_THROWS_AS(negative.validate(), std::invalid_argument);

  GaussianSpec mismatch = spec;
  mismatch.diag_variance = Eigen::VectorXd::Ones(2);
  CHECK_THROWS_AS(mismatch.validate(), std::invalid_argument);

  GaussianSpec skew = spec;
  skew.full_covariance = Eigen::MatrixXd::Identity(3, 3);
  skew.full_covariance(0, 1) = 0.3;  // asymmetric
  CHECK_THROWS_AS(skew.validate(), std::invalid_argument);

  GaussianSpec empty;
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

TEST_CASE("sample_gaussian reproduces diagonal and full-covariance moments") {
  GaussianSpec diag;
  diag.mean = Eigen::VectorXd(2);
  diag.mean << 1.0, -2.0;
  diag.diag_variance = Eigen::VectorXd(2);
  diag.diag_variance << 0.25, 1.0;

  Prng rng(60);
  const int n = 40000;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  Eigen::Vector2d sum2 = Eigen::Vector2d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = sample_gaussian(diag, rng);
    sum += x;
    sum2 += x.cwiseProduct(x);
  }
  for (int j = 0; j < 2; ++j) {
    const double m = sum(j) / n;
    const double var = sum2(j) / n - m * m;
    CHECK(std::abs(m - diag.mean(j)) <
          4.0 * std::sqrt(diag.diag_variance(j) / n));
    CHECK(var == doctest::Approx(diag.diag_variance(j)).epsilon(0.05));
  }

  GaussianSpec full;
  full.mean = Eigen::VectorXd::Zero(2);
  full.full_covariance.resize(2, 2);
  full.full_covariance << 1.0, 0.6,
                          0.6, 1.0;
  double cross = 0.0;
  Prng rng2(61);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = sample_gaussian(full, rng2);
    cross += x(0) * x(1);
  }
  CHECK(cross / n == doctest::Approx(0.6).epsilon(0.06));
}

TEST_CASE("jensen gap vanishes for affine functions") {
  GaussianSpec spec;
  spec.mean = Eigen::VectorXd::LinSpaced(6, -1.0, 1.0);
  spec.diag_variance = Eigen::VectorXd::Constant(6, 0.4);
  const ScalarFn affine = [](const Eigen::VectorXd& x) {
    return 3.0 * x.sum() - 2.5;
  };
  Prng rng(70);
  const JensenEstimate est = jensen_gap_mc(affine, spec, 20000, rng);
  CHECK(std::abs(est.gap) <= 3.0 * est.std_error + 1e-12);
  CHECK(est.n_samples == 20000);
}

TEST_CASE("jensen gap of the squared norm equals the total variance") {
  const int dim = 4;
  const double var = 0.09;
  GaussianSpec spec;
  spec.mean = Eigen::VectorXd::Constant(dim, 0.7);
  spec.diag_variance = Eigen::VectorXd::Constant(dim, var);
  const ScalarFn sqnorm = [](const Eigen::VectorXd& x) {
    return x.squaredNorm();
  };
  Prng rng(71);
  const JensenEstimate est = jensen_gap_mc(sqnorm, spec, 100000, rng);
  CHECK(std::abs(est.gap - dim * var) <= 4.0 * est.std_error);
}

TEST_CASE("jensen gap of a point mass is exactly zero") {
  GaussianSpec spec;
  spec.mean = Eigen::VectorXd::Constant(4, 1.3);
  spec.diag_variance = Eigen::VectorXd::Zero(4);
  const ScalarFn f = [](const Eigen::VectorXd& x) { return std::cos(x.sum()); };
  Prng rng(72);
  const JensenEstimate est = jensen_gap_mc(f, spec, 1000000, rng);
  CHECK(est.gap == 0.0);
  CHECK(est.std_error == 0.0);
}

TEST_CASE("jensen gap rejects tiny samples and non-finite functions") {
  GaussianSpec spec;
  spec.mean = Eigen::VectorXd::Zero(2);
  spec.diag_variance = Eigen::VectorXd::Ones(2);
  Prng rng(73);
  const ScalarFn ok = [](const Eigen::VectorXd& x) { return x.sum(); };
  CHECK_THROWS_AS(jensen_gap_mc(ok, spec, 99, rng), std::invalid_argument);

  const ScalarFn blows_up = [](const Eigen::VectorXd& x) {
    return 1.0 / (x(0) - x(0));  // NaN everywhere
  };
  CHECK_THROWS_WITH_AS(jensen_gap_mc(blows_up, spec, 100, rng),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("second-order gap is half the covariance-hessian trace") {
  const int n = 5;
  const double var = 0.2;
  const Eigen::MatrixXd cov = var * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd hess = 2.0 * Eigen::MatrixXd::Identity(n, n);
  CHECK(jensen_gap_second_order(cov, hess) ==
        doctest::Approx(n * var).epsilon(1e-12));

  CHECK(jensen_gap_second_order(cov, Eigen::MatrixXd::Zero(n, n)) == 0.0);

  // Random pair against a hand trace computation.
  Prng rng(80);
  Eigen::MatrixXd a(3, 3), b(3, 3);
  for (Eigen::Index i = 0; i < 9; ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal();
  }
  const Eigen::MatrixXd spd_cov = a * a.transpose();
  const Eigen::MatrixXd sym_h = 0.5 * (b + b.transpose());
  double manual = 0.0;
  const Eigen::MatrixXd prod = spd_cov * sym_h;
  for (int i = 0; i < 3; ++i) manual += prod(i, i);
  CHECK(jensen_gap_second_order(spd_cov, sym_h) ==
        doctest::Approx(0.5 * manual).epsilon(1e-12));
}

TEST_CASE("numeric_hessian recovers quadratic curvature") {
  Eigen::MatrixXd a(3, 3);
  a << 2.0, 0.3, -0.1,
       0.3, 1.0, 0.4,
      -0.1, 0.4, 1.5;
  const ScalarFn quad = [&a](const Eigen::VectorXd& x) {
    return x.dot(a * x);
  };
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(3, 0.2);
  const Eigen::MatrixXd h = numeric_hessian(quad, x0, 1e-4);
  CHECK((h - 2.0 * a).cwiseAbs().maxCoeff() < 1e-5);

  const ScalarFn cross = [](const Eigen::VectorXd& x) { return x(0) * x(1); };
  const Eigen::MatrixXd hc =
      numeric_hessian(cross, Eigen::VectorXd::Zero(2), 1e-4);
  CHECK(hc(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(hc(1, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(hc(0, 0)) < 1e-6);
}

TEST_CASE("mixture covariance hand values") {
  Eigen::VectorXd mu_t(1), mu_c(1);
  mu_t << 2.0;
  mu_c << -1.0;
  Eigen::MatrixXd s_t(1, 1), s_c(1, 1);
  s_t << 0.5;
  s_c << 2.0;
  // 0.3*0.5 + 0.7*2.0 + 0.3*0.7*9 = 3.44
  const Eigen::MatrixXd m = mixture_covariance(mu_t, s_t, mu_c, s_c, 0.3);
  CHECK(m(0, 0) == doctest::Approx(3.44).epsilon(1e-12));

  // Endpoints collapse to the surviving component exactly.
  CHECK(mixture_covariance(mu_t, s_t, mu_c, s_c, 0.0)(0, 0) == 2.0);
  CHECK(mixture_covariance(mu_t, s_t, mu_c, s_c, 1.0)(0, 0) == 0.5);

  // Equal means: the separation term vanishes, leaving the convex blend.
  const Eigen::MatrixXd blend =
      mixture_covariance(mu_t, s_t, mu_t, s_c, 0.25);
  CHECK(blend(0, 0) == doctest::Approx(0.25 * 0.5 + 0.75 * 2.0).epsilon(1e-15));

  Eigen::VectorXd mu_bad(2);
  mu_bad << 0, 0;
  CHECK_THROWS_AS(mixture_covariance(mu_t, s_t, mu_bad, s_c, 0.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(mixture_covariance(mu_t, s_t, mu_c, s_c, 1.5),
                  std::invalid_argument);
}

TEST_CASE("two-point mixture variance matches a direct simulation") {
  // alpha = 0.5, means +-1, zero component variance: the formula gives 1.
  Eigen::VectorXd mu_t(1), mu_c(1);
  mu_t << 1.0;
  mu_c << -1.0;
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1, 1);
  const double formula = mixture_covariance(mu_t, zero, mu_c, zero, 0.5)(0, 0);
  CHECK(formula == doctest::Approx(1.0).epsilon(1e-15));

  Prng rng(81);
  const int n = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform01() < 0.5 ? 1.0 : -1.0;
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  // se(mean) = 1/sqrt(n); the variance estimate is 1 - mean^2.
  CHECK(std::abs(var - formula) < 4.0 / std::sqrt(double(n)));
}

TEST_CASE("similarity bound holds on a fitted toy pair") {
  const EmbeddingTable table = make_toy_table(40);
  FitConfig fit;
  fit.steps = 300;
  fit.seed = 40;
  const AnchorPair pair = fit_anchor_pair(
      default_target_prompt(table), default_blocklist(), table, fit);
  const Eigen::VectorXd target_flat = flatten(
      encode(one_hot_selection(pair.target_prompt, table), table));

  const SimilarityBoundReport rep = similarity_bound_check(
      pair, table, target_flat, {0.0, 0.25, 0.5, 0.75, 1.0}, 2000, 11);
  CHECK(rep.all_pass());
  REQUIRE(rep.entries.size() == 5);
  // Shared component draws make the endpoints exact.
  CHECK(rep.entries.front().mixture_mean == rep.mean_c);
  CHECK(rep.entries.back().mixture_mean == rep.mean_t);
  for (const auto& e : rep.entries) {
    CHECK(e.pass);
    CHECK(e.bound <= std::max(rep.mean_t, rep.mean_c) + 1e-12);
    CHECK(e.witness_found);
    CHECK(e.witness_sim >= -1.0);
    CHECK(e.witness_sim <= 1.0);
  }
}

TEST_CASE("similarity bound degenerates gracefully for identical anchors") {
  const EmbeddingTable table = tiny_table();
  AnchorPair pair = synthetic_pair(0.4, 0.2);
  pair.n_c = pair.n_t;
  const Eigen::VectorXd target_flat = flatten(
      encode(one_hot_selection(TokenSequence{{1, 2}}, table), table));
  const SimilarityBoundReport rep = similarity_bound_check(
      pair, table, target_flat, {0.0, 0.5, 1.0}, 4000, 12);
  CHECK(rep.all_pass());
  // Same distribution on both sides: the component means agree within MC noise.
  CHECK(std::abs(rep.mean_t - rep.mean_c) <=
        3.0 * (rep.se_t + rep.se_c) + 1e-12);
}

TEST_CASE("discretization error stays under sigma sqrt(L d)") {
  const EmbeddingTable table = make_toy_table(41);
  const TokenSequence p = default_target_prompt(table);
  const Eigen::MatrixXd anchor_emb = encode(one_hot_selection(p, table), table);

  const DiscretizationReport rep = discretization_bound_check(
      anchor_emb, table, {0.0, 0.1}, 2000, 13);
  REQUIRE(rep.entries.size() == 2);
  CHECK(rep.length == p.length());
  CHECK(rep.dim == table.dim());

  // sigma = 0: anchor rows coincide with vocabulary rows, distance 0.
  CHECK(rep.entries[0].measured == 0.0);
  CHECK(rep.entries[0].bound == 0.0);
  CHECK(rep.entries[0].pass);

  const double expected_bound =
      0.1 * std::sqrt(double(p.length()) * double(table.dim()));
  CHECK(rep.entries[1].bound == doctest::Approx(expected_bound).epsilon(1e-12));
  CHECK(rep.entries[1].measured <= rep.entries[1].bound);
  CHECK(rep.entries[1].measured > 0.0);
  CHECK(rep.entries[1].selection_space_measured >= 0.0);
  CHECK(rep.all_pass());
}

TEST_CASE("unimodal comparison rejects coincident means") {
  const EmbeddingTable table = tiny_table();
  AnchorPair pair = synthetic_pair(0.5, 0.3);
  pair.n_c = pair.n_t;
  const ScalarFn f = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  CHECK_THROWS_WITH_AS(unimodal_vs_mixture_gap(pair, table, 0.5, f, 1000, 14),
                       doctest::Contains("comparison undefined"),
                       std::invalid_argument);
}

TEST_CASE("unimodal and mixture gaps agree for affine and quadratic f") {
  const EmbeddingTable table = tiny_table();
  const AnchorPair pair = synthetic_pair(0.9, 0.25);

  // Affine: both gaps are zero in expectation.
  const ScalarFn affine = [](const Eigen::VectorXd& x) {
    return 2.0 * x.sum() + 1.0;
  };
  const UnimodalComparison aff =
      unimodal_vs_mixture_gap(pair, table, 0.5, affine, 20000, 15);
  CHECK(std::abs(aff.mixture_gap) <= 3.0 * aff.mixture_se + 1e-12);
  CHECK(std::abs(aff.unimodal_gap) <= 3.0 * aff.unimodal_se + 1e-12);

  // Quadratic: the gap is trace(cov) for any distribution, and the
  // moment-matched surrogate shares the mixture's covariance.
  const ScalarFn quad = [](const Eigen::VectorXd& x) {
    return x.squaredNorm();
  };
  const UnimodalComparison q =
      unimodal_vs_mixture_gap(pair, table, 0.35, quad, 40000, 16);
  CHECK(std::abs(q.mixture_gap - q.unimodal_gap) <=
        4.0 * (q.mixture_se + q.unimodal_se));
  // Separated means put more direction variance in the surrogate than
  // within either component.
  CHECK(q.dir_var_unimodal > q.dir_var_within);
}

}  // TEST_SUITE
