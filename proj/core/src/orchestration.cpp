#include "redmix/orchestration.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <stdexcept>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "redmix/analysis.hpp"
#include "redmix/environment.hpp"
#include "redmix/toy_corpus.hpp"

namespace redmix {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kVersion = "0.1.0";

std::string iso_timestamp() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw std::runtime_error("cannot create output directory " + dir.string() +
                             ": " + ec.message());
  }
}

ManifestEntry entry_for(const std::filesystem::path& p) {
  return ManifestEntry{p.string(), file_checksum(p)};
}

ordered_json config_to_json(const RunConfig& cfg) {
  ordered_json j;
  j["embeddings"] = cfg.embeddings.string();
  j["prompt"] = cfg.prompt.string();
  j["blocklist"] = cfg.blocklist.string();
  j["env_config"] = cfg.env_config.string();
  j["out_dir"] = cfg.out_dir.string();
  j["seed"] = cfg.seed;
  j["fit"] = ordered_json{{"steps", cfg.fit.steps},
                          {"learning_rate", cfg.fit.learning_rate},
                          {"batch", cfg.fit.batch},
                          {"sigma_init", cfg.fit.sigma_init},
                          {"mu_noise", cfg.fit.mu_noise}};
  j["optimizer"] = ordered_json{{"eta", cfg.optimizer.eta},
                                {"batch", cfg.optimizer.batch},
                                {"iterations", cfg.optimizer.iterations},
                                {"eps_clamp", cfg.optimizer.eps_clamp},
                                {"alpha_init", cfg.optimizer.alpha_init}};
  j["reward"] = ordered_json{{"entropy_weight", cfg.entropy_weight}};
  j["metrics_n"] = cfg.metrics_n;
  j["tau2"] = cfg.tau2;
  j["grid"] = cfg.grid;
  j["grid_prompts"] = cfg.grid_prompts;
  return j;
}

[[noreturn]] void unknown_key(const std::string& where, const std::string& key) {
  throw std::invalid_argument("unknown config key \"" + where + key + "\"");
}

void parse_fit_block(const ordered_json& j, FitConfig& fit) {
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") {
      fit.steps = value.get<int>();
    } else if (key == "learning_rate") {
      fit.learning_rate = value.get<double>();
    } else if (key == "batch") {
      fit.batch = value.get<int>();
    } else if (key == "sigma_init") {
      fit.sigma_init = value.get<double>();
    } else if (key == "mu_noise") {
      fit.mu_noise = value.get<double>();
    } else if (key == "seed") {
      throw std::invalid_argument(
          "config key \"fit.seed\" is not configurable: module seeds are "
          "derived from the global seed");
    } else {
      unknown_key("fit.", key);
    }
  }
}

void parse_optimizer_block(const ordered_json& j, OptimizerConfig& opt) {
  for (const auto& [key, value] : j.items()) {
    if (key == "eta") {
      opt.eta = value.get<double>();
    } else if (key == "batch") {
      opt.batch = value.get<int>();
    } else if (key == "iterations") {
      opt.iterations = value.get<int>();
    } else if (key == "eps_clamp") {
      opt.eps_clamp = value.get<double>();
    } else if (key == "alpha_init") {
      opt.alpha_init = value.get<double>();
    } else if (key == "seed") {
      throw std::invalid_argument(
          "config key \"optimizer.seed\" is not configurable: module seeds "
          "are derived from the global seed");
    } else {
      unknown_key("optimizer.", key);
    }
  }
}

void parse_reward_block(const ordered_json& j, RunConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "entropy_weight") {
      cfg.entropy_weight = value.get<double>();
    } else {
      unknown_key("reward.", key);
    }
  }
}

// Commands seed every module stream from the one global seed; stream names
// keep them independent.
FitConfig fit_config_for(const RunConfig& cfg) {
  FitConfig fit = cfg.fit;
  fit.seed = cfg.seed;
  return fit;
}

OptimizerConfig optimizer_config_for(const RunConfig& cfg) {
  OptimizerConfig opt = cfg.optimizer;
  opt.seed = cfg.seed;
  return opt;
}

struct AttackInputs {
  std::shared_ptr<AnchorPair> pair;
  EmbeddingTable table;
  std::unordered_set<std::string> blocklist;
  ToyEnvConfig env;
};

AttackInputs load_attack_inputs(const RunConfig& cfg) {
  AttackInputs in;
  in.pair = std::make_shared<AnchorPair>(load_anchor_pair(cfg.out_dir));
  in.table = load_embedding_table(cfg.embeddings);
  if (in.table.checksum() != in.pair->n_t.table_checksum) {
    throw std::runtime_error(
        "embedding table checksum mismatch: the anchors in " +
        cfg.out_dir.string() + " were fitted against a different table than " +
        cfg.embeddings.string());
  }
  in.blocklist = load_blocklist(cfg.blocklist);
  if (cfg.env_config.empty()) {
    throw std::runtime_error(
        "no env_config path configured; run calibrate-env first");
  }
  in.env = load_env_config(cfg.env_config);
  return in;
}

double resolve_entropy_weight(const RunConfig& cfg, const AnchorPair& pair) {
  return cfg.entropy_weight < 0.0 ? default_entropy_weight(pair)
                                  : cfg.entropy_weight;
}

// --- verification ------------------------------------------------------------

// Shared inputs for the suites; the anchor pair is fitted on first use.
struct VerifyContext {
  std::uint64_t seed = 0;
  EmbeddingTable table;
  TokenSequence p_t;
  std::unordered_set<std::string> blocklist;
  Eigen::VectorXd target_flat;
  std::shared_ptr<AnchorPair> pair;

  const AnchorPair& anchors() {
    if (!pair) {
      FitConfig fit;
      fit.seed = seed;
      pair = std::make_shared<AnchorPair>(
          fit_anchor_pair(p_t, blocklist, table, fit));
    }
    return *pair;
  }
};

VerifyContext make_verify_context(std::uint64_t seed) {
  VerifyContext ctx;
  ctx.seed = seed;
  ctx.table = make_toy_table(seed);
  ctx.p_t = default_target_prompt(ctx.table);
  ctx.blocklist = default_blocklist();
  ctx.target_flat = flatten(encode(one_hot_selection(ctx.p_t, ctx.table), ctx.table));
  return ctx;
}

VerifyCheck make_check(std::string name, double measured, double reference,
                       double std_error, bool pass, std::string detail) {
  VerifyCheck c;
  c.name = std::move(name);
  c.measured = measured;
  c.reference = reference;
  c.std_error = std_error;
  c.pass = pass;
  c.detail = std::move(detail);
  return c;
}

VerifySuite jensen_suite(VerifyContext& ctx) {
  VerifySuite suite;
  suite.name = "jensen";

  // A linear function has no curvature: the gap is pure Monte-Carlo noise.
  {
    const Eigen::Index dim = 8;
    GaussianSpec g;
    g.mean = Eigen::VectorXd::LinSpaced(dim, -1.0, 1.0);
    g.diag_variance = Eigen::VectorXd::Constant(dim, 0.25);
    const Eigen::VectorXd c = Eigen::VectorXd::LinSpaced(dim, 0.5, 2.0);
    const ScalarFn f = [c](const Eigen::VectorXd& x) {
      return c.dot(x) + 0.7;
    };
    Prng rng(derive_seed(ctx.seed, "verify-jensen-linear"));
    const JensenEstimate est = jensen_gap_mc(f, g, 20000, rng);
    suite.checks.push_back(make_check(
        "linear_zero_gap", est.gap, 0.0, est.std_error,
        std::abs(est.gap) <= 3.0 * est.std_error + 1e-12,
        "E[f(X)] - f(E[X]) for affine f is exactly zero"));
  }

  // For f(x) = |x|^2 the Hessian is 2I, so the gap equals tr(Sigma) exactly.
  const ScalarFn quad = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  GaussianSpec quad_dist;
  quad_dist.mean = Eigen::VectorXd::LinSpaced(8, -0.5, 1.5);
  quad_dist.diag_variance = Eigen::VectorXd::LinSpaced(8, 0.05, 0.4);
  const double quad_ref = quad_dist.diag_variance.sum();
  {
    Prng rng(derive_seed(ctx.seed, "verify-jensen-quad"));
    const JensenEstimate est = jensen_gap_mc(quad, quad_dist, 100000, rng);
    suite.checks.push_back(make_check(
        "quadratic_exact_gap", est.gap, quad_ref, est.std_error,
        std::abs(est.gap - quad_ref) <= 3.0 * est.std_error,
        "gap of a quadratic equals half the trace of Sigma times the "
        "constant Hessian"));
  }
  {
    const Eigen::MatrixXd h = numeric_hessian(quad, quad_dist.mean);
    const double so = jensen_gap_second_order(quad_dist.covariance(), h);
    suite.checks.push_back(make_check(
        "quadratic_numeric_hessian", so, quad_ref, 0.0,
        std::abs(so - quad_ref) <= 1e-6 * std::max(1.0, std::abs(quad_ref)),
        "finite-difference Hessian reproduces the analytic trace term"));
  }

  // On the cosine loss around the anchor embedding the second-order term
  // explains the gap, and the remainder shrinks with sigma.
  {
    const ScalarFn cosloss = [&ctx](const Eigen::VectorXd& x) {
      return cosine_loss(x, ctx.target_flat);
    };
    const Eigen::MatrixXd h = numeric_hessian(cosloss, ctx.target_flat);
    const auto gap_at = [&](double sigma, std::uint64_t idx) {
      GaussianSpec g;
      g.mean = ctx.target_flat;
      g.diag_variance =
          Eigen::VectorXd::Constant(ctx.target_flat.size(), sigma * sigma);
      Prng rng(derive_seed(ctx.seed, "verify-jensen-cos", idx));
      const JensenEstimate est = jensen_gap_mc(cosloss, g, 200000, rng);
      const double so = jensen_gap_second_order(g.covariance(), h);
      return std::pair<JensenEstimate, double>(est, so);
    };
    const auto [est_full, so_full] = gap_at(0.05, 0);
    suite.checks.push_back(make_check(
        "cosine_second_order", est_full.gap, so_full, est_full.std_error,
        std::abs(est_full.gap - so_full) <=
            std::max(0.1 * std::abs(so_full), 5.0 * est_full.std_error),
        "half trace(Sigma H) explains the cosine-loss gap at sigma=0.05"));

    const auto [est_half, so_half] = gap_at(0.025, 1);
    const double r_full = est_full.gap - so_full;
    const double r_half = est_half.gap - so_half;
    suite.checks.push_back(make_check(
        "cosine_remainder_shrinks", std::abs(r_half), std::abs(r_full), 0.0,
        std::abs(r_half) <= 0.5 * std::abs(r_full) +
                                3.0 * (est_half.std_error + est_full.std_error),
        "second-order remainder at sigma/2 is at most half the remainder at "
        "sigma (up to MC noise)"));
  }

  // The moment-matched unimodal surrogate inflates the variance along the
  // inter-anchor direction, which is what blurs the two semantic modes.
  {
    const AnchorPair& pair = ctx.anchors();
    const Eigen::VectorXd target = ctx.target_flat;
    const ScalarFn sim = [target](const Eigen::VectorXd& x) {
      return 1.0 - cosine_loss(x, target);
    };
    const UnimodalComparison cmp = unimodal_vs_mixture_gap(
        pair, ctx.table, 0.5, sim, 20000,
        derive_seed(ctx.seed, "verify-unimodal"));
    suite.checks.push_back(make_check(
        "unimodal_direction_variance", cmp.dir_var_unimodal,
        cmp.dir_var_within, 0.0, cmp.dir_var_unimodal > cmp.dir_var_within,
        "surrogate variance along mu_t - mu_c exceeds the within-component "
        "variance; jensen gaps: mixture " +
            fmt(cmp.mixture_gap) + " +- " + fmt(cmp.mixture_se) +
            ", surrogate " + fmt(cmp.unimodal_gap) + " +- " +
            fmt(cmp.unimodal_se)));
  }

  return suite;
}

VerifySuite covariance_suite(VerifyContext& ctx) {
  VerifySuite suite;
  suite.name = "covariance";

  // Hand-computed one-dimensional case, exact to rounding.
  {
    Eigen::VectorXd mu_t(1), mu_c(1);
    mu_t << 2.0;
    mu_c << -1.0;
    Eigen::MatrixXd s_t(1, 1), s_c(1, 1);
    s_t << 0.5;
    s_c << 2.0;
    const double expected = 0.3 * 0.5 + 0.7 * 2.0 + 0.3 * 0.7 * 9.0;
    const Eigen::MatrixXd cov = mixture_covariance(mu_t, s_t, mu_c, s_c, 0.3);
    suite.checks.push_back(make_check(
        "hand_mixture_1d", cov(0, 0), expected, 0.0,
        std::abs(cov(0, 0) - expected) <= 1e-12,
        "alpha=0.3, means 2/-1, variances 0.5/2.0"));
  }

  // Degenerate mixing weights return the surviving component exactly.
  {
    Prng rng(derive_seed(ctx.seed, "verify-cov-endpoints"));
    Eigen::VectorXd mu_t(4), mu_c(4);
    Eigen::MatrixXd s_t = Eigen::MatrixXd::Zero(4, 4);
    Eigen::MatrixXd s_c = Eigen::MatrixXd::Zero(4, 4);
    for (int i = 0; i < 4; ++i) {
      mu_t[i] = rng.normal();
      mu_c[i] = rng.normal();
      s_t(i, i) = 0.5 + rng.uniform01();
      s_c(i, i) = 0.5 + rng.uniform01();
    }
    const double at_one =
        (mixture_covariance(mu_t, s_t, mu_c, s_c, 1.0) - s_t).cwiseAbs().maxCoeff();
    const double at_zero =
        (mixture_covariance(mu_t, s_t, mu_c, s_c, 0.0) - s_c).cwiseAbs().maxCoeff();
    suite.checks.push_back(make_check(
        "degenerate_endpoints", std::max(at_one, at_zero), 0.0, 0.0,
        at_one == 0.0 && at_zero == 0.0,
        "alpha in {0,1} collapses to the surviving component covariance"));
  }

  // Empirical mixture covariance from draws matches the formula entrywise.
  {
    const Eigen::Index dim = 8;
    const double alpha = 0.35;
    const int n = 100000;
    Prng rng(derive_seed(ctx.seed, "verify-cov-empirical"));
    Eigen::VectorXd mu_t(dim), mu_c(dim), var_t(dim), var_c(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      mu_t[i] = rng.normal();
      mu_c[i] = rng.normal();
      var_t[i] = 0.3 + rng.uniform01();
      var_c[i] = 0.3 + rng.uniform01();
    }
    Eigen::MatrixXd samples(n, dim);
    for (int k = 0; k < n; ++k) {
      const bool from_t = rng.uniform01() < alpha;
      const Eigen::VectorXd& mu = from_t ? mu_t : mu_c;
      const Eigen::VectorXd& var = from_t ? var_t : var_c;
      for (Eigen::Index i = 0; i < dim; ++i) {
        samples(k, i) = mu[i] + std::sqrt(var[i]) * rng.normal();
      }
    }
    const Eigen::VectorXd mean = samples.colwise().mean();
    const Eigen::MatrixXd centered = samples.rowwise() - mean.transpose();
    const Eigen::MatrixXd expected = mixture_covariance(
        mu_t, var_t.asDiagonal(), mu_c, var_c.asDiagonal(), alpha);
    // Delta-method standard error per entry: the sample covariance is a mean
    // of centered products, so its spread is measurable directly.
    double worst = 0.0;
    for (Eigen::Index i = 0; i < dim; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        const Eigen::ArrayXd prod =
            centered.col(i).array() * centered.col(j).array();
        const double est = prod.mean();
        const double se =
            std::sqrt((prod - est).square().sum() / (n - 1.0)) / std::sqrt(n);
        worst = std::max(worst, std::abs(est - expected(i, j)) / se);
      }
    }
    suite.checks.push_back(make_check(
        "empirical_entrywise", worst, 5.0, 0.0, worst <= 5.0,
        "max entrywise |empirical - formula| in standard errors, 1e5 draws, "
        "8 dimensions, alpha=0.35"));
  }

  // Convexity of norms: the embedded mixture mean never strays further from
  // the target embedding than the farther component mean. Exact, no MC.
  {
    const AnchorPair& pair = ctx.anchors();
    const Eigen::VectorXd m_t =
        flatten(Eigen::MatrixXd(pair.n_t.mu * ctx.table.matrix));
    const Eigen::VectorXd m_c =
        flatten(Eigen::MatrixXd(pair.n_c.mu * ctx.table.matrix));
    const double r_t = (m_t - ctx.target_flat).norm();
    const double r_c = (m_c - ctx.target_flat).norm();
    double worst = -std::numeric_limits<double>::infinity();
    for (const double a : parse_grid_spec("0:1:0.1")) {
      const double r_mix =
          (a * m_t + (1.0 - a) * m_c - ctx.target_flat).norm();
      worst = std::max(worst, r_mix - std::max(r_t, r_c));
    }
    suite.checks.push_back(make_check(
        "mean_stability", worst, 0.0, 0.0, worst <= 1e-12,
        "max over the alpha grid of ||mix mean - target|| minus the farther "
        "component distance"));
  }

  // On the fitted anchors (flattened selection space): the mixture
  // covariance is PSD and its diagonal dominates the within-component part.
  {
    const AnchorPair& pair = ctx.anchors();
    const Eigen::VectorXd mu_t = flatten(pair.n_t.mu);
    const Eigen::VectorXd mu_c = flatten(pair.n_c.mu);
    const Eigen::VectorXd var_t = flatten(pair.n_t.sigma()).array().square();
    const Eigen::VectorXd var_c = flatten(pair.n_c.sigma()).array().square();
    const double alpha = 0.5;
    const Eigen::MatrixXd cov = mixture_covariance(
        mu_t, var_t.asDiagonal(), mu_c, var_c.asDiagonal(), alpha);
    const Eigen::VectorXd within = alpha * var_t + (1.0 - alpha) * var_c;
    const double diag_slack = (cov.diagonal() - within).minCoeff();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const double min_eig = eig.eigenvalues().minCoeff();
    suite.checks.push_back(make_check(
        "fitted_anchor_psd", std::min(min_eig, diag_slack), 0.0, 0.0,
        min_eig >= -1e-10 && diag_slack >= -1e-12,
        "mixture covariance of the fitted pair stays PSD and its diagonal "
        "is at least the within-component variance"));
  }

  return suite;
}

VerifySuite bound_suite(VerifyContext& ctx) {
  VerifySuite suite;
  suite.name = "bound";
  const SimilarityBoundReport rep = similarity_bound_check(
      ctx.anchors(), ctx.table, ctx.target_flat, parse_grid_spec("0:1:0.1"),
      10000, derive_seed(ctx.seed, "verify-bound"));
  for (const auto& e : rep.entries) {
    char name[32];
    std::snprintf(name, sizeof name, "alpha=%.2f", e.alpha);
    suite.checks.push_back(make_check(
        name, e.mixture_mean, e.bound, e.mixture_se, e.pass,
        "mixture similarity vs min component mean (" + fmt(rep.mean_t) +
            " / " + fmt(rep.mean_c) + "); witness " + fmt(e.witness_sim)));
  }
  return suite;
}

VerifySuite discretization_suite(VerifyContext& ctx) {
  VerifySuite suite;
  suite.name = "discretization";
  const Eigen::MatrixXd anchor_emb =
      encode(one_hot_selection(ctx.p_t, ctx.table), ctx.table);
  const DiscretizationReport rep = discretization_bound_check(
      anchor_emb, ctx.table, {0.01, 0.1, 0.5}, 10000,
      derive_seed(ctx.seed, "verify-disc"));
  for (const auto& e : rep.entries) {
    char name[32];
    std::snprintf(name, sizeof name, "sigma=%.2f", e.sigma);
    suite.checks.push_back(make_check(
        name, e.measured, e.bound, e.std_error, e.pass,
        "expected nearest-embedding distance vs sigma*sqrt(L*d); "
        "selection-space diagnostic " +
            fmt(e.selection_space_measured)));
  }
  return suite;
}

void print_suites(const std::vector<VerifySuite>& suites) {
  int failed = 0;
  for (const auto& s : suites) {
    for (const auto& c : s.checks) {
      std::cout << (c.pass ? "  pass  " : "  FAIL  ") << s.name << "/"
                << c.name << "  measured=" << fmt(c.measured)
                << " reference=" << fmt(c.reference);
      if (c.std_error > 0.0) std::cout << " se=" << fmt(c.std_error);
      std::cout << "\n";
      if (!c.pass) ++failed;
    }
  }
  if (failed == 0) {
    std::cout << "verify: all checks passed\n";
  } else {
    std::cout << "verify: " << failed << " check(s) failed\n";
  }
}

}  // namespace

// --- config -------------------------------------------------------------

void RunConfig::validate() const {
  fit.validate();
  optimizer.validate();
  if (metrics_n < 1) throw std::invalid_argument("metrics_n must be >= 1");
  if (!(tau2 >= 0.0 && tau2 <= 1.0)) {
    throw std::invalid_argument("tau2 must lie in [0, 1]");
  }
  if (grid_prompts < 1) {
    throw std::invalid_argument("grid_prompts must be >= 1");
  }
  if (out_dir.empty()) throw std::invalid_argument("out_dir must be set");
  parse_grid_spec(grid);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("config parse error in " + path.string() + ": " +
                             e.what());
  }
  if (!j.is_object()) {
    throw std::runtime_error("config " + path.string() +
                             " must be a JSON object");
  }
  RunConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "embeddings") {
        cfg.embeddings = value.get<std::string>();
      } else if (key == "prompt") {
        cfg.prompt = value.get<std::string>();
      } else if (key == "blocklist") {
        cfg.blocklist = value.get<std::string>();
      } else if (key == "env_config") {
        cfg.env_config = value.get<std::string>();
      } else if (key == "out_dir") {
        cfg.out_dir = value.get<std::string>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else if (key == "fit") {
        parse_fit_block(value, cfg.fit);
      } else if (key == "optimizer") {
        parse_optimizer_block(value, cfg.optimizer);
      } else if (key == "reward") {
        parse_reward_block(value, cfg);
      } else if (key == "metrics_n") {
        cfg.metrics_n = value.get<int>();
      } else if (key == "tau2") {
        cfg.tau2 = value.get<double>();
      } else if (key == "grid") {
        cfg.grid = value.get<std::string>();
      } else if (key == "grid_prompts") {
        cfg.grid_prompts = value.get<int>();
      } else {
        unknown_key("", key);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config type error in " + path.string() + ": " +
                             e.what());
  }
  cfg.validate();
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << config_to_json(cfg).dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::optional<std::uint64_t> redteam_seed_override() {
  const char* v = std::getenv("REDTEAM_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v, &end, 10);
  if (errno != 0 || end == v || *end != '\0' || v[0] == '-') {
    throw std::invalid_argument(
        "REDTEAM_SEED must be an unsigned decimal integer, got \"" +
        std::string(v) + "\"");
  }
  return static_cast<std::uint64_t>(x);
}

std::vector<double> parse_grid_spec(const std::string& spec) {
  const auto bad = [&spec]() {
    return std::invalid_argument("bad grid spec \"" + spec +
                                 "\" (want a:b:step within [0,1], step > 0)");
  };
  const auto to_double = [&bad](const std::string& s) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      throw bad();
    }
    if (pos != s.size() || !std::isfinite(v)) throw bad();
    return v;
  };

  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t colon = spec.find(':', start);
    if (colon == std::string::npos) {
      parts.push_back(spec.substr(start));
      break;
    }
    parts.push_back(spec.substr(start, colon - start));
    start = colon + 1;
  }

  const auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (parts.size() == 1) {
    const double v = to_double(parts[0]);
    if (!in_range(v)) throw bad();
    return {v};
  }
  if (parts.size() != 3) throw bad();
  const double a = to_double(parts[0]);
  const double b = to_double(parts[1]);
  const double step = to_double(parts[2]);
  if (!(step > 0.0) || b < a || !in_range(a) || !in_range(b)) throw bad();

  std::vector<double> out;
  const int n = static_cast<int>(std::floor((b - a) / step + 1e-9));
  for (int k = 0; k <= n; ++k) {
    double x = a + k * step;
    if (std::abs(x - b) < 1e-9) x = b;  // land on the endpoint exactly
    out.push_back(x);
  }
  return out;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
  ordered_json j;
  j["command"] = m.command;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["config"] = m.config_json.empty()
                    ? ordered_json::object()
                    : ordered_json::parse(m.config_json);
  const auto entries = [](const std::vector<ManifestEntry>& es) {
    ordered_json arr = ordered_json::array();
    for (const auto& e : es) {
      arr.push_back(ordered_json{{"path", e.path}, {"checksum", e.checksum}});
    }
    return arr;
  };
  j["inputs"] = entries(m.inputs);
  j["outputs"] = entries(m.outputs);
  j["timestamp"] = m.timestamp;
  j["outcome"] = m.outcome;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// --- verification ------------------------------------------------------------

bool VerifySuite::pass() const {
  return std::all_of(checks.begin(), checks.end(),
                     [](const VerifyCheck& c) { return c.pass; });
}

std::vector<VerifySuite> run_verify_suites(const std::string& suite,
                                           std::uint64_t seed) {
  const bool all = suite == "all";
  if (!all && suite != "jensen" && suite != "covariance" && suite != "bound" &&
      suite != "discretization") {
    throw std::invalid_argument(
        "unknown verify suite \"" + suite +
        "\" (want all, jensen, covariance, bound or discretization)");
  }
  VerifyContext ctx = make_verify_context(seed);
  std::vector<VerifySuite> out;
  if (all || suite == "jensen") out.push_back(jensen_suite(ctx));
  if (all || suite == "covariance") out.push_back(covariance_suite(ctx));
  if (all || suite == "bound") out.push_back(bound_suite(ctx));
  if (all || suite == "discretization") out.push_back(discretization_suite(ctx));
  return out;
}

void write_verify_json(const std::vector<VerifySuite>& suites,
                       const std::filesystem::path& path) {
  ordered_json j;
  bool all_pass = true;
  ordered_json arr = ordered_json::array();
  for (const auto& s : suites) {
    ordered_json sj;
    sj["name"] = s.name;
    sj["pass"] = s.pass();
    ordered_json checks = ordered_json::array();
    for (const auto& c : s.checks) {
      checks.push_back(ordered_json{{"name", c.name},
                                    {"pass", c.pass},
                                    {"measured", c.measured},
                                    {"reference", c.reference},
                                    {"std_error", c.std_error},
                                    {"detail", c.detail}});
    }
    sj["checks"] = std::move(checks);
    arr.push_back(std::move(sj));
    all_pass = all_pass && s.pass();
  }
  j["suites"] = std::move(arr);
  j["all_pass"] = all_pass;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// --- commands ------------------------------------------------------------

int cmd_fit_anchors(const RunConfig& cfg) {
  const EmbeddingTable table = load_embedding_table(cfg.embeddings);
  const auto blocklist = load_blocklist(cfg.blocklist);
  const TokenSequence p_t = load_prompt(cfg.prompt, table);
  const AnchorPair pair = fit_anchor_pair(p_t, blocklist, table, fit_config_for(cfg));
  ensure_dir(cfg.out_dir);
  save_anchor_pair(pair, cfg.out_dir);

  RunManifest m;
  m.command = "fit-anchors";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.inputs = {entry_for(cfg.embeddings), entry_for(cfg.prompt),
              entry_for(cfg.blocklist)};
  m.outputs = {entry_for(cfg.out_dir / "n_t.anchor"),
               entry_for(cfg.out_dir / "n_c.anchor"),
               entry_for(cfg.out_dir / "pair.json")};
  m.timestamp = iso_timestamp();
  m.outcome = "fitted anchors: L=" + std::to_string(pair.n_t.length()) +
              " |V|=" + std::to_string(pair.n_t.vocab_size());
  write_manifest(m, cfg.out_dir / "fit-anchors-manifest.json");
  std::cout << m.outcome << " -> " << cfg.out_dir.string() << "\n";
  return 0;
}

int cmd_attack(const RunConfig& cfg) {
  const AttackInputs in = load_attack_inputs(cfg);
  ToyOracle oracle(in.table, in.blocklist, in.env);

  RewardSpec spec;
  spec.entropy_weight = resolve_entropy_weight(cfg, *in.pair);
  const SimilarityFn sim =
      make_toy_similarity(in.table, in.pair->target_prompt, in.env);
  const Stage2Result result =
      run_stage2(in.pair, oracle, optimizer_config_for(cfg), spec, sim);

  ensure_dir(cfg.out_dir);
  const auto trace_path = cfg.out_dir / "trace.jsonl";
  save_attack_trace(result.trace, trace_path);
  const auto policy_path = cfg.out_dir / "policy.json";
  {
    ordered_json pj;
    pj["alpha"] = result.policy.alpha;
    pj["entropy_weight"] = spec.entropy_weight;
    pj["iterations"] = static_cast<int>(result.trace.iterations.size());
    pj["oracle_queries"] = oracle.query_count();
    pj["oracle_generations"] = oracle.generate_count();
    std::ofstream out(policy_path);
    if (!out) {
      throw std::runtime_error("cannot write " + policy_path.string());
    }
    out << pj.dump(2) << '\n';
  }

  RunManifest m;
  m.command = "attack";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.inputs = {entry_for(cfg.out_dir / "n_t.anchor"),
              entry_for(cfg.out_dir / "n_c.anchor"),
              entry_for(cfg.embeddings), entry_for(cfg.blocklist),
              entry_for(cfg.env_config)};
  m.outputs = {entry_for(trace_path), entry_for(policy_path)};
  m.timestamp = iso_timestamp();
  {
    char buf[96];
    std::snprintf(buf, sizeof buf, "completed: alpha=%.4f after %zu iterations",
                  result.policy.alpha, result.trace.iterations.size());
    m.outcome = buf;
  }
  write_manifest(m, cfg.out_dir / "attack-manifest.json");
  std::cout << m.outcome << "\n";
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::filesystem::path& trace_path) {
  const auto tp = trace_path.empty() ? cfg.out_dir / "trace.jsonl" : trace_path;
  const AttackTrace trace = load_attack_trace(tp);
  const CampaignRecord record = record_from_trace(trace, cfg.metrics_n, cfg.tau2);
  const MetricsReport report = compute_metrics(record, cfg.metrics_n);
  ensure_dir(cfg.out_dir);
  write_metrics_csv(report, cfg.out_dir / "report.csv");
  write_metrics_json(report, cfg.out_dir / "report.json");

  RunManifest m;
  m.command = "report";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.inputs = {entry_for(tp)};
  m.outputs = {entry_for(cfg.out_dir / "report.csv"),
               entry_for(cfg.out_dir / "report.json")};
  m.timestamp = iso_timestamp();
  {
    char buf[128];
    std::snprintf(buf, sizeof buf, "tasr=%.4f iasr_%d=%.4f asr_%d=%.4f",
                  report.tasr, report.n, report.iasr_n, report.n, report.asr_n);
    m.outcome = buf;
  }
  write_manifest(m, cfg.out_dir / "report-manifest.json");
  std::cout << m.outcome << "\n";
  return 0;
}

int cmd_grid_alpha(const RunConfig& cfg) {
  const AttackInputs in = load_attack_inputs(cfg);
  ToyOracle oracle(in.table, in.blocklist, in.env);

  GridConfig gc;
  gc.n_prompts = cfg.grid_prompts;
  gc.n_images = cfg.metrics_n;
  gc.tau2 = cfg.tau2;
  gc.seed = cfg.seed;
  gc.optimizer = optimizer_config_for(cfg);
  gc.reward.entropy_weight = resolve_entropy_weight(cfg, *in.pair);
  const SimilarityFn sim =
      make_toy_similarity(in.table, in.pair->target_prompt, in.env);

  const std::vector<GridRow> rows = grid_alpha_ablation(
      in.pair, oracle, parse_grid_spec(cfg.grid), gc, sim);
  ensure_dir(cfg.out_dir);
  write_grid_csv(rows, cfg.out_dir / "grid.csv");

  RunManifest m;
  m.command = "grid-alpha";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.inputs = {entry_for(cfg.out_dir / "n_t.anchor"),
              entry_for(cfg.out_dir / "n_c.anchor"),
              entry_for(cfg.embeddings), entry_for(cfg.blocklist),
              entry_for(cfg.env_config)};
  m.outputs = {entry_for(cfg.out_dir / "grid.csv")};
  m.timestamp = iso_timestamp();
  m.outcome = std::to_string(rows.size()) + " rows (grid + trained)";
  write_manifest(m, cfg.out_dir / "grid-alpha-manifest.json");
  for (const auto& row : rows) {
    std::cout << row.label << "  tasr=" << fmt(row.metrics.tasr)
              << "  asr_" << cfg.metrics_n << "=" << fmt(row.metrics.asr_n)
              << "  mean_nsfw=" << fmt(row.metrics.mean_nsfw) << "\n";
  }
  return 0;
}

int cmd_verify(const RunConfig& cfg, const std::string& suite) {
  const std::vector<VerifySuite> suites = run_verify_suites(suite, cfg.seed);
  ensure_dir(cfg.out_dir);
  write_verify_json(suites, cfg.out_dir / "verify.json");
  print_suites(suites);

  const bool all_pass = std::all_of(suites.begin(), suites.end(),
                                    [](const VerifySuite& s) { return s.pass(); });
  RunManifest m;
  m.command = "verify";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.outputs = {entry_for(cfg.out_dir / "verify.json")};
  m.timestamp = iso_timestamp();
  m.outcome = all_pass ? "all checks passed" : "verification failed";
  write_manifest(m, cfg.out_dir / "verify-manifest.json");
  return all_pass ? 0 : 1;
}

int cmd_calibrate_env(const RunConfig& cfg) {
  ensure_dir(cfg.out_dir);
  std::filesystem::path emb = cfg.embeddings;
  std::filesystem::path prompt = cfg.prompt;
  std::filesystem::path blocklist_path = cfg.blocklist;
  if (emb.empty()) {
    // Self-contained run: generate the built-in corpus next to the outputs.
    const ToyCorpusPaths paths =
        write_toy_corpus(cfg.out_dir / "corpus", cfg.seed);
    emb = paths.embeddings;
    prompt = paths.prompt;
    blocklist_path = paths.blocklist;
  }
  const EmbeddingTable table = load_embedding_table(emb);
  const auto blocklist = load_blocklist(blocklist_path);
  const TokenSequence p_t = load_prompt(prompt, table);

  ToyEnvConfig base;
  base.seed = cfg.seed;
  base.embeddings_path = emb;
  base.blocklist_path = blocklist_path;
  CalibrationReport report;
  const ToyEnvConfig calibrated =
      calibrate_env(table, p_t, blocklist, base, &report);
  save_env_config(calibrated, cfg.out_dir / "env.json");
  save_calibration_report(report, cfg.out_dir / "calibration.json");

  RunManifest m;
  m.command = "calibrate-env";
  m.version = kVersion;
  m.seed = cfg.seed;
  m.config_json = config_to_json(cfg).dump();
  m.inputs = {entry_for(emb), entry_for(prompt), entry_for(blocklist_path)};
  m.outputs = {entry_for(cfg.out_dir / "env.json"),
               entry_for(cfg.out_dir / "calibration.json")};
  m.timestamp = iso_timestamp();
  {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "%s: target_blocked=%d clean_passes=%d "
                  "mean_score_target=%.3f mean_score_clean=%.3f",
                  report.all_pass() ? "calibrated" : "calibration failed",
                  report.target_blocked ? 1 : 0, report.clean_passes ? 1 : 0,
                  report.mean_score_target, report.mean_score_clean);
    m.outcome = buf;
  }
  write_manifest(m, cfg.out_dir / "calibrate-env-manifest.json");
  std::cout << m.outcome << "\n";
  return report.all_pass() ? 0 : 1;
}

}  // namespace redmix
