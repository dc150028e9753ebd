// Hot paths: policy sampling, density/score evaluation, one stage-1
// gradient step, and a full oracle query. Fixtures are built once; every
// benchmark body is deterministic apart from its own Prng.
#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include <redmix/anchor.hpp>
#include <redmix/embedding.hpp>
#include <redmix/environment.hpp>
#include <redmix/metrics.hpp>
#include <redmix/policy.hpp>
#include <redmix/rng.hpp>
#include <redmix/toy_corpus.hpp>

namespace {

using namespace redmix;

struct Fixture {
  EmbeddingTable table = make_toy_table(1);
  TokenSequence p_t = default_target_prompt(table);
  std::unordered_set<std::string> blocklist = default_blocklist();
  std::shared_ptr<AnchorPair> pair;
  ToyEnvConfig env;

  Fixture() {
    FitConfig fit;
    fit.steps = 200;  // enough structure for realistic densities
    fit.seed = 1;
    pair = std::make_shared<AnchorPair>(
        fit_anchor_pair(p_t, blocklist, table, fit));
    ToyEnvConfig base;
    base.seed = 1;
    env = calibrate_env(table, p_t, blocklist, base, nullptr);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

void BM_PolicySample(benchmark::State& state) {
  MixturePolicy policy{fx().pair, 0.5};
  Prng rng(11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(sample(policy, rng));
  }
}
BENCHMARK(BM_PolicySample);

void BM_ScoreFunction(benchmark::State& state) {
  MixturePolicy policy{fx().pair, 0.37};
  Prng rng(12);
  const PolicySample s = sample(policy, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(score_function(policy, s));
  }
}
BENCHMARK(BM_ScoreFunction);

void BM_LogMixtureDensity(benchmark::State& state) {
  MixturePolicy policy{fx().pair, 0.37};
  Prng rng(13);
  const PolicySample s = sample(policy, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(log_mixture_density(policy, s));
  }
}
BENCHMARK(BM_LogMixtureDensity);

void BM_FitGradientStep(benchmark::State& state) {
  const auto& f = fx();
  const Eigen::VectorXd anchor =
      flatten(encode(one_hot_selection(f.p_t, f.table), f.table));
  const RelaxedPromptDistribution& d = f.pair->n_t;
  Prng rng(14);
  std::vector<Eigen::MatrixXd> eps;
  for (int b = 0; b < 8; ++b) {
    Eigen::MatrixXd e(d.length(), d.vocab_size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
    eps.push_back(std::move(e));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        batch_gradients(d.mu, d.rho, eps, anchor, f.table));
  }
}
BENCHMARK(BM_FitGradientStep);

void BM_OracleQuery(benchmark::State& state) {
  const auto& f = fx();
  ToyOracle oracle(f.table, f.blocklist, f.env);
  const TokenSequence p_c = derive_clean_prompt(f.p_t, f.blocklist, f.table);
  Prng rng(15);
  for (auto _ : state) {
    benchmark::DoNotOptimize(query(oracle, p_c, 8, rng));
  }
}
BENCHMARK(BM_OracleQuery);

void BM_FixedAlphaEvaluation(benchmark::State& state) {
  const auto& f = fx();
  ToyOracle oracle(f.table, f.blocklist, f.env);
  GridConfig cfg;
  cfg.n_prompts = 50;
  cfg.n_images = 4;
  cfg.seed = 16;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        evaluate_fixed_alpha(*f.pair, oracle, 0.5, cfg));
  }
}
BENCHMARK(BM_FixedAlphaEvaluation);

}  // namespace

BENCHMARK_MAIN();
