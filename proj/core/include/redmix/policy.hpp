// Stage 2: the convex mixture policy p_alpha = alpha*N_t + (1-alpha)*N_c,
// its score function, the Monte-Carlo policy gradient, and the projected
// ascent loop against a black-box oracle.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "redmix/anchor.hpp"
#include "redmix/environment.hpp"

namespace redmix {

enum class AnchorComponent { kTarget, kClean };

struct MixturePolicy {
  std::shared_ptr<const AnchorPair> anchors;  // frozen during Stage 2
  double alpha = 0.5;
};

struct PolicySample {
  SelectionMatrix selection;  // soft point the densities are evaluated at
  TokenSequence tokens;       // argmax projection of selection
  double log_density_t = 0.0;
  double log_density_c = 0.0;
  AnchorComponent component = AnchorComponent::kClean;
};

struct RewardSpec {
  double entropy_weight = 0.0;  // lambda scaling the log-density term
  std::string definition = "reward = C*S - lambda*log p_alpha";
};

// The scale on which log p_alpha is comparable with the energy term.
double default_entropy_weight(const AnchorPair& anchors);

struct OptimizerConfig {
  double eta = 0.05;
  int batch = 16;
  int iterations = 50;
  double eps_clamp = 0.01;
  double alpha_init = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Draws the component (t with probability alpha), then a soft selection from
// that anchor; records both anchors' log-densities at the drawn point.
PolicySample sample(const MixturePolicy& policy, Prng& rng);

// log(alpha*exp(l_t) + (1-alpha)*exp(l_c)) via max-shift.
double log_mixture_density(const MixturePolicy& policy, const PolicySample& s);

// (N_t(p) - N_c(p)) / (alpha*N_t(p) + (1-alpha)*N_c(p)), via max-shift.
double score_function(const MixturePolicy& policy, const PolicySample& s);

// E = -C*S.
double energy(const OracleFeedback& feedback);

// R = -(E + lambda * log p_alpha) = C*S - lambda * log p_alpha.
double reward(const MixturePolicy& policy, const PolicySample& s,
              const OracleFeedback& feedback, const RewardSpec& spec);

// Mean over the batch of reward_i * score_function(s_i). The reward is
// treated as a constant multiplier (stop-gradient).
double estimate_gradient(
    const MixturePolicy& policy,
    const std::vector<std::pair<PolicySample, double>>& batch);

// alpha' = clamp(alpha + eta * grad, eps_clamp, 1 - eps_clamp).
MixturePolicy update_alpha(const MixturePolicy& policy, double grad,
                           const OptimizerConfig& cfg);

struct TraceSample {
  TokenSequence tokens;
  double l_t = 0.0;
  double l_c = 0.0;
  int bypass = 0;
  double score = 0.0;
  double reward = 0.0;
  BlockedStage stage = BlockedStage::kNone;
  double sim = 0.0;
};

struct TraceIteration {
  int iter = 0;
  double alpha = 0.0;
  std::vector<TraceSample> samples;
  double grad = 0.0;
  double alpha_next = 0.0;
  bool aborted = false;
  std::string error;
};

struct AttackTrace {
  std::vector<TraceIteration> iterations;
};

// One JSON object per iteration, append-only (interrupted runs leave a
// valid prefix).
void save_attack_trace(const AttackTrace& trace,
                       const std::filesystem::path& path);
AttackTrace load_attack_trace(const std::filesystem::path& path);

// Optional per-sample diagnostic recorded in the trace; receives the oracle
// feedback's feature and the sampled tokens. Zero when absent.
using SimilarityFn =
    std::function<double(const Eigen::VectorXd&, const TokenSequence&)>;

struct Stage2Result {
  MixturePolicy policy;
  AttackTrace trace;
};

// T iterations of: draw K samples, query the oracle once per sample,
// compute rewards, estimate the gradient, update alpha. An oracle failure
// aborts the iteration (recorded in the trace) and the run continues.
Stage2Result run_stage2(std::shared_ptr<const AnchorPair> anchors,
                        const TargetOracle& oracle, const OptimizerConfig& cfg,
                        const RewardSpec& spec,
                        const SimilarityFn& similarity = {});

}  // namespace redmix
