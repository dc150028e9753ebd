#include "redmix/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace redmix {

namespace {

void check_policy(const MixturePolicy& policy) {
  if (!policy.anchors) {
    throw std::invalid_argument("mixture policy: no anchors");
  }
  if (!(policy.alpha >= 0.0 && policy.alpha <= 1.0)) {
    throw std::invalid_argument("mixture policy: alpha outside [0,1]");
  }
}

}  // namespace

double default_entropy_weight(const AnchorPair& anchors) {
  return 1.0 / static_cast<double>(anchors.n_t.length() *
                                   anchors.n_t.vocab_size());
}

void OptimizerConfig::validate() const {
  if (!(eta > 0)) throw std::invalid_argument("optimizer: eta must be > 0");
  if (batch < 1) throw std::invalid_argument("optimizer: batch must be >= 1");
  if (iterations < 0) {
    throw std::invalid_argument("optimizer: iterations must be >= 0");
  }
  if (!(eps_clamp > 0 && eps_clamp < 0.5)) {
    throw std::invalid_argument("optimizer: eps_clamp must be in (0, 0.5)");
  }
  if (!std::isfinite(alpha_init)) {
    throw std::invalid_argument("optimizer: alpha_init must be finite");
  }
}

PolicySample sample(const MixturePolicy& policy, Prng& rng) {
  check_policy(policy);
  PolicySample s;
  s.component = rng.uniform01() < policy.alpha ? AnchorComponent::kTarget
                                               : AnchorComponent::kClean;
  const RelaxedPromptDistribution& src = s.component == AnchorComponent::kTarget
                                             ? policy.anchors->n_t
                                             : policy.anchors->n_c;
  s.selection = sample_selection(src, rng);
  s.log_density_t = log_density(policy.anchors->n_t, s.selection);
  s.log_density_c = log_density(policy.anchors->n_c, s.selection);
  if (!std::isfinite(s.log_density_t) || !std::isfinite(s.log_density_c)) {
    throw std::runtime_error("policy sample: non-finite log density");
  }
  s.tokens = project_to_tokens(s.selection);
  return s;
}

double log_mixture_density(const MixturePolicy& policy,
                           const PolicySample& s) {
  check_policy(policy);
  if (!std::isfinite(s.log_density_t) || !std::isfinite(s.log_density_c)) {
    throw std::invalid_argument("log_mixture_density: non-finite component");
  }
  // Degenerate weights fall back to the surviving component exactly.
  if (policy.alpha == 0.0) return s.log_density_c;
  if (policy.alpha == 1.0) return s.log_density_t;
  const double a = std::log(policy.alpha) + s.log_density_t;
  const double b = std::log1p(-policy.alpha) + s.log_density_c;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double score_function(const MixturePolicy& policy, const PolicySample& s) {
  check_policy(policy);
  if (!std::isfinite(s.log_density_t) || !std::isfinite(s.log_density_c)) {
    throw std::invalid_argument("score_function: non-finite component");
  }
  const double m = std::max(s.log_density_t, s.log_density_c);
  const double et = std::exp(s.log_density_t - m);
  const double ec = std::exp(s.log_density_c - m);
  const double denom = policy.alpha * et + (1.0 - policy.alpha) * ec;
  const double value = (et - ec) / denom;
  if (!std::isfinite(value)) {
    throw std::runtime_error("score_function: non-finite value");
  }
  return value;
}

double energy(const OracleFeedback& feedback) {
  if (!(feedback.score >= 0.0 && feedback.score <= 1.0)) {
    throw std::invalid_argument("energy: score outside [0,1]");
  }
  if (feedback.bypass != 0 && feedback.bypass != 1) {
    throw std::invalid_argument("energy: bypass must be 0 or 1");
  }
  return -static_cast<double>(feedback.bypass) * feedback.score;
}

double reward(const MixturePolicy& policy, const PolicySample& s,
              const OracleFeedback& feedback, const RewardSpec& spec) {
  if (spec.entropy_weight < 0) {
    throw std::invalid_argument("reward: entropy weight must be >= 0");
  }
  return -(energy(feedback) +
           spec.entropy_weight * log_mixture_density(policy, s));
}

double estimate_gradient(
    const MixturePolicy& policy,
    const std::vector<std::pair<PolicySample, double>>& batch) {
  if (batch.empty()) {
    throw std::invalid_argument("estimate_gradient: empty batch");
  }
  double total = 0.0;
  for (const auto& [s, r] : batch) {
    total += r * score_function(policy, s);
  }
  return total / static_cast<double>(batch.size());
}

MixturePolicy update_alpha(const MixturePolicy& policy, double grad,
                           const OptimizerConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(grad)) {
    throw std::invalid_argument("update_alpha: non-finite gradient");
  }
  MixturePolicy next = policy;
  next.alpha = std::clamp(policy.alpha + cfg.eta * grad, cfg.eps_clamp,
                          1.0 - cfg.eps_clamp);
  return next;
}

void save_attack_trace(const AttackTrace& trace,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write trace: " + path.string());
  }
  for (const auto& it : trace.iterations) {
    nlohmann::ordered_json j;
    j["iter"] = it.iter;
    j["alpha"] = it.alpha;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& s : it.samples) {
      nlohmann::ordered_json js;
      js["tokens"] = s.tokens.indices;
      js["l_t"] = s.l_t;
      js["l_c"] = s.l_c;
      js["bypass"] = s.bypass;
      js["score"] = s.score;
      js["reward"] = s.reward;
      js["stage"] = to_string(s.stage);
      js["sim"] = s.sim;
      samples.push_back(std::move(js));
    }
    j["samples"] = std::move(samples);
    j["grad"] = it.grad;
    j["alpha_next"] = it.alpha_next;
    if (it.aborted) {
      j["aborted"] = true;
      j["error"] = it.error;
    }
    out << j.dump() << '\n';
  }
}

AttackTrace load_attack_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open trace: " + path.string());
  }
  AttackTrace trace;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      TraceIteration it;
      it.iter = j.at("iter").get<int>();
      it.alpha = j.at("alpha").get<double>();
      for (const auto& js : j.at("samples")) {
        TraceSample s;
        s.tokens.indices = js.at("tokens").get<std::vector<Eigen::Index>>();
        s.l_t = js.at("l_t").get<double>();
        s.l_c = js.at("l_c").get<double>();
        s.bypass = js.at("bypass").get<int>();
        s.score = js.at("score").get<double>();
        s.reward = js.at("reward").get<double>();
        s.stage = blocked_stage_from_string(js.at("stage").get<std::string>());
        s.sim = js.at("sim").get<double>();
        it.samples.push_back(std::move(s));
      }
      it.grad = j.at("grad").get<double>();
      it.alpha_next = j.at("alpha_next").get<double>();
      it.aborted = j.value("aborted", false);
      it.error = j.value("error", std::string{});
      trace.iterations.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("trace " + path.string() + " line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

Stage2Result run_stage2(std::shared_ptr<const AnchorPair> anchors,
                        const TargetOracle& oracle, const OptimizerConfig& cfg,
                        const RewardSpec& spec,
                        const SimilarityFn& similarity) {
  cfg.validate();
  if (!anchors) throw std::invalid_argument("run_stage2: no anchors");

  Stage2Result result;
  result.policy.anchors = std::move(anchors);
  result.policy.alpha =
      std::clamp(cfg.alpha_init, cfg.eps_clamp, 1.0 - cfg.eps_clamp);

  for (int it = 0; it < cfg.iterations; ++it) {
    TraceIteration rec;
    rec.iter = it;
    rec.alpha = result.policy.alpha;
    rec.alpha_next = result.policy.alpha;
    Prng iter_rng(derive_seed(cfg.seed, "stage2-iter",
                              static_cast<std::uint64_t>(it)));
    try {
      std::vector<std::pair<PolicySample, double>> batch;
      batch.reserve(static_cast<std::size_t>(cfg.batch));
      for (int k = 0; k < cfg.batch; ++k) {
        PolicySample s = sample(result.policy, iter_rng);
        Prng img_rng(derive_seed(
            cfg.seed, "stage2-img",
            static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(cfg.batch) +
                static_cast<std::uint64_t>(k)));
        const std::vector<OracleFeedback> fbs =
            query(oracle, s.tokens, 1, img_rng);
        const OracleFeedback& fb = fbs.front();
        const double r = reward(result.policy, s, fb, spec);
        TraceSample ts;
        ts.tokens = s.tokens;
        ts.l_t = s.log_density_t;
        ts.l_c = s.log_density_c;
        ts.bypass = fb.bypass;
        ts.score = fb.score;
        ts.reward = r;
        ts.stage = fb.blocked_stage;
        ts.sim = similarity ? similarity(fb.feature, s.tokens) : 0.0;
        rec.samples.push_back(std::move(ts));
        batch.emplace_back(std::move(s), r);
      }
      rec.grad = estimate_gradient(result.policy, batch);
      result.policy = update_alpha(result.policy, rec.grad, cfg);
      rec.alpha_next = result.policy.alpha;
    } catch (const std::exception& e) {
      rec.aborted = true;
      rec.error = e.what();
      rec.samples.clear();
      rec.grad = 0.0;
      rec.alpha_next = result.policy.alpha;
    }
    result.trace.iterations.push_back(std::move(rec));
  }
  return result;
}

}  // namespace redmix
