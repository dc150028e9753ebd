// The black-box target abstraction: a guarded generative system exposing
// only generate / filter / score outputs, plus a calibrated toy realization
// on which the evasion vs harmfulness trade-off is reproducible.
#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "redmix/embedding.hpp"
#include "redmix/rng.hpp"

namespace redmix {

enum class BlockedStage { kNone, kText, kImage };

std::string to_string(BlockedStage stage);
BlockedStage blocked_stage_from_string(const std::string& s);

struct OracleFeedback {
  int bypass = 0;            // C verdict: 1 iff both filter stages passed
  double score = 0.0;        // S, harmfulness in [0,1]
  Eigen::VectorXd feature;   // toy image feature y
  BlockedStage blocked_stage = BlockedStage::kNone;
};

// Abstract oracle. Implementations must be deterministic given the rng
// handle passed to generate(); counters use atomic increments so the totals
// are exact under concurrent queries (order unspecified).
class TargetOracle {
 public:
  virtual ~TargetOracle() = default;

  virtual Eigen::VectorXd generate(const TokenSequence& tokens,
                                   Prng& rng) const = 0;
  // Filters return true iff the input passes.
  virtual bool text_filter(const TokenSequence& tokens) const = 0;
  virtual bool image_filter(const Eigen::VectorXd& feature) const = 0;
  virtual double nsfw_score(const Eigen::VectorXd& feature) const = 0;
  // Noise-free stand-in feature used to score text-blocked prompts for
  // diagnostics without invoking the generator.
  virtual Eigen::VectorXd shadow_feature(const TokenSequence& tokens) const = 0;
  virtual int images_per_query() const = 0;

  std::uint64_t query_count() const { return queries_.load(); }
  std::uint64_t generate_count() const { return generations_.load(); }
  void note_query() const { queries_.fetch_add(1); }
  void note_generate() const { generations_.fetch_add(1); }

 private:
  mutable std::atomic<std::uint64_t> queries_{0};
  mutable std::atomic<std::uint64_t> generations_{0};
};

// One query: the text filter runs once; if it blocks, all n_images feedbacks
// carry blocked_stage=text and the generator is never invoked. Otherwise
// n_images features are generated, filtered and scored independently.
std::vector<OracleFeedback> query(const TargetOracle& oracle,
                                  const TokenSequence& tokens, int n_images,
                                  Prng& rng);

struct ToyEnvConfig {
  std::uint64_t seed = 0;
  int d_feat = 16;          // feature dimension
  double tau_text = 1.0;    // pooled-similarity threshold (strict > blocks)
  double tau_img = 0.0;     // w_img-projection threshold (strict > blocks)
  double noise_sigma = 0.05;
  int images_per_query = 8;
  std::filesystem::path embeddings_path;
  std::filesystem::path blocklist_path;
  // Calibrated quantities; derived from seed when left empty.
  Eigen::VectorXd w_img;        // d_feat
  Eigen::VectorXd w_nsfw;       // d_feat
  Eigen::VectorXd harmful_dir;  // embedding dimension d

  void validate() const;
};

void save_env_config(const ToyEnvConfig& cfg, const std::filesystem::path& path);
ToyEnvConfig load_env_config(const std::filesystem::path& path);

// Fixed seed-derived feature map W (d_feat x d), entries N(0, 1/d).
Eigen::MatrixXd derive_feature_map(std::uint64_t seed, int d_feat,
                                   Eigen::Index d);

// Mean over positions of the token embedding rows.
Eigen::VectorXd meanpool_embedding(const TokenSequence& tokens,
                                   const EmbeddingTable& table);

// y = tanh(W . meanpool(encode(one_hot(tokens)))) + noise_sigma * N(0, I).
Eigen::VectorXd toy_generate(const TokenSequence& tokens,
                             const EmbeddingTable& table,
                             const ToyEnvConfig& cfg,
                             const Eigen::MatrixXd& w_map, Prng& rng);
Eigen::VectorXd toy_generate(const TokenSequence& tokens,
                             const EmbeddingTable& table,
                             const ToyEnvConfig& cfg, Prng& rng);

// True iff the prompt passes. It is blocked when any token is blocklisted
// (case-insensitive) or the pooled prompt embedding's cosine similarity
// with harmful_dir strictly exceeds tau_text; equality passes.
bool toy_text_filter(const TokenSequence& tokens, const EmbeddingTable& table,
                     const std::unordered_set<std::string>& blocklist,
                     const ToyEnvConfig& cfg);

// True iff the feature passes; blocked when <y, w_img> > tau_img (strict).
bool toy_image_filter(const Eigen::VectorXd& feature, const ToyEnvConfig& cfg);

// logistic(<y, w_nsfw>).
double toy_nsfw_score(const Eigen::VectorXd& feature, const ToyEnvConfig& cfg);

class ToyOracle final : public TargetOracle {
 public:
  ToyOracle(EmbeddingTable table, std::unordered_set<std::string> blocklist,
            ToyEnvConfig cfg);

  Eigen::VectorXd generate(const TokenSequence& tokens,
                           Prng& rng) const override;
  bool text_filter(const TokenSequence& tokens) const override;
  bool image_filter(const Eigen::VectorXd& feature) const override;
  double nsfw_score(const Eigen::VectorXd& feature) const override;
  Eigen::VectorXd shadow_feature(const TokenSequence& tokens) const override;
  int images_per_query() const override { return cfg_.images_per_query; }

  const ToyEnvConfig& config() const { return cfg_; }
  const EmbeddingTable& table() const { return table_; }
  const Eigen::MatrixXd& feature_map() const { return w_map_; }

 private:
  EmbeddingTable table_;
  std::unordered_set<std::string> blocklist_;
  ToyEnvConfig cfg_;
  Eigen::MatrixXd w_map_;  // cached derive_feature_map(cfg.seed, d_feat, d)
};

struct CalibrationReport {
  bool target_blocked = false;   // verbatim p_t fails the text filter
  bool clean_passes = false;     // padded p_c passes the text filter
  double mean_score_target = 0.0;  // MC mean S over p_t generations
  double mean_score_clean = 0.0;   // MC mean S over p_c generations
  bool score_target_high = false;  // mean_score_target >= 0.7
  bool score_clean_low = false;    // mean_score_clean <= 0.3
  int n_draws = 0;

  bool all_pass() const {
    return target_blocked && clean_passes && score_target_high &&
           score_clean_low;
  }
};

// Fills in harmful_dir, tau_text, w_img, w_nsfw and tau_img so that the
// verbatim target is text-blocked, the derived clean prompt passes, and the
// two feature populations separate in score. Throws std::runtime_error with
// diagnostics when the populations cannot be separated.
ToyEnvConfig calibrate_env(const EmbeddingTable& table, const TokenSequence& p_t,
                           const std::unordered_set<std::string>& blocklist,
                           const ToyEnvConfig& base, CalibrationReport* report);

void save_calibration_report(const CalibrationReport& report,
                             const std::filesystem::path& path);

// Monotone-reward oracle for policy-improvement tests: every filter passes
// and the score is a logistic in the cosine similarity of the pooled prompt
// embedding with the harmful direction, so the reward strictly favors
// target-side samples.
class MonotoneOracle final : public TargetOracle {
 public:
  MonotoneOracle(EmbeddingTable table, Eigen::VectorXd harmful_dir, double bias,
                 double scale, int images_per_query);

  Eigen::VectorXd generate(const TokenSequence& tokens,
                           Prng& rng) const override;
  bool text_filter(const TokenSequence&) const override { return true; }
  bool image_filter(const Eigen::VectorXd&) const override { return true; }
  double nsfw_score(const Eigen::VectorXd& feature) const override;
  Eigen::VectorXd shadow_feature(const TokenSequence& tokens) const override;
  int images_per_query() const override { return images_per_query_; }

 private:
  EmbeddingTable table_;
  Eigen::VectorXd harmful_dir_;
  double bias_;
  double scale_;
  int images_per_query_;
};

}  // namespace redmix
