// Stage 1: semantically anchored base distributions. Each anchor is a
// diagonal Gaussian over the L x |V| selection space, fitted so that soft
// selections stay close (in cosine) to the embedding of its anchor prompt.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "redmix/embedding.hpp"
#include "redmix/rng.hpp"

namespace redmix {

/// Index 0 is reserved for the pad token used to equalize prompt lengths.
inline constexpr Eigen::Index kPadTokenIndex = 0;

struct RelaxedPromptDistribution {
  Eigen::MatrixXd mu;   // L x |V|
  Eigen::MatrixXd rho;  // L x |V|, sigma = exp(rho)
  Eigen::Index table_dim = 0;  // embedding dimension of the fitted table
  std::uint64_t table_checksum = 0;

  Eigen::Index length() const { return mu.rows(); }
  Eigen::Index vocab_size() const { return mu.cols(); }
  Eigen::MatrixXd sigma() const { return rho.array().exp(); }

  void validate() const;
};

struct AnchorPair {
  RelaxedPromptDistribution n_t;  // harmful anchor
  RelaxedPromptDistribution n_c;  // clean anchor
  TokenSequence target_prompt;
  TokenSequence clean_prompt;
};

struct FitConfig {
  int steps = 2000;
  double learning_rate = 0.05;
  int batch = 8;
  double sigma_init = 0.1;
  double mu_noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Removes every blocklisted token (case-insensitive on the token text),
/// preserving order. Throws std::invalid_argument if nothing remains.
TokenSequence derive_clean_prompt(const TokenSequence& p_t,
                                  const std::unordered_set<std::string>& blocklist,
                                  const EmbeddingTable& table);

/// One draw delta = mu + sigma .* eps, eps standard normal, row-major order.
SelectionMatrix sample_selection(const RelaxedPromptDistribution& dist,
                                 Prng& rng);

/// log N(delta; mu, diag(sigma^2)) summed over all L*|V| coordinates.
double log_density(const RelaxedPromptDistribution& dist,
                   const SelectionMatrix& sel);

/// Monte-Carlo mean of cosine_loss(anchor_embedding, flatten(encode(sample))).
double expected_semantic_loss(const RelaxedPromptDistribution& dist,
                              const EmbeddingTable& table,
                              const Eigen::VectorXd& anchor_embedding,
                              int n_samples, Prng& rng);

struct BatchGradients {
  Eigen::MatrixXd grad_mu;
  Eigen::MatrixXd grad_rho;
  double mean_loss = 0.0;
};

/// Reparameterized gradients of the mean cosine loss for a frozen noise
/// batch. eps_batch holds one L x |V| noise matrix per sample.
BatchGradients batch_gradients(const Eigen::MatrixXd& mu,
                               const Eigen::MatrixXd& rho,
                               const std::vector<Eigen::MatrixXd>& eps_batch,
                               const Eigen::VectorXd& anchor_flat,
                               const EmbeddingTable& table);

/// Fits a relaxed distribution to a prompt by stochastic gradient descent on
/// the reparameterized semantic loss. Asserts that the fitted loss does not
/// exceed the initial loss (both measured with the same evaluation stream).
RelaxedPromptDistribution fit_anchor(const TokenSequence& p,
                                     const EmbeddingTable& table,
                                     const FitConfig& cfg);

/// Fits N_t to p_t and N_c to the derived clean prompt (padded with the pad
/// token to the common length), with seeds cfg.seed and cfg.seed + 1.
AnchorPair fit_anchor_pair(const TokenSequence& p_t,
                           const std::unordered_set<std::string>& blocklist,
                           const EmbeddingTable& table, const FitConfig& cfg);

// --- persistence ------------------------------------------------------------

void save_anchor(const RelaxedPromptDistribution& dist,
                 const std::filesystem::path& path);
RelaxedPromptDistribution load_anchor(const std::filesystem::path& path);

/// Writes n_t.anchor, n_c.anchor and pair.json into dir.
void save_anchor_pair(const AnchorPair& pair, const std::filesystem::path& dir);
AnchorPair load_anchor_pair(const std::filesystem::path& dir);

}  // namespace redmix
