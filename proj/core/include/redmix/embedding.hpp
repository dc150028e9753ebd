// Vocabulary, embedding table, discrete prompts, selection matrices and the
// cosine loss used throughout. Selection rows live over the full vocabulary:
// a one-hot row picks exactly one token, a soft row weights all of them.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "redmix/rng.hpp"

namespace redmix {

struct EmbeddingTable {
  std::vector<std::string> vocab;  // size |V|, unique token strings
  Eigen::MatrixXd matrix;          // |V| x d

  Eigen::Index vocab_size() const { return matrix.rows(); }
  Eigen::Index dim() const { return matrix.cols(); }

  /// Index of a token string, or -1 if absent.
  Eigen::Index find(const std::string& token) const;

  /// Content hash over tokens and embedding bits; stored in anchor files so
  /// a fitted distribution can detect being replayed against the wrong table.
  std::uint64_t checksum() const;

  /// Throws std::invalid_argument on any violated invariant (duplicate
  /// tokens, |V| < 2, non-finite entries, all-zero rows).
  void validate() const;
};

struct TokenSequence {
  std::vector<Eigen::Index> indices;

  Eigen::Index length() const {
    return static_cast<Eigen::Index>(indices.size());
  }
  bool operator==(const TokenSequence&) const = default;
};

struct SelectionMatrix {
  Eigen::MatrixXd rows;  // L x |V|
  bool one_hot = false;

  Eigen::Index length() const { return rows.rows(); }
};

enum class ProjectionMode { kArgmax, kGumbel };

/// Kronecker-delta selection matrix for a discrete prompt.
SelectionMatrix one_hot_selection(const TokenSequence& p,
                                  const EmbeddingTable& table);

/// sel . E, the (possibly soft) prompt embedding sequence, L x d.
Eigen::MatrixXd encode(const SelectionMatrix& sel, const EmbeddingTable& table);

/// Row-major flattening of an L x d embedding sequence into length L*d.
Eigen::VectorXd flatten(const Eigen::MatrixXd& m);

/// 1 - <x,y> / (|x||y|), in [0, 2]. Throws std::domain_error on zero norms.
double cosine_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Gradient of cosine_loss with respect to x.
Eigen::VectorXd cosine_loss_grad(const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y);

/// Per-row argmax (ties break to the lowest index), or argmax of
/// row + tau * Gumbel noise. Noise is drawn row by row, entry by entry.
TokenSequence project_to_tokens(const SelectionMatrix& sel, ProjectionMode mode,
                                Prng& rng, double tau = 1.0);

/// Argmax projection without an RNG.
TokenSequence project_to_tokens(const SelectionMatrix& sel);

// --- file formats -----------------------------------------------------------

/// Text format: header "|V| d", then |V| lines of "token v1 ... vd".
EmbeddingTable load_embedding_table(const std::filesystem::path& path);
void save_embedding_table(const EmbeddingTable& table,
                          const std::filesystem::path& path);

/// One token per line, UTF-8, '#' starts a comment, blanks ignored.
std::unordered_set<std::string> load_blocklist(
    const std::filesystem::path& path);

/// Tokenizes a whitespace-separated prompt file against the table.
/// Unknown tokens are a validation error.
TokenSequence load_prompt(const std::filesystem::path& path,
                          const EmbeddingTable& table);

}  // namespace redmix
