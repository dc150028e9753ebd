// Executable verification primitives for the math the pipeline relies on:
// Jensen gaps, mixture moments, the similarity lower bound, and the
// discretization error bound.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <vector>

#include "redmix/anchor.hpp"
#include "redmix/rng.hpp"

namespace redmix {

using ScalarFn = std::function<double(const Eigen::VectorXd&)>;

struct GaussianSpec {
  Eigen::VectorXd mean;
  Eigen::VectorXd diag_variance;    // used when full_covariance is empty
  Eigen::MatrixXd full_covariance;  // optional, symmetric PSD

  Eigen::Index dim() const { return mean.size(); }
  bool is_diagonal() const { return full_covariance.size() == 0; }
  Eigen::MatrixXd covariance() const;
  void validate() const;
};

Eigen::VectorXd sample_gaussian(const GaussianSpec& spec, Prng& rng);

struct JensenEstimate {
  double gap = 0.0;        // MC estimate of E[f(X)] - f(E[X])
  double std_error = 0.0;  // jackknife standard error
  int n_samples = 0;
};

// Monte-Carlo Jensen gap; throws if f is non-finite at any sample.
JensenEstimate jensen_gap_mc(const ScalarFn& f, const GaussianSpec& dist,
                             int n_samples, Prng& rng);

// 0.5 * trace(cov * hessian).
double jensen_gap_second_order(const Eigen::MatrixXd& cov,
                               const Eigen::MatrixXd& hessian);

// alpha*S_t + (1-alpha)*S_c + alpha(1-alpha)(mu_t-mu_c)(mu_t-mu_c)^T.
Eigen::MatrixXd mixture_covariance(const Eigen::VectorXd& mu_t,
                                   const Eigen::MatrixXd& sigma_t,
                                   const Eigen::VectorXd& mu_c,
                                   const Eigen::MatrixXd& sigma_c,
                                   double alpha);

// Central finite differences with the given step; symmetrized.
Eigen::MatrixXd numeric_hessian(const ScalarFn& f, const Eigen::VectorXd& x,
                                double step = 1e-4);

struct SimilarityBoundEntry {
  double alpha = 0.0;
  double mixture_mean = 0.0;
  double mixture_se = 0.0;
  double bound = 0.0;        // min of the two component means
  double witness_sim = 0.0;  // best sample similarity seen at this alpha
  bool witness_found = false;
  bool pass = false;
};

struct SimilarityBoundReport {
  double mean_t = 0.0, se_t = 0.0;
  double mean_c = 0.0, se_c = 0.0;
  std::vector<SimilarityBoundEntry> entries;

  bool all_pass() const;
};

// For each alpha: E_{p_alpha}[sim] >= min(E_{N_t}[sim], E_{N_c}[sim]) minus
// three combined standard errors, where sim is the [-1,1] cosine similarity
// of the soft sample's flattened embedding with the target embedding. The
// same component draws back every grid entry.
SimilarityBoundReport similarity_bound_check(const AnchorPair& anchors,
                                             const EmbeddingTable& table,
                                             const Eigen::VectorXd& target_flat,
                                             const std::vector<double>& alpha_grid,
                                             int n_samples, std::uint64_t seed);

struct DiscretizationEntry {
  double sigma = 0.0;
  double measured = 0.0;  // E[l2-over-positions nearest-embedding distance]
  double std_error = 0.0;
  double bound = 0.0;  // sigma * sqrt(L*d)
  // Same distance with the noise drawn in selection space and mapped
  // through E. Diagnostic only; the bound is not asserted for it.
  double selection_space_measured = 0.0;
  bool pass = false;
};

struct DiscretizationReport {
  Eigen::Index length = 0;
  Eigen::Index dim = 0;
  std::vector<DiscretizationEntry> entries;

  bool all_pass() const;
};

// Perturbs the anchor embedding rows by N(0, sigma^2 I) and measures the
// expected distance to the nearest vocabulary embedding per position,
// accumulated in l2 over positions, against the sigma*sqrt(L*d) bound.
DiscretizationReport discretization_bound_check(
    const Eigen::MatrixXd& anchor_embedding, const EmbeddingTable& table,
    const std::vector<double>& sigma_list, int n_samples, std::uint64_t seed);

struct UnimodalComparison {
  double mixture_gap = 0.0;
  double mixture_se = 0.0;
  double unimodal_gap = 0.0;
  double unimodal_se = 0.0;
  // Variance along v = (m_t - m_c)/||m_t - m_c|| in embedding space.
  double dir_var_unimodal = 0.0;  // moment-matched surrogate
  double dir_var_within = 0.0;    // alpha-weighted within-component
  int n_samples = 0;
};

// Compares the mixture's Jensen gap with that of the Gaussian matching its
// first two moments, in flattened embedding space. Throws "comparison
// undefined" for mu_t == mu_c.
UnimodalComparison unimodal_vs_mixture_gap(const AnchorPair& anchors,
                                           const EmbeddingTable& table,
                                           double alpha, const ScalarFn& f,
                                           int n_samples, std::uint64_t seed);

}  // namespace redmix
