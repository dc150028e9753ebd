#include "redmix/analysis.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace redmix {

namespace {

// Jackknife standard error of the sample mean.
double jackknife_se(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  double sum = 0.0;
  for (const double v : values) sum += v;
  // Leave-one-out means and their spread.
  const double nn = static_cast<double>(n);
  double loo_mean = 0.0;
  std::vector<double> loo(n);
  for (std::size_t i = 0; i < n; ++i) {
    loo[i] = (sum - values[i]) / (nn - 1.0);
    loo_mean += loo[i];
  }
  loo_mean /= nn;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss += (loo[i] - loo_mean) * (loo[i] - loo_mean);
  }
  return std::sqrt((nn - 1.0) / nn * ss);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string point_preview(const Eigen::VectorXd& x) {
  std::ostringstream os;
  os << '[';
  const Eigen::Index k = std::min<Eigen::Index>(x.size(), 4);
  for (Eigen::Index i = 0; i < k; ++i) {
    if (i) os << ", ";
    os << x(i);
  }
  if (x.size() > k) os << ", ...";
  os << ']';
  return os.str();
}

// Cosine similarity of the flattened soft-sample embedding with the target.
double soft_similarity(const SelectionMatrix& sel, const EmbeddingTable& table,
                       const Eigen::VectorXd& target_flat) {
  const Eigen::VectorXd x = flatten(encode(sel, table));
  return 1.0 - cosine_loss(target_flat, x);
}

}  // namespace

Eigen::MatrixXd GaussianSpec::covariance() const {
  validate();
  if (is_diagonal()) {
    return diag_variance.asDiagonal();
  }
  return full_covariance;
}

void GaussianSpec::validate() const {
  if (mean.size() < 1) {
    throw std::invalid_argument("gaussian spec: empty mean");
  }
  if (is_diagonal()) {
    if (diag_variance.size() != mean.size()) {
      throw std::invalid_argument("gaussian spec: variance size mismatch");
    }
    if ((diag_variance.array() < 0).any()) {
      throw std::invalid_argument("gaussian spec: negative variance");
    }
  } else {
    if (full_covariance.rows() != mean.size() ||
        full_covariance.cols() != mean.size()) {
      throw std::invalid_argument("gaussian spec: covariance size mismatch");
    }
    if (!full_covariance.isApprox(full_covariance.transpose(), 1e-10)) {
      throw std::invalid_argument("gaussian spec: covariance not symmetric");
    }
  }
}

Eigen::VectorXd sample_gaussian(const GaussianSpec& spec, Prng& rng) {
  spec.validate();
  Eigen::VectorXd z(spec.dim());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
  if (spec.is_diagonal()) {
    return spec.mean + spec.diag_variance.array().sqrt().matrix().asDiagonal() * z;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(spec.full_covariance);
  if (llt.info() != Eigen::Success) {
    // PSD but singular: fall back to a jittered factorization.
    Eigen::MatrixXd jittered = spec.full_covariance;
    jittered.diagonal().array() += 1e-12 * (1.0 + jittered.diagonal().maxCoeff());
    llt.compute(jittered);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("sample_gaussian: covariance not PSD");
    }
  }
  return spec.mean + llt.matrixL() * z;
}

JensenEstimate jensen_gap_mc(const ScalarFn& f, const GaussianSpec& dist,
                             int n_samples, Prng& rng) {
  if (!f) throw std::invalid_argument("jensen_gap_mc: empty function");
  if (n_samples < 100) {
    throw std::invalid_argument("jensen_gap_mc: need at least 100 samples");
  }
  const double f_mean_point = f(dist.mean);
  if (!std::isfinite(f_mean_point)) {
    throw std::runtime_error("jensen_gap_mc: f non-finite at the mean " +
                             point_preview(dist.mean));
  }
  // Average the per-sample differences f(x) - f(mu) instead of subtracting
  // two large means; a point mass then yields an exact zero.
  std::vector<double> diffs;
  diffs.reserve(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    const Eigen::VectorXd x = sample_gaussian(dist, rng);
    const double v = f(x);
    if (!std::isfinite(v)) {
      throw std::runtime_error("jensen_gap_mc: f non-finite at sample " +
                               std::to_string(i) + " " + point_preview(x));
    }
    diffs.push_back(v - f_mean_point);
  }
  JensenEstimate est;
  est.n_samples = n_samples;
  est.gap = mean_of(diffs);
  est.std_error = jackknife_se(diffs);
  return est;
}

double jensen_gap_second_order(const Eigen::MatrixXd& cov,
                               const Eigen::MatrixXd& hessian) {
  if (cov.rows() != cov.cols() || hessian.rows() != hessian.cols() ||
      cov.rows() != hessian.rows()) {
    throw std::invalid_argument("jensen_gap_second_order: dimension mismatch");
  }
  return 0.5 * (cov * hessian).trace();
}

Eigen::MatrixXd mixture_covariance(const Eigen::VectorXd& mu_t,
                                   const Eigen::MatrixXd& sigma_t,
                                   const Eigen::VectorXd& mu_c,
                                   const Eigen::MatrixXd& sigma_c,
                                   double alpha) {
  const Eigen::Index n = mu_t.size();
  if (mu_c.size() != n || sigma_t.rows() != n || sigma_t.cols() != n ||
      sigma_c.rows() != n || sigma_c.cols() != n) {
    throw std::invalid_argument("mixture_covariance: dimension mismatch");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("mixture_covariance: alpha outside [0,1]");
  }
  const Eigen::VectorXd gap = mu_t - mu_c;
  return alpha * sigma_t + (1.0 - alpha) * sigma_c +
         alpha * (1.0 - alpha) * gap * gap.transpose();
}

Eigen::MatrixXd numeric_hessian(const ScalarFn& f, const Eigen::VectorXd& x,
                                double step) {
  if (!f) throw std::invalid_argument("numeric_hessian: empty function");
  if (!(step > 0)) throw std::invalid_argument("numeric_hessian: step <= 0");
  const Eigen::Index n = x.size();
  Eigen::MatrixXd h(n, n);
  const double f0 = f(x);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    h(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (step * step);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
      xpp(i) += step;
      xpp(j) += step;
      xpm(i) += step;
      xpm(j) -= step;
      xmp(i) -= step;
      xmp(j) += step;
      xmm(i) -= step;
      xmm(j) -= step;
      const double v =
          (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * step * step);
      h(i, j) = v;
      h(j, i) = v;
    }
  }
  return h;
}

bool SimilarityBoundReport::all_pass() const {
  if (entries.empty()) return false;
  return std::all_of(entries.begin(), entries.end(),
                     [](const SimilarityBoundEntry& e) { return e.pass; });
}

SimilarityBoundReport similarity_bound_check(const AnchorPair& anchors,
                                             const EmbeddingTable& table,
                                             const Eigen::VectorXd& target_flat,
                                             const std::vector<double>& alpha_grid,
                                             int n_samples, std::uint64_t seed) {
  if (alpha_grid.empty()) {
    throw std::invalid_argument("similarity_bound_check: empty grid");
  }
  if (n_samples < 2) {
    throw std::invalid_argument("similarity_bound_check: need >= 2 samples");
  }
  // One set of component draws backs every grid entry; the mixture at each
  // alpha re-picks among the same draws, so the bound comparison is not
  // drowned by independent sampling noise.
  std::vector<double> sims_t, sims_c, picks;
  sims_t.reserve(static_cast<std::size_t>(n_samples));
  sims_c.reserve(static_cast<std::size_t>(n_samples));
  picks.reserve(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    const std::uint64_t idx = static_cast<std::uint64_t>(i);
    Prng rng_t(derive_seed(seed, "simbound-t", idx));
    Prng rng_c(derive_seed(seed, "simbound-c", idx));
    Prng rng_u(derive_seed(seed, "simbound-pick", idx));
    sims_t.push_back(
        soft_similarity(sample_selection(anchors.n_t, rng_t), table, target_flat));
    sims_c.push_back(
        soft_similarity(sample_selection(anchors.n_c, rng_c), table, target_flat));
    picks.push_back(rng_u.uniform01());
  }

  SimilarityBoundReport report;
  report.mean_t = mean_of(sims_t);
  report.se_t = jackknife_se(sims_t);
  report.mean_c = mean_of(sims_c);
  report.se_c = jackknife_se(sims_c);
  const double bound = std::min(report.mean_t, report.mean_c);
  const double bound_se = report.mean_t <= report.mean_c ? report.se_t
                                                         : report.se_c;

  for (const double alpha : alpha_grid) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw std::invalid_argument("similarity_bound_check: alpha outside [0,1]");
    }
    std::vector<double> mixture;
    mixture.reserve(static_cast<std::size_t>(n_samples));
    SimilarityBoundEntry entry;
    entry.alpha = alpha;
    for (int i = 0; i < n_samples; ++i) {
      const std::size_t k = static_cast<std::size_t>(i);
      mixture.push_back(picks[k] < alpha ? sims_t[k] : sims_c[k]);
    }
    entry.witness_sim = *std::max_element(mixture.begin(), mixture.end());
    entry.witness_found = entry.witness_sim >= bound;
    entry.mixture_mean = mean_of(mixture);
    entry.mixture_se = jackknife_se(mixture);
    entry.bound = bound;
    const double slack =
        3.0 * std::sqrt(entry.mixture_se * entry.mixture_se +
                        bound_se * bound_se);
    entry.pass = entry.mixture_mean >= bound - slack && entry.witness_found;
    report.entries.push_back(entry);
  }
  return report;
}

bool DiscretizationReport::all_pass() const {
  if (entries.empty()) return false;
  return std::all_of(entries.begin(), entries.end(),
                     [](const DiscretizationEntry& e) { return e.pass; });
}

DiscretizationReport discretization_bound_check(
    const Eigen::MatrixXd& anchor_embedding, const EmbeddingTable& table,
    const std::vector<double>& sigma_list, int n_samples, std::uint64_t seed) {
  if (anchor_embedding.cols() != table.dim()) {
    throw std::invalid_argument("discretization check: dimension mismatch");
  }
  if (sigma_list.empty() || n_samples < 2) {
    throw std::invalid_argument("discretization check: degenerate inputs");
  }
  const Eigen::Index L = anchor_embedding.rows();
  const Eigen::Index d = anchor_embedding.cols();
  DiscretizationReport report;
  report.length = L;
  report.dim = d;
  for (std::size_t s = 0; s < sigma_list.size(); ++s) {
    const double sigma = sigma_list[s];
    if (sigma < 0) {
      throw std::invalid_argument("discretization check: negative sigma");
    }
    Prng rng(derive_seed(seed, "discretize", static_cast<std::uint64_t>(s)));
    const auto nearest = [&table](const Eigen::VectorXd& e) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index v = 0; v < table.vocab_size(); ++v) {
        const double dist = (e - table.matrix.row(v).transpose()).norm();
        best = std::min(best, dist);
      }
      return best;
    };
    std::vector<double> errors;
    errors.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
      double total_sq = 0.0;
      for (Eigen::Index pos = 0; pos < L; ++pos) {
        Eigen::VectorXd e = anchor_embedding.row(pos).transpose();
        for (Eigen::Index j = 0; j < d; ++j) e(j) += sigma * rng.normal();
        const double best = nearest(e);
        total_sq += best * best;
      }
      errors.push_back(std::sqrt(total_sq));
    }
    // Selection-space analog: noise over the vocabulary axis mapped through
    // E. Reported so the gap between the two noise models is visible; the
    // sqrt(L*d) bound applies only to the embedding-space perturbation.
    Prng sel_rng(
        derive_seed(seed, "discretize-sel", static_cast<std::uint64_t>(s)));
    double sel_total = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      double total_sq = 0.0;
      for (Eigen::Index pos = 0; pos < L; ++pos) {
        Eigen::VectorXd z(table.vocab_size());
        for (Eigen::Index v = 0; v < table.vocab_size(); ++v) {
          z(v) = sel_rng.normal();
        }
        const Eigen::VectorXd e = anchor_embedding.row(pos).transpose() +
                                  sigma * (table.matrix.transpose() * z);
        const double best = nearest(e);
        total_sq += best * best;
      }
      sel_total += std::sqrt(total_sq);
    }
    DiscretizationEntry entry;
    entry.sigma = sigma;
    entry.measured = mean_of(errors);
    entry.std_error = jackknife_se(errors);
    entry.bound = sigma * std::sqrt(static_cast<double>(L * d));
    entry.selection_space_measured = sel_total / n_samples;
    entry.pass = entry.measured <= entry.bound + 3.0 * entry.std_error;
    report.entries.push_back(entry);
  }
  return report;
}

UnimodalComparison unimodal_vs_mixture_gap(const AnchorPair& anchors,
                                           const EmbeddingTable& table,
                                           double alpha, const ScalarFn& f,
                                           int n_samples, std::uint64_t seed) {
  if (!f) throw std::invalid_argument("unimodal comparison: empty function");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("unimodal comparison: alpha outside [0,1]");
  }
  if (n_samples < 100) {
    throw std::invalid_argument("unimodal comparison: need >= 100 samples");
  }
  if ((anchors.n_t.mu - anchors.n_c.mu).norm() < 1e-12) {
    throw std::invalid_argument("comparison undefined: mu_t equals mu_c");
  }
  const Eigen::Index L = anchors.n_t.length();
  const Eigen::Index d = table.dim();

  // Embedding-space moments of each component: the map is row-block E^T.
  const auto embed_moments = [&](const RelaxedPromptDistribution& dist) {
    const Eigen::VectorXd mean = flatten(dist.mu * table.matrix);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(L * d, L * d);
    const Eigen::MatrixXd sig = dist.sigma();
    for (Eigen::Index pos = 0; pos < L; ++pos) {
      const Eigen::VectorXd var = sig.row(pos).array().square();
      cov.block(pos * d, pos * d, d, d) =
          table.matrix.transpose() * var.asDiagonal() * table.matrix;
    }
    return std::make_pair(mean, cov);
  };
  const auto [m_t, c_t] = embed_moments(anchors.n_t);
  const auto [m_c, c_c] = embed_moments(anchors.n_c);
  const Eigen::MatrixXd cov_mix = mixture_covariance(m_t, c_t, m_c, c_c, alpha);
  const Eigen::VectorXd mean_mix = alpha * m_t + (1.0 - alpha) * m_c;

  const double f_center = f(mean_mix);
  if (!std::isfinite(f_center)) {
    throw std::runtime_error("unimodal comparison: f non-finite at the mean");
  }

  UnimodalComparison cmp;
  cmp.n_samples = n_samples;
  const Eigen::VectorXd v = (m_t - m_c).normalized();
  cmp.dir_var_unimodal = v.dot(cov_mix * v);
  cmp.dir_var_within =
      alpha * v.dot(c_t * v) + (1.0 - alpha) * v.dot(c_c * v);

  // Mixture gap by direct sampling of the two-component model.
  {
    Prng rng(derive_seed(seed, "unimodal-mix"));
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
      const bool from_t = rng.uniform01() < alpha;
      const SelectionMatrix sel =
          sample_selection(from_t ? anchors.n_t : anchors.n_c, rng);
      values.push_back(f(flatten(encode(sel, table))));
      if (!std::isfinite(values.back())) {
        throw std::runtime_error("unimodal comparison: f non-finite at sample " +
                                 std::to_string(i));
      }
    }
    cmp.mixture_gap = mean_of(values) - f_center;
    cmp.mixture_se = jackknife_se(values);
  }
  // Surrogate gap from the moment-matched Gaussian (factorized once).
  {
    Eigen::LLT<Eigen::MatrixXd> llt(cov_mix);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("unimodal comparison: covariance not PD");
    }
    const Eigen::MatrixXd factor = llt.matrixL();
    Prng rng(derive_seed(seed, "unimodal-sur"));
    Eigen::VectorXd z(mean_mix.size());
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
      for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = rng.normal();
      values.push_back(f(mean_mix + factor * z));
      if (!std::isfinite(values.back())) {
        throw std::runtime_error(
            "unimodal comparison: f non-finite at surrogate sample " +
            std::to_string(i));
      }
    }
    cmp.unimodal_gap = mean_of(values) - f_center;
    cmp.unimodal_se = jackknife_se(values);
  }
  return cmp;
}

}  // namespace redmix
