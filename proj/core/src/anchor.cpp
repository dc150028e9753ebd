#include "redmix/anchor.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace redmix {

namespace {

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

Eigen::MatrixXd draw_noise(Eigen::Index rows, Eigen::Index cols, Prng& rng) {
  Eigen::MatrixXd eps(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      eps(i, j) = rng.normal();
    }
  }
  return eps;
}

Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, Eigen::Index rows,
                          Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = v(k++);
    }
  }
  return m;
}

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      if (j) out << ' ';
      out << buf;
    }
    out << '\n';
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace

void RelaxedPromptDistribution::validate() const {
  if (mu.rows() != rho.rows() || mu.cols() != rho.cols()) {
    throw std::invalid_argument("relaxed distribution: mu/rho shape mismatch");
  }
  if (mu.rows() < 1 || mu.cols() < 2) {
    throw std::invalid_argument("relaxed distribution: degenerate shape");
  }
  if (!mu.allFinite() || !rho.allFinite()) {
    throw std::invalid_argument("relaxed distribution: non-finite parameter");
  }
}

void FitConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("fit config: steps < 0");
  if (!(learning_rate > 0)) {
    throw std::invalid_argument("fit config: learning_rate must be > 0");
  }
  if (batch < 1) throw std::invalid_argument("fit config: batch must be >= 1");
  if (!(sigma_init > 0)) {
    throw std::invalid_argument("fit config: sigma_init must be > 0");
  }
  if (mu_noise < 0) {
    throw std::invalid_argument("fit config: mu_noise must be >= 0");
  }
}

TokenSequence derive_clean_prompt(
    const TokenSequence& p_t,
    const std::unordered_set<std::string>& blocklist,
    const EmbeddingTable& table) {
  if (p_t.indices.empty()) {
    throw std::invalid_argument("derive_clean_prompt: empty target prompt");
  }
  std::unordered_set<std::string> lowered;
  for (const auto& b : blocklist) lowered.insert(ascii_lower(b));
  TokenSequence clean;
  for (const auto idx : p_t.indices) {
    if (idx < 0 || idx >= table.vocab_size()) {
      throw std::invalid_argument("derive_clean_prompt: index out of range");
    }
    const std::string& tok = table.vocab[static_cast<std::size_t>(idx)];
    if (!lowered.contains(ascii_lower(tok))) {
      clean.indices.push_back(idx);
    }
  }
  if (clean.indices.empty()) {
    throw std::invalid_argument(
        "derive_clean_prompt: clean prompt empty (every token blocklisted)");
  }
  return clean;
}

SelectionMatrix sample_selection(const RelaxedPromptDistribution& dist,
                                 Prng& rng) {
  SelectionMatrix sel;
  sel.rows.resize(dist.length(), dist.vocab_size());
  for (Eigen::Index i = 0; i < dist.length(); ++i) {
    for (Eigen::Index j = 0; j < dist.vocab_size(); ++j) {
      sel.rows(i, j) = dist.mu(i, j) + std::exp(dist.rho(i, j)) * rng.normal();
    }
  }
  sel.one_hot = false;
  return sel;
}

double log_density(const RelaxedPromptDistribution& dist,
                   const SelectionMatrix& sel) {
  if (sel.rows.rows() != dist.length() ||
      sel.rows.cols() != dist.vocab_size()) {
    throw std::invalid_argument("log_density: shape mismatch");
  }
  constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2*pi)
  double total = 0.0;
  for (Eigen::Index i = 0; i < dist.length(); ++i) {
    for (Eigen::Index j = 0; j < dist.vocab_size(); ++j) {
      const double sigma = std::exp(dist.rho(i, j));
      const double z = (sel.rows(i, j) - dist.mu(i, j)) / sigma;
      total += -0.5 * kLogTwoPi - dist.rho(i, j) - 0.5 * z * z;
    }
  }
  return total;
}

double expected_semantic_loss(const RelaxedPromptDistribution& dist,
                              const EmbeddingTable& table,
                              const Eigen::VectorXd& anchor_embedding,
                              int n_samples, Prng& rng) {
  if (n_samples < 1) {
    throw std::invalid_argument("expected_semantic_loss: n_samples < 1");
  }
  double total = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const SelectionMatrix sel = sample_selection(dist, rng);
    total += cosine_loss(anchor_embedding, flatten(encode(sel, table)));
  }
  return total / n_samples;
}

BatchGradients batch_gradients(const Eigen::MatrixXd& mu,
                               const Eigen::MatrixXd& rho,
                               const std::vector<Eigen::MatrixXd>& eps_batch,
                               const Eigen::VectorXd& anchor_flat,
                               const EmbeddingTable& table) {
  if (eps_batch.empty()) {
    throw std::invalid_argument("batch_gradients: empty batch");
  }
  const Eigen::Index L = mu.rows();
  const Eigen::Index V = mu.cols();
  const Eigen::MatrixXd sigma = rho.array().exp();
  BatchGradients g;
  g.grad_mu = Eigen::MatrixXd::Zero(L, V);
  g.grad_rho = Eigen::MatrixXd::Zero(L, V);
  for (const auto& eps : eps_batch) {
    const Eigen::MatrixXd delta = mu + sigma.cwiseProduct(eps);
    const Eigen::MatrixXd embedded = delta * table.matrix;  // L x d
    const Eigen::VectorXd x = flatten(embedded);
    g.mean_loss += cosine_loss(x, anchor_flat);
    // chain rule: d loss / d delta = (d loss / d e) . E^T per position
    const Eigen::MatrixXd grad_e =
        unflatten(cosine_loss_grad(x, anchor_flat), L, table.dim());
    const Eigen::MatrixXd grad_delta = grad_e * table.matrix.transpose();
    g.grad_mu += grad_delta;
    g.grad_rho += grad_delta.cwiseProduct(eps).cwiseProduct(sigma);
  }
  const double inv = 1.0 / static_cast<double>(eps_batch.size());
  g.grad_mu *= inv;
  g.grad_rho *= inv;
  g.mean_loss *= inv;
  return g;
}

RelaxedPromptDistribution fit_anchor(const TokenSequence& p,
                                     const EmbeddingTable& table,
                                     const FitConfig& cfg) {
  cfg.validate();
  const SelectionMatrix hot = one_hot_selection(p, table);
  const Eigen::VectorXd anchor_flat = flatten(encode(hot, table));

  RelaxedPromptDistribution dist;
  dist.table_dim = table.dim();
  dist.table_checksum = table.checksum();
  Prng init_rng(derive_seed(cfg.seed, "fit-init"));
  dist.mu = hot.rows +
            cfg.mu_noise * draw_noise(hot.rows.rows(), hot.rows.cols(), init_rng);
  dist.rho = Eigen::MatrixXd::Constant(hot.rows.rows(), hot.rows.cols(),
                                       std::log(cfg.sigma_init));

  const RelaxedPromptDistribution init = dist;

  for (int step = 0; step < cfg.steps; ++step) {
    Prng step_rng(derive_seed(cfg.seed, "fit-step",
                              static_cast<std::uint64_t>(step)));
    std::vector<Eigen::MatrixXd> eps_batch;
    eps_batch.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      eps_batch.push_back(
          draw_noise(dist.length(), dist.vocab_size(), step_rng));
    }
    const BatchGradients g =
        batch_gradients(dist.mu, dist.rho, eps_batch, anchor_flat, table);
    if (!g.grad_mu.allFinite() || !g.grad_rho.allFinite()) {
      throw std::runtime_error(
          "fit_anchor: non-finite gradient at step " + std::to_string(step) +
          " (loss " + std::to_string(g.mean_loss) + ")");
    }
    dist.mu -= cfg.learning_rate * g.grad_mu;
    dist.rho -= cfg.learning_rate * g.grad_rho;
  }

  // Semantic decrease contract, measured with one evaluation stream.
  const std::uint64_t eval_seed = derive_seed(cfg.seed, "fit-eval");
  Prng eval_a(eval_seed);
  Prng eval_b(eval_seed);
  const double fitted_loss =
      expected_semantic_loss(dist, table, anchor_flat, 1000, eval_a);
  const double init_loss =
      expected_semantic_loss(init, table, anchor_flat, 1000, eval_b);
  if (fitted_loss > init_loss) {
    throw std::runtime_error(
        "fit_anchor: fitted loss " + std::to_string(fitted_loss) +
        " exceeds initial loss " + std::to_string(init_loss));
  }
  return dist;
}

AnchorPair fit_anchor_pair(const TokenSequence& p_t,
                           const std::unordered_set<std::string>& blocklist,
                           const EmbeddingTable& table, const FitConfig& cfg) {
  AnchorPair pair;
  pair.target_prompt = p_t;
  pair.clean_prompt = derive_clean_prompt(p_t, blocklist, table);
  while (pair.clean_prompt.length() < p_t.length()) {
    pair.clean_prompt.indices.push_back(kPadTokenIndex);
  }

  FitConfig cfg_t = cfg;
  FitConfig cfg_c = cfg;
  cfg_c.seed = cfg.seed + 1;
  pair.n_t = fit_anchor(pair.target_prompt, table, cfg_t);
  pair.n_c = fit_anchor(pair.clean_prompt, table, cfg_c);
  return pair;
}

void save_anchor(const RelaxedPromptDistribution& dist,
                 const std::filesystem::path& path) {
  std::ostringstream payload;
  payload << "redmix-anchor 1\n";
  payload << dist.length() << ' ' << dist.vocab_size() << ' ' << dist.table_dim
          << ' ' << dist.table_checksum << '\n';
  write_matrix(payload, dist.mu);
  write_matrix(payload, dist.rho);
  const std::string body = payload.str();
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write anchor file: " + path.string());
  }
  out << body << "checksum " << fnv1a(body) << '\n';
}

RelaxedPromptDistribution load_anchor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open anchor file: " + path.string());
  }
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "redmix-anchor" || version != 1) {
    throw std::runtime_error("anchor file: bad header in " + path.string());
  }
  Eigen::Index L = 0, V = 0, d = 0;
  std::uint64_t table_checksum = 0;
  if (!(in >> L >> V >> d >> table_checksum) || L < 1 || V < 2 || d < 1) {
    throw std::runtime_error("anchor file: bad shape line in " + path.string());
  }
  RelaxedPromptDistribution dist;
  dist.table_dim = d;
  dist.table_checksum = table_checksum;
  dist.mu.resize(L, V);
  dist.rho.resize(L, V);
  for (auto* m : {&dist.mu, &dist.rho}) {
    for (Eigen::Index i = 0; i < L; ++i) {
      for (Eigen::Index j = 0; j < V; ++j) {
        if (!(in >> (*m)(i, j))) {
          throw std::runtime_error("anchor file: truncated matrix in " +
                                   path.string());
        }
      }
    }
  }
  std::string tag;
  std::uint64_t stored = 0;
  if (!(in >> tag >> stored) || tag != "checksum") {
    throw std::runtime_error("anchor file: missing checksum in " +
                             path.string());
  }
  // Re-serialize and compare: catches any corruption of the payload.
  std::ostringstream payload;
  payload << "redmix-anchor 1\n";
  payload << L << ' ' << V << ' ' << d << ' ' << table_checksum << '\n';
  write_matrix(payload, dist.mu);
  write_matrix(payload, dist.rho);
  if (fnv1a(payload.str()) != stored) {
    throw std::runtime_error("anchor file: checksum mismatch in " +
                             path.string());
  }
  dist.validate();
  return dist;
}

void save_anchor_pair(const AnchorPair& pair,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_anchor(pair.n_t, dir / "n_t.anchor");
  save_anchor(pair.n_c, dir / "n_c.anchor");
  nlohmann::ordered_json j;
  j["target_prompt"] = pair.target_prompt.indices;
  j["clean_prompt"] = pair.clean_prompt.indices;
  j["table_checksum"] = pair.n_t.table_checksum;
  std::ofstream out(dir / "pair.json");
  if (!out) {
    throw std::runtime_error("cannot write pair.json in " + dir.string());
  }
  out << j.dump(2) << '\n';
}

AnchorPair load_anchor_pair(const std::filesystem::path& dir) {
  AnchorPair pair;
  pair.n_t = load_anchor(dir / "n_t.anchor");
  pair.n_c = load_anchor(dir / "n_c.anchor");
  std::ifstream in(dir / "pair.json");
  if (!in) {
    throw std::runtime_error("cannot open pair.json in " + dir.string());
  }
  nlohmann::json j;
  try {
    in >> j;
    pair.target_prompt.indices =
        j.at("target_prompt").get<std::vector<Eigen::Index>>();
    pair.clean_prompt.indices =
        j.at("clean_prompt").get<std::vector<Eigen::Index>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("pair.json: " + std::string(e.what()));
  }
  if (pair.n_t.length() != pair.n_c.length() ||
      pair.n_t.vocab_size() != pair.n_c.vocab_size() ||
      pair.n_t.table_dim != pair.n_c.table_dim ||
      pair.n_t.table_checksum != pair.n_c.table_checksum) {
    throw std::runtime_error("anchor pair: mismatched anchors in " +
                             dir.string());
  }
  return pair;
}

}  // namespace redmix
