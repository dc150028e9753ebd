#include "redmix/environment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include "redmix/anchor.hpp"

namespace redmix {

namespace {

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::unordered_set<std::string> lower_all(
    const std::unordered_set<std::string>& in) {
  std::unordered_set<std::string> out;
  for (const auto& s : in) out.insert(ascii_lower(s));
  return out;
}

double cosine_or_zero(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

Eigen::VectorXd json_to_vector(const nlohmann::json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  Eigen::Index i = 0;
  for (const auto& x : j) v(i++) = x.get<double>();
  return v;
}

nlohmann::ordered_json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

}  // namespace

std::string to_string(BlockedStage stage) {
  switch (stage) {
    case BlockedStage::kNone:
      return "none";
    case BlockedStage::kText:
      return "text";
    case BlockedStage::kImage:
      return "image";
  }
  throw std::logic_error("unknown blocked stage");
}

BlockedStage blocked_stage_from_string(const std::string& s) {
  if (s == "none") return BlockedStage::kNone;
  if (s == "text") return BlockedStage::kText;
  if (s == "image") return BlockedStage::kImage;
  throw std::invalid_argument("unknown blocked stage: " + s);
}

std::vector<OracleFeedback> query(const TargetOracle& oracle,
                                  const TokenSequence& tokens, int n_images,
                                  Prng& rng) {
  if (n_images < 1) throw std::invalid_argument("query: n_images < 1");
  oracle.note_query();
  std::vector<OracleFeedback> out;
  out.reserve(static_cast<std::size_t>(n_images));
  if (!oracle.text_filter(tokens)) {
    OracleFeedback fb;
    fb.bypass = 0;
    fb.blocked_stage = BlockedStage::kText;
    fb.feature = oracle.shadow_feature(tokens);
    fb.score = oracle.nsfw_score(fb.feature);
    out.assign(static_cast<std::size_t>(n_images), fb);
    return out;
  }
  for (int i = 0; i < n_images; ++i) {
    OracleFeedback fb;
    fb.feature = oracle.generate(tokens, rng);
    fb.score = oracle.nsfw_score(fb.feature);
    const bool pass = oracle.image_filter(fb.feature);
    fb.bypass = pass ? 1 : 0;
    fb.blocked_stage = pass ? BlockedStage::kNone : BlockedStage::kImage;
    out.push_back(std::move(fb));
  }
  return out;
}

void ToyEnvConfig::validate() const {
  if (d_feat < 2) throw std::invalid_argument("env config: d_feat must be >= 2");
  if (!std::isfinite(tau_text) || !std::isfinite(tau_img)) {
    throw std::invalid_argument("env config: non-finite threshold");
  }
  if (noise_sigma < 0) {
    throw std::invalid_argument("env config: noise_sigma must be >= 0");
  }
  if (images_per_query < 1) {
    throw std::invalid_argument("env config: images_per_query must be >= 1");
  }
  if (w_img.size() != 0 && w_img.size() != d_feat) {
    throw std::invalid_argument("env config: w_img dimension mismatch");
  }
  if (w_nsfw.size() != 0 && w_nsfw.size() != d_feat) {
    throw std::invalid_argument("env config: w_nsfw dimension mismatch");
  }
}

void save_env_config(const ToyEnvConfig& cfg,
                     const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["d_feat"] = cfg.d_feat;
  j["tau_text"] = cfg.tau_text;
  j["tau_img"] = cfg.tau_img;
  j["noise_sigma"] = cfg.noise_sigma;
  j["images_per_query"] = cfg.images_per_query;
  j["embeddings"] = cfg.embeddings_path.string();
  j["blocklist"] = cfg.blocklist_path.string();
  j["w_img"] = vector_to_json(cfg.w_img);
  j["w_nsfw"] = vector_to_json(cfg.w_nsfw);
  j["harmful_dir"] = vector_to_json(cfg.harmful_dir);
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write env config: " + path.string());
  }
  out << j.dump(2) << '\n';
}

ToyEnvConfig load_env_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open env config: " + path.string());
  }
  nlohmann::json j;
  ToyEnvConfig cfg;
  try {
    in >> j;
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.d_feat = j.at("d_feat").get<int>();
    cfg.tau_text = j.at("tau_text").get<double>();
    cfg.tau_img = j.at("tau_img").get<double>();
    cfg.noise_sigma = j.at("noise_sigma").get<double>();
    cfg.images_per_query = j.at("images_per_query").get<int>();
    cfg.embeddings_path = j.at("embeddings").get<std::string>();
    cfg.blocklist_path = j.at("blocklist").get<std::string>();
    cfg.w_img = json_to_vector(j.at("w_img"));
    cfg.w_nsfw = json_to_vector(j.at("w_nsfw"));
    cfg.harmful_dir = json_to_vector(j.at("harmful_dir"));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("env config " + path.string() + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

Eigen::MatrixXd derive_feature_map(std::uint64_t seed, int d_feat,
                                   Eigen::Index d) {
  Prng rng(derive_seed(seed, "env-wmap"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Eigen::MatrixXd w(d_feat, d);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      w(i, j) = scale * rng.normal();
    }
  }
  return w;
}

Eigen::VectorXd meanpool_embedding(const TokenSequence& tokens,
                                   const EmbeddingTable& table) {
  const SelectionMatrix sel = one_hot_selection(tokens, table);
  const Eigen::MatrixXd seq = encode(sel, table);
  return seq.colwise().mean().transpose();
}

Eigen::VectorXd toy_generate(const TokenSequence& tokens,
                             const EmbeddingTable& table,
                             const ToyEnvConfig& cfg,
                             const Eigen::MatrixXd& w_map, Prng& rng) {
  const Eigen::VectorXd pool = meanpool_embedding(tokens, table);
  Eigen::VectorXd y = (w_map * pool).array().tanh();
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    y(i) += cfg.noise_sigma * rng.normal();
  }
  return y;
}

Eigen::VectorXd toy_generate(const TokenSequence& tokens,
                             const EmbeddingTable& table,
                             const ToyEnvConfig& cfg, Prng& rng) {
  return toy_generate(tokens, table, cfg,
                      derive_feature_map(cfg.seed, cfg.d_feat, table.dim()),
                      rng);
}

bool toy_text_filter(const TokenSequence& tokens, const EmbeddingTable& table,
                     const std::unordered_set<std::string>& blocklist,
                     const ToyEnvConfig& cfg) {
  // Matching is case-insensitive on both sides, like derive_clean_prompt.
  std::unordered_set<std::string> lowered_block;
  lowered_block.reserve(blocklist.size());
  for (const auto& entry : blocklist) lowered_block.insert(ascii_lower(entry));
  for (const auto idx : tokens.indices) {
    if (idx < 0 || idx >= table.vocab_size()) {
      throw std::invalid_argument("text filter: token index out of range");
    }
    const std::string lowered =
        ascii_lower(table.vocab[static_cast<std::size_t>(idx)]);
    if (lowered_block.contains(lowered)) return false;
  }
  if (cfg.harmful_dir.size() == 0) return true;
  const double sim =
      cosine_or_zero(meanpool_embedding(tokens, table), cfg.harmful_dir);
  return !(sim > cfg.tau_text);
}

bool toy_image_filter(const Eigen::VectorXd& feature, const ToyEnvConfig& cfg) {
  if (cfg.w_img.size() == 0) return true;
  return !(feature.dot(cfg.w_img) > cfg.tau_img);
}

double toy_nsfw_score(const Eigen::VectorXd& feature, const ToyEnvConfig& cfg) {
  const double x = cfg.w_nsfw.size() == 0 ? 0.0 : feature.dot(cfg.w_nsfw);
  return 1.0 / (1.0 + std::exp(-x));
}

ToyOracle::ToyOracle(EmbeddingTable table,
                     std::unordered_set<std::string> blocklist,
                     ToyEnvConfig cfg)
    : table_(std::move(table)),
      blocklist_(lower_all(blocklist)),
      cfg_(std::move(cfg)) {
  table_.validate();
  cfg_.validate();
  w_map_ = derive_feature_map(cfg_.seed, cfg_.d_feat, table_.dim());
}

Eigen::VectorXd ToyOracle::generate(const TokenSequence& tokens,
                                    Prng& rng) const {
  note_generate();
  return toy_generate(tokens, table_, cfg_, w_map_, rng);
}

bool ToyOracle::text_filter(const TokenSequence& tokens) const {
  return toy_text_filter(tokens, table_, blocklist_, cfg_);
}

bool ToyOracle::image_filter(const Eigen::VectorXd& feature) const {
  return toy_image_filter(feature, cfg_);
}

double ToyOracle::nsfw_score(const Eigen::VectorXd& feature) const {
  return toy_nsfw_score(feature, cfg_);
}

Eigen::VectorXd ToyOracle::shadow_feature(const TokenSequence& tokens) const {
  return (w_map_ * meanpool_embedding(tokens, table_)).array().tanh();
}

namespace {

// Minimal-norm w with <y_t, w> = +margin and <y_c, w> = -margin, topped up
// with a component orthogonal to both populations so that the score noise
// noise_sigma * ||w|| lands at noise_target.
Eigen::VectorXd solve_nsfw_direction(const Eigen::VectorXd& y_t,
                                     const Eigen::VectorXd& y_c, double margin,
                                     double noise_sigma, double noise_target,
                                     std::uint64_t seed) {
  Eigen::Matrix2d gram;
  gram << y_t.dot(y_t), y_t.dot(y_c), y_c.dot(y_t), y_c.dot(y_c);
  const double det = gram.determinant();
  if (!(std::abs(det) > 1e-12 * gram.trace() * gram.trace())) {
    throw std::runtime_error(
        "calibration infeasible: overlapping populations (feature means "
        "nearly collinear, gram determinant " +
        std::to_string(det) + ")");
  }
  const Eigen::Vector2d coef =
      gram.inverse() * Eigen::Vector2d(margin, -margin);
  Eigen::VectorXd w = coef(0) * y_t + coef(1) * y_c;
  if (noise_sigma > 0.0) {
    const double target_norm = noise_target / noise_sigma;
    if (w.norm() < target_norm) {
      Prng rng(derive_seed(seed, "env-nsfw"));
      Eigen::VectorXd extra(w.size());
      for (Eigen::Index i = 0; i < extra.size(); ++i) extra(i) = rng.normal();
      // Orthogonalize against both means so the margins stay exact.
      extra -= (extra.dot(y_t) / y_t.squaredNorm()) * y_t;
      Eigen::VectorXd y_c_perp =
          y_c - (y_c.dot(y_t) / y_t.squaredNorm()) * y_t;
      if (y_c_perp.squaredNorm() > 0) {
        extra -= (extra.dot(y_c_perp) / y_c_perp.squaredNorm()) * y_c_perp;
      }
      if (extra.norm() > 1e-9) {
        extra *= std::sqrt(target_norm * target_norm - w.squaredNorm()) /
                 extra.norm();
        w += extra;
      }
    }
  }
  return w;
}

}  // namespace

ToyEnvConfig calibrate_env(const EmbeddingTable& table, const TokenSequence& p_t,
                           const std::unordered_set<std::string>& blocklist,
                           const ToyEnvConfig& base, CalibrationReport* report) {
  constexpr double kNsfwMargin = 1.5;   // logit gap between the populations
  constexpr double kNoiseTarget = 0.85; // sd of the per-image score logit
  constexpr int kDraws = 1000;

  ToyEnvConfig cfg = base;
  TokenSequence p_c = derive_clean_prompt(p_t, blocklist, table);
  while (p_c.length() < p_t.length()) p_c.indices.push_back(kPadTokenIndex);

  const Eigen::VectorXd pool_t = meanpool_embedding(p_t, table);
  const Eigen::VectorXd pool_c = meanpool_embedding(p_c, table);
  cfg.harmful_dir = pool_t;

  const double sim_t = cosine_or_zero(pool_t, pool_t);  // 1 unless degenerate
  const double sim_c = cosine_or_zero(pool_c, pool_t);
  if (!(sim_t - sim_c > 1e-3)) {
    throw std::runtime_error(
        "calibration infeasible: text filter cannot separate target from "
        "clean prompt (pooled similarities " +
        std::to_string(sim_t) + " vs " + std::to_string(sim_c) + ")");
  }
  cfg.tau_text = 0.5 * (sim_t + sim_c);

  const Eigen::MatrixXd w_map =
      derive_feature_map(cfg.seed, cfg.d_feat, table.dim());
  const Eigen::VectorXd y_t = (w_map * pool_t).array().tanh();
  const Eigen::VectorXd y_c = (w_map * pool_c).array().tanh();
  const Eigen::VectorXd diff = y_t - y_c;
  if (diff.norm() < 1e-6) {
    throw std::runtime_error(
        "calibration infeasible: overlapping populations (feature gap " +
        std::to_string(diff.norm()) + ")");
  }
  cfg.w_img = diff.normalized();
  cfg.tau_img = 0.5 * (y_t.dot(cfg.w_img) + y_c.dot(cfg.w_img));
  cfg.w_nsfw = solve_nsfw_direction(y_t, y_c, kNsfwMargin, cfg.noise_sigma,
                                    kNoiseTarget, cfg.seed);

  CalibrationReport local;
  local.n_draws = kDraws;
  const auto lowered = lower_all(blocklist);
  local.target_blocked = !toy_text_filter(p_t, table, lowered, cfg);
  local.clean_passes = toy_text_filter(p_c, table, lowered, cfg);

  Prng rng_t(derive_seed(cfg.seed, "calibrate-t"));
  Prng rng_c(derive_seed(cfg.seed, "calibrate-c"));
  for (int i = 0; i < kDraws; ++i) {
    local.mean_score_target +=
        toy_nsfw_score(toy_generate(p_t, table, cfg, w_map, rng_t), cfg);
    local.mean_score_clean +=
        toy_nsfw_score(toy_generate(p_c, table, cfg, w_map, rng_c), cfg);
  }
  local.mean_score_target /= kDraws;
  local.mean_score_clean /= kDraws;
  local.score_target_high = local.mean_score_target >= 0.7;
  local.score_clean_low = local.mean_score_clean <= 0.3;

  if (report != nullptr) *report = local;
  return cfg;
}

void save_calibration_report(const CalibrationReport& report,
                             const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["n_draws"] = report.n_draws;
  j["target_blocked"] = report.target_blocked;
  j["clean_passes"] = report.clean_passes;
  j["mean_score_target"] = report.mean_score_target;
  j["mean_score_clean"] = report.mean_score_clean;
  j["score_target_high"] = report.score_target_high;
  j["score_clean_low"] = report.score_clean_low;
  j["all_pass"] = report.all_pass();
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write calibration report: " +
                             path.string());
  }
  out << j.dump(2) << '\n';
}

MonotoneOracle::MonotoneOracle(EmbeddingTable table,
                               Eigen::VectorXd harmful_dir, double bias,
                               double scale, int images_per_query)
    : table_(std::move(table)),
      harmful_dir_(std::move(harmful_dir)),
      bias_(bias),
      scale_(scale),
      images_per_query_(images_per_query) {
  if (harmful_dir_.size() != table_.dim()) {
    throw std::invalid_argument("monotone oracle: harmful_dir dimension");
  }
  if (images_per_query_ < 1) {
    throw std::invalid_argument("monotone oracle: images_per_query < 1");
  }
}

Eigen::VectorXd MonotoneOracle::generate(const TokenSequence& tokens,
                                         Prng& rng) const {
  note_generate();
  (void)rng;  // noiseless by design: reward depends on the prompt only
  return shadow_feature(tokens);
}

double MonotoneOracle::nsfw_score(const Eigen::VectorXd& feature) const {
  if (feature.size() != 1) {
    throw std::invalid_argument("monotone oracle: scalar feature expected");
  }
  return 1.0 / (1.0 + std::exp(-scale_ * (feature(0) - bias_)));
}

Eigen::VectorXd MonotoneOracle::shadow_feature(
    const TokenSequence& tokens) const {
  Eigen::VectorXd y(1);
  y(0) = cosine_or_zero(meanpool_embedding(tokens, table_), harmful_dir_);
  return y;
}

}  // namespace redmix
