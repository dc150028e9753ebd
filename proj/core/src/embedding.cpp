#include "redmix/embedding.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace redmix {

namespace {

std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h = (h ^ p[i]) * 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Eigen::Index EmbeddingTable::find(const std::string& token) const {
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (vocab[i] == token) return static_cast<Eigen::Index>(i);
  }
  return -1;
}

std::uint64_t EmbeddingTable::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : vocab) {
    h = fnv1a_bytes(h, t.data(), t.size());
    h = fnv1a_bytes(h, "\x1f", 1);
  }
  for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
      const double v = matrix(i, j);
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = fnv1a_bytes(h, &bits, sizeof(bits));
    }
  }
  return h;
}

void EmbeddingTable::validate() const {
  if (static_cast<Eigen::Index>(vocab.size()) != matrix.rows()) {
    throw std::invalid_argument("embedding table: vocab/matrix row mismatch");
  }
  if (matrix.rows() < 2) {
    throw std::invalid_argument("embedding table: |V| must be >= 2");
  }
  std::unordered_set<std::string> seen;
  for (const auto& t : vocab) {
    if (!seen.insert(t).second) {
      throw std::invalid_argument("embedding table: duplicate token '" + t +
                                  "'");
    }
  }
  if (!matrix.allFinite()) {
    throw std::invalid_argument("embedding table: non-finite entry");
  }
  for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
    if (matrix.row(i).norm() == 0.0) {
      throw std::invalid_argument("embedding table: all-zero row for token '" +
                                  vocab[static_cast<std::size_t>(i)] + "'");
    }
  }
}

SelectionMatrix one_hot_selection(const TokenSequence& p,
                                  const EmbeddingTable& table) {
  if (p.length() < 1) {
    throw std::invalid_argument("one_hot_selection: empty token sequence");
  }
  SelectionMatrix sel;
  sel.rows = Eigen::MatrixXd::Zero(p.length(), table.vocab_size());
  for (Eigen::Index i = 0; i < p.length(); ++i) {
    const Eigen::Index t = p.indices[static_cast<std::size_t>(i)];
    if (t < 0 || t >= table.vocab_size()) {
      throw std::invalid_argument("one_hot_selection: token index " +
                                  std::to_string(t) + " out of range");
    }
    sel.rows(i, t) = 1.0;
  }
  sel.one_hot = true;
  return sel;
}

Eigen::MatrixXd encode(const SelectionMatrix& sel,
                       const EmbeddingTable& table) {
  if (sel.rows.cols() != table.vocab_size()) {
    throw std::invalid_argument("encode: selection width " +
                                std::to_string(sel.rows.cols()) +
                                " != |V| = " +
                                std::to_string(table.vocab_size()));
  }
  return sel.rows * table.matrix;
}

Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      v(k++) = m(i, j);
    }
  }
  return v;
}

double cosine_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("cosine_loss: size mismatch");
  }
  const double nx = x.norm();
  const double ny = y.norm();
  if (nx == 0.0 || ny == 0.0) {
    throw std::domain_error("cosine_loss: zero-norm input");
  }
  return 1.0 - x.dot(y) / (nx * ny);
}

Eigen::VectorXd cosine_loss_grad(const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("cosine_loss_grad: size mismatch");
  }
  const double nx = x.norm();
  const double ny = y.norm();
  if (nx == 0.0 || ny == 0.0) {
    throw std::domain_error("cosine_loss_grad: zero-norm input");
  }
  const double s = x.dot(y) / (nx * ny);
  return -(y / (nx * ny) - s * x / (nx * nx));
}

TokenSequence project_to_tokens(const SelectionMatrix& sel,
                                ProjectionMode mode, Prng& rng, double tau) {
  if (mode == ProjectionMode::kGumbel && !(tau > 0.0)) {
    throw std::invalid_argument("project_to_tokens: tau must be > 0");
  }
  TokenSequence out;
  out.indices.reserve(static_cast<std::size_t>(sel.length()));
  for (Eigen::Index i = 0; i < sel.length(); ++i) {
    Eigen::Index best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < sel.rows.cols(); ++j) {
      double v = sel.rows(i, j);
      if (mode == ProjectionMode::kGumbel) v += tau * rng.gumbel();
      if (v > best_v) {  // strict: ties resolve to the lowest index
        best_v = v;
        best = j;
      }
    }
    out.indices.push_back(best);
  }
  return out;
}

TokenSequence project_to_tokens(const SelectionMatrix& sel) {
  Prng unused(0);
  return project_to_tokens(sel, ProjectionMode::kArgmax, unused);
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open embeddings file: " + path.string());
  }
  Eigen::Index v = 0, d = 0;
  if (!(in >> v >> d) || v < 2 || d < 1) {
    throw std::runtime_error("embeddings file: bad header in " + path.string());
  }
  EmbeddingTable table;
  table.vocab.reserve(static_cast<std::size_t>(v));
  table.matrix.resize(v, d);
  for (Eigen::Index i = 0; i < v; ++i) {
    std::string token;
    if (!(in >> token)) {
      throw std::runtime_error("embeddings file: truncated at row " +
                               std::to_string(i));
    }
    table.vocab.push_back(token);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!(in >> table.matrix(i, j))) {
        throw std::runtime_error("embeddings file: bad value at row " +
                                 std::to_string(i));
      }
    }
  }
  table.validate();
  return table;
}

void save_embedding_table(const EmbeddingTable& table,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write embeddings file: " + path.string());
  }
  out.precision(17);
  out << table.vocab_size() << ' ' << table.dim() << '\n';
  for (Eigen::Index i = 0; i < table.vocab_size(); ++i) {
    out << table.vocab[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < table.dim(); ++j) {
      out << ' ' << table.matrix(i, j);
    }
    out << '\n';
  }
}

std::unordered_set<std::string> load_blocklist(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open blocklist file: " + path.string());
  }
  std::unordered_set<std::string> blocked;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string token;
    if (ss >> token) blocked.insert(token);
  }
  return blocked;
}

TokenSequence load_prompt(const std::filesystem::path& path,
                          const EmbeddingTable& table) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open prompt file: " + path.string());
  }
  TokenSequence p;
  std::string token;
  while (in >> token) {
    const Eigen::Index idx = table.find(token);
    if (idx < 0) {
      throw std::invalid_argument("prompt token '" + token +
                                  "' not in vocabulary");
    }
    p.indices.push_back(idx);
  }
  if (p.indices.empty()) {
    throw std::invalid_argument("prompt file is empty: " + path.string());
  }
  return p;
}

}  // namespace redmix
