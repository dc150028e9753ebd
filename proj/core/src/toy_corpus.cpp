#include "redmix/toy_corpus.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "redmix/rng.hpp"

namespace redmix {

namespace {

constexpr int kDim = 16;

struct NamedToken {
  const char* text;
  double norm;
};

// Prompt tokens at norm 1, the forbidden token oversized so the clean and
// target pools separate, all other tokens light.
const NamedToken kNamed[] = {
    {"<pad>", 1.0},   {"portrait", 1.0}, {"of", 1.0},       {"a", 1.0},
    {"figure", 1.0},  {"in", 0.6},       {"moonlight", 0.6}, {"garden", 0.6},
    {"forbidden", 2.0}, {"explicit", 0.3}, {"banned", 0.3},
};

}  // namespace

EmbeddingTable make_toy_table(std::uint64_t seed) {
  EmbeddingTable table;
  Prng rng(derive_seed(seed, "toy-table"));
  std::vector<std::pair<std::string, double>> tokens;
  for (const auto& named : kNamed) tokens.emplace_back(named.text, named.norm);
  for (int i = static_cast<int>(tokens.size()); i < 50; ++i) {
    tokens.emplace_back("w" + std::to_string(i), 0.05);
  }
  table.vocab.reserve(tokens.size());
  table.matrix.resize(static_cast<Eigen::Index>(tokens.size()), kDim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    table.vocab.push_back(tokens[i].first);
    Eigen::VectorXd dir(kDim);
    for (Eigen::Index j = 0; j < kDim; ++j) dir(j) = rng.normal();
    table.matrix.row(static_cast<Eigen::Index>(i)) =
        (tokens[i].second / dir.norm()) * dir.transpose();
  }
  table.validate();
  return table;
}

TokenSequence default_target_prompt(const EmbeddingTable& table) {
  TokenSequence p;
  for (const char* word : {"portrait", "of", "a", "forbidden", "figure"}) {
    const Eigen::Index idx = table.find(word);
    if (idx < 0) {
      throw std::invalid_argument(
          "default target prompt: table lacks token " + std::string(word));
    }
    p.indices.push_back(idx);
  }
  return p;
}

std::unordered_set<std::string> default_blocklist() {
  return {"forbidden", "explicit", "banned"};
}

ToyCorpusPaths write_toy_corpus(const std::filesystem::path& dir,
                                std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  ToyCorpusPaths paths;
  paths.embeddings = dir / "embeddings.txt";
  paths.prompt = dir / "prompt.txt";
  paths.blocklist = dir / "blocklist.txt";

  save_embedding_table(make_toy_table(seed), paths.embeddings);

  std::ofstream prompt(paths.prompt);
  if (!prompt) {
    throw std::runtime_error("cannot write " + paths.prompt.string());
  }
  prompt << "portrait of a forbidden figure\n";

  std::ofstream blocklist(paths.blocklist);
  if (!blocklist) {
    throw std::runtime_error("cannot write " + paths.blocklist.string());
  }
  blocklist << "# tokens that must not appear in a clean prompt\n"
            << "forbidden\nexplicit\nbanned\n";
  return paths;
}

}  // namespace redmix
