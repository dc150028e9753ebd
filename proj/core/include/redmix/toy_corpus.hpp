// Built-in corpus for tests, verification and self-contained CLI runs:
// fifty tokens over sixteen dimensions with a reserved pad token, a small
// blocklist and a stock five-token target prompt.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>

#include "redmix/embedding.hpp"

namespace redmix {

// |V| = 50, d = 16. Norms are deliberately uneven: the prompt tokens carry
// most of the table's mass so the relaxed fit's residual variance stays
// small relative to the anchor embedding.
EmbeddingTable make_toy_table(std::uint64_t seed);

// "portrait of a forbidden figure".
TokenSequence default_target_prompt(const EmbeddingTable& table);

std::unordered_set<std::string> default_blocklist();

struct ToyCorpusPaths {
  std::filesystem::path embeddings;
  std::filesystem::path prompt;
  std::filesystem::path blocklist;
};

// Writes embeddings.txt, prompt.txt and blocklist.txt into dir.
ToyCorpusPaths write_toy_corpus(const std::filesystem::path& dir,
                                std::uint64_t seed);

}  // namespace redmix
