#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace densefuse {

struct SynthOptions {
  std::size_t images = 1000;
  std::size_t dim = 128;
  std::size_t duplicate_pairs = 32;
  std::size_t topics = 32;
  double topic_share = 0.15;      // squared weight of the topic direction in each vector
  double min_duplicate_sim = 0.95;
  double low_res_fraction = 0.15;  // images generated below the 448 short edge
  std::uint64_t seed = 7;
};

struct SynthFixture {
  std::filesystem::path manifest;
  std::filesystem::path embeddings;
  std::vector<std::pair<std::string, std::string>> duplicate_pairs;
};

// Writes manifest.jsonl, embeddings.dfemb and planted_pairs.json into `dir`.
// Planted pairs have cosine similarity above min_duplicate_sim and both
// members clear the resolution filter.
SynthFixture write_synthetic_fixture(const std::filesystem::path& dir, const SynthOptions& opts);

}  // namespace densefuse
