#include "densefuse/synth.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "densefuse/embedstore.hpp"
#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"

namespace densefuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<double> gaussian_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = g(rng);
  return normalize(v);
}

const std::vector<std::string> kCaptionWords = {"vintage", "poster", "beach", "sunset", "city", "street",
                                                "coffee",  "shop",   "dog",   "park",   "red",  "car",
                                                "mountain", "lake",  "modern", "kitchen", "design", "logo"};

}  // namespace

SynthFixture write_synthetic_fixture(const fs::path& dir, const SynthOptions& opts) {
  if (opts.duplicate_pairs * 2 > opts.images) throw Error("too many duplicate pairs for the image count");
  fs::create_directories(dir);
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::vector<std::vector<double>> topics;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, opts.topics); ++t) topics.push_back(gaussian_unit(opts.dim, rng));
  const double a = std::sqrt(opts.topic_share), b = std::sqrt(1.0 - opts.topic_share);

  SynthFixture fx;
  fx.manifest = dir / "manifest.jsonl";
  fx.embeddings = dir / "embeddings.dfemb";

  std::vector<json> manifest;
  std::vector<RawEmbedding> rows;
  const std::size_t base = opts.images - opts.duplicate_pairs;
  std::vector<std::vector<double>> vectors;
  for (std::size_t i = 0; i < base; ++i) {
    const auto& topic = topics[i % topics.size()];
    auto noise = gaussian_unit(opts.dim, rng);
    std::vector<double> v(opts.dim);
    for (std::size_t d = 0; d < opts.dim; ++d) v[d] = a * topic[d] + b * noise[d];
    vectors.push_back(normalize(v));
  }
  // The first `duplicate_pairs` base images each get a near copy appended at the end.
  for (std::size_t p = 0; p < opts.duplicate_pairs; ++p) {
    const auto& src = vectors[p];
    for (;;) {
      auto noise = gaussian_unit(opts.dim, rng);
      std::vector<double> v(opts.dim);
      for (std::size_t d = 0; d < opts.dim; ++d) v[d] = src[d] + 0.2 * noise[d];
      v = normalize(v);
      if (cosine_similarity(v, src) > opts.min_duplicate_sim) {
        vectors.push_back(std::move(v));
        break;
      }
    }
  }

  auto id_of = [](std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img-%06zu", i);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const bool planted = i < opts.duplicate_pairs || i >= base;
    std::int64_t w = 448 + static_cast<std::int64_t>(u(rng) * 1200);
    std::int64_t h = 448 + static_cast<std::int64_t>(u(rng) * 1200);
    if (!planted && u(rng) < opts.low_res_fraction) {
      (u(rng) < 0.5 ? w : h) = 64 + static_cast<std::int64_t>(u(rng) * 383);
    }
    std::string caption;
    if (u(rng) > 0.1) {
      const int n = 3 + static_cast<int>(u(rng) * 6);
      for (int k = 0; k < n; ++k) caption += (k ? " " : "") + kCaptionWords[rng() % kCaptionWords.size()];
    }
    const auto id = id_of(i);
    manifest.push_back({{"id", id}, {"uri", "https://example.invalid/images/" + id + ".jpg"},
                        {"width", w}, {"height", h}, {"caption", caption}});
    // Raw vectors carry an arbitrary positive scale; ingestion normalizes them.
    const double scale = 0.5 + 4.0 * u(rng);
    RawEmbedding row{id, {}};
    row.values.reserve(opts.dim);
    for (double x : vectors[i]) row.values.push_back(static_cast<float>(x * scale));
    rows.push_back(std::move(row));
  }
  for (std::size_t p = 0; p < opts.duplicate_pairs; ++p) fx.duplicate_pairs.emplace_back(id_of(p), id_of(base + p));

  jsonl::write_all(fx.manifest, manifest);
  write_embedding_file(fx.embeddings, static_cast<std::uint32_t>(opts.dim), rows);
  json pairs = json::array();
  for (const auto& [x, y] : fx.duplicate_pairs) pairs.push_back({x, y});
  std::ofstream(dir / "planted_pairs.json") << pairs.dump(2) << '\n';
  return fx;
}

}  // namespace densefuse
