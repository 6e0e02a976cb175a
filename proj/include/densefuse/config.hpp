#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace densefuse {

enum class RankBy { centroid_similarity, resolution, random };
enum class PromptKind { meta_gpt4v, engine };

std::string to_string(RankBy r);
std::string to_string(PromptKind k);
RankBy rank_by_from_string(const std::string& s);
PromptKind prompt_kind_from_string(const std::string& s);

// Locations of external inputs and services for a full `run`.
struct RunInputs {
  std::string manifest;
  std::string embeddings;
  std::string expert_url;
  std::string engine_url;
  std::string engine_model = "caption-engine";
};

struct PipelineConfig {
  // Data processing.
  std::int64_t min_short_edge_px = 448;
  std::int64_t cluster_count_k = 50'000;
  double dedup_epsilon = 0.4;
  std::int64_t select_top_k = 20;
  RankBy select_rank_by = RankBy::centroid_similarity;
  std::int64_t kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;
  std::int64_t shard_size = 10'000;
  std::int64_t worker_threads = 0;  // 0: hardware concurrency
  bool verify_local_images = false;  // re-measure local files during the filter stage

  // Expert post-processing.
  double closed_set_conf_threshold = 0.5;
  double open_set_conf_threshold = 0.35;
  std::int64_t max_boxes_per_image = 20;
  double small_box_area_frac = 0.02;
  double small_box_quota_frac = 0.3;
  std::int64_t expert_max_in_flight = 4;
  std::int64_t expert_max_retries = 2;

  // Caption engine client.
  PromptKind prompt_kind = PromptKind::engine;
  std::int64_t engine_max_in_flight = 16;
  std::int64_t engine_max_retries = 3;
  std::int64_t engine_timeout_ms = 120'000;
  std::int64_t backoff_initial_ms = 500;
  double backoff_factor = 2.0;
  std::int64_t backoff_cap_ms = 30'000;

  bool classify_categories = false;  // stats stage asks the engine for an image category

  std::uint64_t rng_seed = 0;

  RunInputs inputs;

  // Throws ConfigError naming the first out-of-range key.
  void validate() const;
};

// Strict parse: unknown keys and type mismatches throw ConfigError with the
// dotted key path. Missing keys take their defaults.
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& c);

// Reads a JSON config file. An empty (or whitespace-only) file means all defaults.
PipelineConfig load_config(const std::filesystem::path& path);

// Hex SHA-256 of the canonical JSON rendering of the resolved config.
std::string config_hash(const PipelineConfig& c);

}  // namespace densefuse
