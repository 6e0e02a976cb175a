#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densefuse/captioner.hpp"
#include "densefuse/config.hpp"

namespace densefuse {

enum class PipelineStage { ingest, filter, embed, cluster, dedup, select, annotate, prompt, caption, stats };
inline constexpr std::array<PipelineStage, 10> kStages = {
    PipelineStage::ingest, PipelineStage::filter,   PipelineStage::embed,  PipelineStage::cluster,
    PipelineStage::dedup,  PipelineStage::select,   PipelineStage::annotate, PipelineStage::prompt,
    PipelineStage::caption, PipelineStage::stats};

std::string to_string(PipelineStage s);
PipelineStage pipeline_stage_from_string(const std::string& s);

// Counts reported by one stage run; `records` is the stage's primary output size.
struct StageCounts {
  std::size_t records = 0;
  std::map<std::string, std::size_t> detail;
};

// --- Individual stages (also exposed as CLI subcommands) -------------------

StageCounts stage_ingest(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                         std::size_t shard_size);
StageCounts stage_filter(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                         std::int64_t min_short_edge_px, bool verify_local = false, unsigned threads = 0);
StageCounts stage_embed(const std::filesystem::path& embeddings, const std::filesystem::path& catalog_dir,
                        const std::filesystem::path& out_store);
StageCounts stage_cluster(const std::filesystem::path& store, std::size_t k, std::uint64_t seed,
                          std::size_t max_iters, double tol, unsigned threads, const std::filesystem::path& out_model);
StageCounts stage_dedup(const std::filesystem::path& model, double epsilon, const std::filesystem::path& out,
                        unsigned threads = 0);
StageCounts stage_select(const std::filesystem::path& decisions, std::size_t top_k, RankBy rank_by,
                         const std::optional<std::filesystem::path>& catalog_dir, std::uint64_t seed,
                         const std::filesystem::path& out);
StageCounts stage_annotate(const std::filesystem::path& selected, const std::filesystem::path& catalog_dir,
                           const std::string& expert_url, const PipelineConfig& config,
                           const std::filesystem::path& out);
StageCounts stage_prompt(const std::filesystem::path& annotations, PromptKind kind, const std::filesystem::path& out);
StageCounts stage_caption(const std::filesystem::path& prompts, const std::string& engine_url,
                          const std::string& engine_model, const PipelineConfig& config,
                          const std::filesystem::path& out, bool restart, const std::atomic<bool>* cancel = nullptr,
                          BatchReport* report = nullptr);
StageCounts stage_stats(const std::filesystem::path& captions, const std::filesystem::path& annotations,
                        const std::filesystem::path& out, const std::optional<std::string>& classify_engine_url = {},
                        const std::string& engine_model = "", const PipelineConfig& config = {});

// --- Run manifest ------------------------------------------------------------

struct StageState {
  bool done = false;
  std::string artifact;
  std::size_t records = 0;
  std::map<std::string, std::size_t> detail;
};

struct RunManifest {
  std::string config_hash;
  std::map<PipelineStage, StageState> stages;
  std::string created_at;
  std::string updated_at;

  bool is_done(PipelineStage s) const;
};

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest load_manifest(const std::filesystem::path& workdir);

// Artifact location of each stage inside a work directory.
std::filesystem::path stage_artifact(const std::filesystem::path& workdir, PipelineStage s);

struct RunOptions {
  PipelineStage from = PipelineStage::ingest;
  PipelineStage to = PipelineStage::stats;
  bool force = false;
  bool restart_captions = false;
  const std::atomic<bool>* cancel = nullptr;
};

// Runs stages [from, to] in order under a work-directory lock. Done stages are
// skipped unless `force`; forcing a stage resets every later stage to pending.
// Throws ConfigError when the stored config hash differs, and rethrows stage
// failures after recording the stage as pending.
RunManifest run_pipeline(const PipelineConfig& config, const std::filesystem::path& workdir, const RunOptions& opts);

}  // namespace densefuse
