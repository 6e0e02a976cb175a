#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "densefuse/embedstore.hpp"

namespace densefuse {

struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, row-major, unit rows
  std::size_t iterations_run = 0;
  double final_objective = 0.0;   // sum over points of (1 - similarity to assigned centroid)
  std::vector<double> objective_history;  // one entry per assignment pass, starting with the initial one

  std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }
};

struct Assignment {
  std::string image_id;
  std::size_t cluster_id = 0;
  double centroid_similarity = 0.0;
};

struct KMeansResult {
  ClusterModel model;
  std::vector<Assignment> assignments;  // store row order
};

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;
  unsigned threads = 1;
};

// k-means++ seeding with weights (1 - best similarity), i.e. proportional to
// squared Euclidean distance on the unit sphere. Returns k distinct store rows.
std::vector<std::size_t> kmeans_init(const EmbeddingStore& store, std::size_t k, std::uint64_t seed);

// Spherical Lloyd iterations. Results are bit-identical for any thread count.
KMeansResult kmeans_run(const EmbeddingStore& store, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& opts = {});

// Most similar centroid for `v`; ties go to the lowest cluster id.
std::pair<std::size_t, double> nearest_centroid(const ClusterModel& model, std::span<const double> v);

struct DedupMember {
  std::string image_id;
  std::span<const double> vector;
  double centroid_similarity = 0.0;
};

struct DedupDecision {
  std::string image_id;
  bool kept = true;
  std::optional<std::string> duplicate_of;
  double centroid_similarity = 0.0;
};

// Greedy within-cluster dedup. Members are visited least-central first (ties by
// id); an item is kept iff its similarity to every kept item is below
// 1 - epsilon. Decisions come back in visit order.
std::vector<DedupDecision> semdedup_cluster(std::vector<DedupMember> members, double epsilon);

struct RankedMember {
  std::string image_id;
  double score = 0.0;
};

// The min(top_k, n) highest-scoring ids, descending; ties by id.
std::vector<std::string> select_top_k(std::vector<RankedMember> members, std::size_t top_k);

// Decision row as persisted in decisions.jsonl.
struct ClusterDecision {
  std::size_t cluster_id = 0;
  DedupDecision decision;
};

// Runs semdedup per cluster (in parallel); output ordered by cluster id then visit order.
std::vector<ClusterDecision> dedup_all(const EmbeddingStore& store, const std::vector<Assignment>& assignments,
                                       double epsilon, unsigned threads = 1);

// Per-cluster top-k over kept rows. `score` maps a kept decision to its ranking score.
std::vector<std::string> select_all(const std::vector<ClusterDecision>& decisions, std::size_t top_k,
                                    const std::function<double(const ClusterDecision&)>& score);

// Deterministic pseudo-random score in [0, 1) for the "random" ranking.
double random_rank_score(const std::string& image_id, std::uint64_t seed);

void write_model(const std::filesystem::path& path, const KMeansResult& result,
                 const std::filesystem::path& store_path);
KMeansResult read_model(const std::filesystem::path& path, std::filesystem::path* store_path = nullptr);

void write_decisions(const std::filesystem::path& path, const std::vector<ClusterDecision>& decisions);
std::vector<ClusterDecision> read_decisions(const std::filesystem::path& path);

}  // namespace densefuse
