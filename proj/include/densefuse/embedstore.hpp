#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace densefuse {

// Dimension at which dot products and norms switch to pairwise summation.
inline constexpr std::size_t kPairwiseThreshold = 256;

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

// v / ||v||. Throws DegenerateEmbeddingError(image_id) for a zero vector.
std::vector<double> normalize(std::span<const double> v, const std::string& image_id = "");

// Dot product of two unit vectors, clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Immutable-after-build table of unit vectors with id lookup. Rows are stored
// contiguously so a row is a span into one buffer.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }

  const std::string& id(std::size_t row) const { return ids_.at(row); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  std::optional<std::size_t> find(const std::string& image_id) const;
  std::optional<std::span<const double>> lookup(const std::string& image_id) const;

  // Normalizes and appends. Throws on dimension mismatch, zero vector or repeated id.
  void add(const std::string& image_id, std::span<const double> raw);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RawEmbedding {
  std::string image_id;
  std::vector<float> values;
};

// Binary "DFEMB1" file: u32 dim, u64 count, then (u16 id length, id, dim x f32) rows, little-endian.
std::vector<RawEmbedding> read_embedding_file(const std::filesystem::path& path, std::uint32_t* dim_out = nullptr);
void write_embedding_file(const std::filesystem::path& path, std::uint32_t dim,
                          const std::vector<RawEmbedding>& rows);
void write_embedding_store(const std::filesystem::path& path, const EmbeddingStore& store);

struct EmbedIngestResult {
  EmbeddingStore store;
  std::vector<std::string> rejected_ids;  // ids absent from the catalog, file order
};

// Reads and normalizes every row whose id is in `catalog`; others are reported.
EmbedIngestResult ingest_embeddings(const std::filesystem::path& path,
                                    const std::unordered_set<std::string>& catalog);

// Loads a store with no catalog check.
EmbeddingStore load_embedding_store(const std::filesystem::path& path);

}  // namespace densefuse
