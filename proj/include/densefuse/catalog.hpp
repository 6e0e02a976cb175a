#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace densefuse {

// Ordered pipeline stages. `filtered_out` is terminal.
enum class Stage { ingested, filtered_out, curated, annotated, captioned };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct ImageRecord {
  std::string id;
  std::string uri;
  std::int64_t width_px = 0;
  std::int64_t height_px = 0;
  std::string web_caption;
  Stage stage = Stage::ingested;

  bool operator==(const ImageRecord&) const = default;
};

// Moves `rec` to `next`; throws Error on a backwards move or a move out of filtered_out.
void advance_stage(ImageRecord& rec, Stage next);

struct ManifestLineError {
  std::size_t line_no = 0;  // 1-based
  std::string kind;         // "malformed" | "non_utf8"
  std::string message;
};

struct IngestResult {
  std::vector<ImageRecord> records;
  std::vector<ManifestLineError> errors;
};

bool is_valid_utf8(std::string_view s);

// Parses one manifest line. Returns nullopt and fills `err` when the line is rejected.
std::optional<ImageRecord> parse_manifest_line(std::string_view line, ManifestLineError& err);

// Throws IoError if unreadable and DuplicateIdError on the first repeated id.
IngestResult ingest_manifest(const std::filesystem::path& path);

inline std::int64_t short_edge(const ImageRecord& r) { return std::min(r.width_px, r.height_px); }

// Keep iff the short edge is at least `min_short_edge_px`.
inline bool filter_resolution(const ImageRecord& r, std::int64_t min_short_edge_px) {
  return short_edge(r) >= min_short_edge_px;
}

struct FilterResult {
  std::vector<ImageRecord> kept;
  std::vector<ImageRecord> rejected;  // stage == filtered_out
};

FilterResult filter_records(std::vector<ImageRecord> records, std::int64_t min_short_edge_px);

struct ShardSummary {
  std::filesystem::path path;
  std::size_t count = 0;
  std::uintmax_t bytes = 0;
};

ShardSummary write_shard(const std::vector<ImageRecord>& records, const std::filesystem::path& shard_path);

// Throws CorruptShardError if the trailer is missing or its count disagrees.
std::vector<ImageRecord> read_shard(const std::filesystem::path& shard_path);

// Splits `records` into `shard-NNNNN.jsonl` files of at most `shard_size` records.
std::vector<ShardSummary> write_shards(const std::vector<ImageRecord>& records,
                                       const std::filesystem::path& dir, std::size_t shard_size);

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir);

// Reads every shard in `dir` in name order; shards are read in parallel.
std::vector<ImageRecord> read_shards(const std::filesystem::path& dir, unsigned threads = 0);

// Width/height from a local PNG or JPEG header; nullopt for other formats.
std::optional<std::pair<std::int64_t, std::int64_t>> measure_image_file(const std::filesystem::path& path);

}  // namespace densefuse
