#include "densefuse/catalog.hpp"

#include <array>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/parallel.hpp"

namespace densefuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr std::array<const char*, 5> kStageNames = {"ingested", "filtered_out", "curated", "annotated",
                                                    "captioned"};
constexpr const char* kTrailerKey = "__shard_count";
}  // namespace

std::string to_string(Stage s) { return kStageNames[static_cast<std::size_t>(s)]; }

Stage stage_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kStageNames.size(); ++i) {
    if (s == kStageNames[i]) return static_cast<Stage>(i);
  }
  throw FormatError("unknown stage \"" + s + "\"");
}

void advance_stage(ImageRecord& rec, Stage next) {
  if (rec.stage == Stage::filtered_out && next != Stage::filtered_out) {
    throw Error("record \"" + rec.id + "\" was filtered out and cannot move to " + to_string(next));
  }
  if (static_cast<int>(next) < static_cast<int>(rec.stage)) {
    throw Error("record \"" + rec.id + "\" cannot move back from " + to_string(rec.stage) + " to " +
                to_string(next));
  }
  rec.stage = next;
}

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  const std::size_t n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong encodings, surrogates, and out-of-range scalars.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

std::optional<ImageRecord> parse_manifest_line(std::string_view line, ManifestLineError& err) {
  err.kind = "malformed";
  if (!is_valid_utf8(line)) {
    err.kind = "non_utf8";
    err.message = "line is not valid UTF-8";
    return std::nullopt;
  }
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    err.message = std::string("invalid JSON: ") + e.what();
    return std::nullopt;
  }
  if (!j.is_object()) {
    err.message = "expected a JSON object";
    return std::nullopt;
  }
  ImageRecord rec;
  auto str_field = [&](const char* key, std::string& out, bool required) {
    auto it = j.find(key);
    if (it == j.end()) {
      if (required) err.message = std::string("missing key \"") + key + "\"";
      return !required;
    }
    if (!it->is_string()) {
      err.message = std::string("key \"") + key + "\" must be a string";
      return false;
    }
    out = it->get<std::string>();
    return true;
  };
  auto dim_field = [&](const char* key, std::int64_t& out) {
    auto it = j.find(key);
    if (it == j.end()) {
      err.message = std::string("missing key \"") + key + "\"";
      return false;
    }
    if (!it->is_number_integer() || it->get<std::int64_t>() < 1) {
      err.message = std::string("key \"") + key + "\" must be a positive integer";
      return false;
    }
    out = it->get<std::int64_t>();
    return true;
  };
  if (!str_field("id", rec.id, true) || !str_field("uri", rec.uri, true) || !dim_field("width", rec.width_px) ||
      !dim_field("height", rec.height_px) || !str_field("caption", rec.web_caption, false)) {
    return std::nullopt;
  }
  if (rec.id.empty()) {
    err.message = "empty id";
    return std::nullopt;
  }
  rec.stage = Stage::ingested;
  return rec;
}

IngestResult ingest_manifest(const fs::path& path) {
  IngestResult out;
  std::unordered_set<std::string> seen;
  jsonl::for_each_line(path, [&](std::size_t line_no, const std::string& line) {
    ManifestLineError err;
    err.line_no = line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) {
      err.kind = "malformed";
      err.message = "empty line";
      out.errors.push_back(std::move(err));
      return;
    }
    auto rec = parse_manifest_line(line, err);
    if (!rec) {
      out.errors.push_back(std::move(err));
      return;
    }
    if (!seen.insert(rec->id).second) throw DuplicateIdError(rec->id);
    out.records.push_back(std::move(*rec));
  });
  return out;
}

FilterResult filter_records(std::vector<ImageRecord> records, std::int64_t min_short_edge_px) {
  FilterResult out;
  for (auto& r : records) {
    if (filter_resolution(r, min_short_edge_px)) {
      out.kept.push_back(std::move(r));
    } else {
      advance_stage(r, Stage::filtered_out);
      out.rejected.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

json record_to_json(const ImageRecord& r) {
  return json{{"id", r.id},
              {"uri", r.uri},
              {"width", r.width_px},
              {"height", r.height_px},
              {"caption", r.web_caption},
              {"stage", to_string(r.stage)}};
}

}  // namespace

ShardSummary write_shard(const std::vector<ImageRecord>& records, const fs::path& shard_path) {
  if (records.empty()) throw Error("refusing to write an empty shard: " + shard_path.string());
  {
    std::ofstream out(shard_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write shard " + shard_path.string());
    for (const auto& r : records) out << jsonl::dump_line(record_to_json(r));
    out << jsonl::dump_line(json{{kTrailerKey, records.size()}});
    if (!out.flush()) throw IoError("write failure on shard " + shard_path.string());
  }
  return ShardSummary{shard_path, records.size(), fs::file_size(shard_path)};
}

std::vector<ImageRecord> read_shard(const fs::path& shard_path) {
  std::vector<ImageRecord> records;
  std::optional<std::size_t> trailer;
  const std::string where = shard_path.string();
  jsonl::for_each_line(shard_path, [&](std::size_t line_no, const std::string& line) {
    if (line.empty()) return;
    if (trailer) throw CorruptShardError(where + ": data after trailer at line " + std::to_string(line_no));
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw CorruptShardError(where + ": unparsable line " + std::to_string(line_no));
    }
    if (j.is_object() && j.size() == 1 && j.contains(kTrailerKey)) {
      if (!j[kTrailerKey].is_number_unsigned()) throw CorruptShardError(where + ": bad trailer");
      trailer = j[kTrailerKey].get<std::size_t>();
      return;
    }
    try {
      ImageRecord r;
      r.id = j.at("id").get<std::string>();
      r.uri = j.at("uri").get<std::string>();
      r.width_px = j.at("width").get<std::int64_t>();
      r.height_px = j.at("height").get<std::int64_t>();
      r.web_caption = j.at("caption").get<std::string>();
      r.stage = stage_from_string(j.at("stage").get<std::string>());
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw CorruptShardError(where + ": bad record at line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  if (!trailer) throw CorruptShardError(where + ": missing trailer (truncated shard?)");
  if (*trailer != records.size()) {
    throw CorruptShardError(where + ": trailer says " + std::to_string(*trailer) + " records, found " +
                            std::to_string(records.size()));
  }
  return records;
}

std::vector<ShardSummary> write_shards(const std::vector<ImageRecord>& records, const fs::path& dir,
                                       std::size_t shard_size) {
  if (shard_size == 0) throw Error("shard size must be positive");
  fs::create_directories(dir);
  std::vector<ShardSummary> out;
  for (std::size_t start = 0, idx = 0; start < records.size(); start += shard_size, ++idx) {
    const std::size_t end = std::min(records.size(), start + shard_size);
    std::vector<ImageRecord> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                   records.begin() + static_cast<std::ptrdiff_t>(end));
    char name[32];
    std::snprintf(name, sizeof(name), "shard-%05zu.jsonl", idx);
    out.push_back(write_shard(chunk, dir / name));
  }
  return out;
}

std::vector<fs::path> list_shards(const fs::path& dir) {
  std::vector<fs::path> shards;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("shard-", 0) == 0 && e.path().extension() == ".jsonl") {
      shards.push_back(e.path());
    }
  }
  std::sort(shards.begin(), shards.end());
  return shards;
}

std::vector<ImageRecord> read_shards(const fs::path& dir, unsigned threads) {
  const auto shards = list_shards(dir);
  std::vector<std::vector<ImageRecord>> parts(shards.size());
  parallel_for(shards.size(), resolve_threads(threads), [&](std::size_t i) { parts[i] = read_shard(shards[i]); });
  std::vector<ImageRecord> all;
  for (auto& p : parts) std::move(p.begin(), p.end(), std::back_inserter(all));
  return all;
}

std::optional<std::pair<std::int64_t, std::int64_t>> measure_image_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<unsigned char> head(64 * 1024);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  auto be16 = [&](std::size_t p) { return (std::int64_t(head[p]) << 8) | head[p + 1]; };
  auto be32 = [&](std::size_t p) {
    return (std::int64_t(head[p]) << 24) | (std::int64_t(head[p + 1]) << 16) | (std::int64_t(head[p + 2]) << 8) |
           head[p + 3];
  };
  static constexpr unsigned char kPng[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (head.size() >= 24 && std::equal(kPng, kPng + 8, head.begin())) {
    return std::make_pair(be32(16), be32(20));
  }
  if (head.size() >= 4 && head[0] == 0xFF && head[1] == 0xD8) {
    std::size_t p = 2;
    while (p + 9 < head.size()) {
      if (head[p] != 0xFF) return std::nullopt;
      const unsigned char marker = head[p + 1];
      if (marker == 0xFF) {
        ++p;
        continue;
      }
      const bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
      if (sof) return std::make_pair(be16(p + 7), be16(p + 5));
      p += 2 + static_cast<std::size_t>(be16(p + 2));
    }
  }
  return std::nullopt;
}

}  // namespace densefuse
