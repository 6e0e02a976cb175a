#include "densefuse/embedstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "densefuse/error.hpp"

namespace densefuse {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[6] = {'D', 'F', 'E', 'M', 'B', '1'};

double pairwise_dot(const double* a, const double* b, std::size_t n) {
  if (n <= 32) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_dot(a, b, half) + pairwise_dot(a + half, b + half, n - half);
}

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
bool get_le(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(&value, bytes, sizeof(T));
  return true;
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionMismatchError("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                                 std::to_string(b.size()));
  }
  if (a.size() >= kPairwiseThreshold) return pairwise_dot(a.data(), b.data(), a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::vector<double> normalize(std::span<const double> v, const std::string& image_id) {
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateEmbeddingError(image_id);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  return std::clamp(dot(a, b), -1.0, 1.0);
}

std::optional<std::size_t> EmbeddingStore::find(const std::string& image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::span<const double>> EmbeddingStore::lookup(const std::string& image_id) const {
  if (auto i = find(image_id)) return row(*i);
  return std::nullopt;
}

void EmbeddingStore::add(const std::string& image_id, std::span<const double> raw) {
  if (dim_ == 0) dim_ = raw.size();
  if (raw.size() != dim_) {
    throw DimensionMismatchError("embedding for \"" + image_id + "\" has dimension " + std::to_string(raw.size()) +
                                 ", store dimension is " + std::to_string(dim_));
  }
  if (index_.count(image_id)) throw DuplicateIdError(image_id);
  const auto unit = normalize(raw, image_id);
  index_.emplace(image_id, ids_.size());
  ids_.push_back(image_id);
  data_.insert(data_.end(), unit.begin(), unit.end());
}

std::vector<RawEmbedding> read_embedding_file(const fs::path& path, std::uint32_t* dim_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding file " + path.string());
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0) {
    throw FormatError(path.string() + ": bad magic (expected DFEMB1)");
  }
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  if (!get_le(in, dim) || !get_le(in, count)) throw FormatError(path.string() + ": truncated header");
  if (dim == 0) throw FormatError(path.string() + ": header dimension is zero");
  std::vector<RawEmbedding> rows;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint16_t id_len = 0;
    if (!get_le(in, id_len)) {
      throw FormatError(path.string() + ": count mismatch, header says " + std::to_string(count) +
                        " rows, file has " + std::to_string(i));
    }
    RawEmbedding row;
    row.image_id.resize(id_len);
    row.values.resize(dim);
    bool ok = static_cast<bool>(in.read(row.image_id.data(), id_len));
    for (std::uint32_t d = 0; ok && d < dim; ++d) ok = get_le(in, row.values[d]);
    if (!ok) {
      throw FormatError(path.string() + ": count mismatch, header says " + std::to_string(count) +
                        " rows, row " + std::to_string(i) + " is incomplete");
    }
    rows.push_back(std::move(row));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": count mismatch, trailing bytes after " + std::to_string(count) + " rows");
  }
  if (dim_out) *dim_out = dim;
  return rows;
}

void write_embedding_file(const fs::path& path, std::uint32_t dim, const std::vector<RawEmbedding>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write embedding file " + path.string());
  out.write(kMagic, 6);
  put_le(out, dim);
  put_le(out, static_cast<std::uint64_t>(rows.size()));
  for (const auto& r : rows) {
    if (r.values.size() != dim) throw DimensionMismatchError("row \"" + r.image_id + "\" has wrong dimension");
    if (r.image_id.size() > 0xFFFF) throw FormatError("id too long: " + r.image_id.substr(0, 32));
    put_le(out, static_cast<std::uint16_t>(r.image_id.size()));
    out.write(r.image_id.data(), static_cast<std::streamsize>(r.image_id.size()));
    for (float v : r.values) put_le(out, v);
  }
  if (!out.flush()) throw IoError("write failure on " + path.string());
}

void write_embedding_store(const fs::path& path, const EmbeddingStore& store) {
  std::vector<RawEmbedding> rows;
  rows.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto r = store.row(i);
    rows.push_back({store.id(i), std::vector<float>(r.begin(), r.end())});
  }
  write_embedding_file(path, static_cast<std::uint32_t>(store.dim()), rows);
}

EmbedIngestResult ingest_embeddings(const fs::path& path, const std::unordered_set<std::string>& catalog) {
  std::uint32_t dim = 0;
  auto rows = read_embedding_file(path, &dim);
  EmbedIngestResult out{EmbeddingStore(dim), {}};
  std::vector<double> buf(dim);
  for (const auto& r : rows) {
    if (!catalog.count(r.image_id)) {
      out.rejected_ids.push_back(r.image_id);
      continue;
    }
    std::copy(r.values.begin(), r.values.end(), buf.begin());
    out.store.add(r.image_id, buf);
  }
  return out;
}

EmbeddingStore load_embedding_store(const fs::path& path) {
  std::uint32_t dim = 0;
  auto rows = read_embedding_file(path, &dim);
  EmbeddingStore store(dim);
  std::vector<double> buf(dim);
  for (const auto& r : rows) {
    std::copy(r.values.begin(), r.values.end(), buf.begin());
    store.add(r.image_id, buf);
  }
  return store;
}

}  // namespace densefuse
