#include "densefuse/config.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <openssl/sha.h>

#include "densefuse/error.hpp"

namespace densefuse {

using nlohmann::json;

std::string to_string(RankBy r) {
  switch (r) {
    case RankBy::centroid_similarity: return "centroid_similarity";
    case RankBy::resolution: return "resolution";
    case RankBy::random: return "random";
  }
  return "centroid_similarity";
}

std::string to_string(PromptKind k) {
  return k == PromptKind::meta_gpt4v ? "meta_gpt4v" : "engine";
}

RankBy rank_by_from_string(const std::string& s) {
  if (s == "centroid_similarity") return RankBy::centroid_similarity;
  if (s == "resolution") return RankBy::resolution;
  if (s == "random") return RankBy::random;
  throw ConfigError("select_rank_by", "unknown ranking \"" + s + "\"");
}

PromptKind prompt_kind_from_string(const std::string& s) {
  if (s == "meta_gpt4v" || s == "meta") return PromptKind::meta_gpt4v;
  if (s == "engine") return PromptKind::engine;
  throw ConfigError("prompt_kind", "unknown prompt kind \"" + s + "\"");
}

namespace {

void require(bool ok, const char* key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

// Reads `key` from `obj` into `out` if present, checking the JSON type.
class StrictReader {
 public:
  StrictReader(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  void read(const char* key, std::int64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(path(key), "expected an integer");
      out = v->get<std::int64_t>();
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::uint64_t>();
      } else if (v->is_number_integer()) {
        out = static_cast<std::uint64_t>(v->get<std::int64_t>());
      } else {
        throw ConfigError(path(key), "expected an integer");
      }
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key), "expected a boolean");
      out = v->get<bool>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(path(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename Fn>
  void read_with(const char* key, Fn&& fn) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "expected a string");
      try {
        fn(v->get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(path(key), e.what());
      }
    }
  }
  const json* sub(const char* key) { return take(key); }
  std::string path(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key().c_str()), "unknown key");
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace

void PipelineConfig::validate() const {
  require(min_short_edge_px >= 1, "min_short_edge_px", "must be a positive integer");
  require(cluster_count_k >= 1, "cluster_count_k", "must be a positive integer");
  require(dedup_epsilon > 0.0 && dedup_epsilon < 1.0, "dedup_epsilon", "must lie in (0, 1)");
  require(select_top_k >= 1, "select_top_k", "must be a positive integer");
  require(kmeans_max_iters >= 1, "kmeans_max_iters", "must be a positive integer");
  require(kmeans_tol >= 0.0, "kmeans_tol", "must be non-negative");
  require(shard_size >= 1, "shard_size", "must be a positive integer");
  require(worker_threads >= 0, "worker_threads", "must be non-negative");
  require(closed_set_conf_threshold >= 0.0 && closed_set_conf_threshold <= 1.0,
          "closed_set_conf_threshold", "must lie in [0, 1]");
  require(open_set_conf_threshold >= 0.0 && open_set_conf_threshold <= 1.0,
          "open_set_conf_threshold", "must lie in [0, 1]");
  require(max_boxes_per_image >= 1, "max_boxes_per_image", "must be a positive integer");
  require(small_box_area_frac > 0.0 && small_box_area_frac < 1.0, "small_box_area_frac",
          "must lie in (0, 1)");
  require(small_box_quota_frac >= 0.0 && small_box_quota_frac <= 1.0, "small_box_quota_frac",
          "must lie in [0, 1]");
  require(expert_max_in_flight >= 1, "expert_max_in_flight", "must be a positive integer");
  require(expert_max_retries >= 0, "expert_max_retries", "must be non-negative");
  require(engine_max_in_flight >= 1, "engine_max_in_flight", "must be a positive integer");
  require(engine_max_retries >= 0, "engine_max_retries", "must be non-negative");
  require(engine_timeout_ms >= 1, "engine_timeout_ms", "must be a positive integer");
  require(backoff_initial_ms >= 0, "backoff_initial_ms", "must be non-negative");
  require(backoff_factor >= 1.0, "backoff_factor", "must be at least 1");
  require(backoff_cap_ms >= 0, "backoff_cap_ms", "must be non-negative");
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  StrictReader r(j, "");
  r.read("min_short_edge_px", c.min_short_edge_px);
  r.read("cluster_count_k", c.cluster_count_k);
  r.read("dedup_epsilon", c.dedup_epsilon);
  r.read("select_top_k", c.select_top_k);
  r.read_with("select_rank_by", [&](const std::string& s) { c.select_rank_by = rank_by_from_string(s); });
  r.read("kmeans_max_iters", c.kmeans_max_iters);
  r.read("kmeans_tol", c.kmeans_tol);
  r.read("shard_size", c.shard_size);
  r.read("worker_threads", c.worker_threads);
  r.read("verify_local_images", c.verify_local_images);
  r.read("closed_set_conf_threshold", c.closed_set_conf_threshold);
  r.read("open_set_conf_threshold", c.open_set_conf_threshold);
  r.read("max_boxes_per_image", c.max_boxes_per_image);
  r.read("small_box_area_frac", c.small_box_area_frac);
  r.read("small_box_quota_frac", c.small_box_quota_frac);
  r.read("expert_max_in_flight", c.expert_max_in_flight);
  r.read("expert_max_retries", c.expert_max_retries);
  r.read_with("prompt_kind", [&](const std::string& s) { c.prompt_kind = prompt_kind_from_string(s); });
  r.read("engine_max_in_flight", c.engine_max_in_flight);
  r.read("engine_max_retries", c.engine_max_retries);
  r.read("engine_timeout_ms", c.engine_timeout_ms);
  r.read("backoff_initial_ms", c.backoff_initial_ms);
  r.read("backoff_factor", c.backoff_factor);
  r.read("backoff_cap_ms", c.backoff_cap_ms);
  r.read("classify_categories", c.classify_categories);
  r.read("rng_seed", c.rng_seed);
  if (const json* in = r.sub("inputs")) {
    StrictReader ir(*in, "inputs");
    ir.read("manifest", c.inputs.manifest);
    ir.read("embeddings", c.inputs.embeddings);
    ir.read("expert_url", c.inputs.expert_url);
    ir.read("engine_url", c.inputs.engine_url);
    ir.read("engine_model", c.inputs.engine_model);
    ir.finish();
  }
  r.finish();
  c.validate();
  return c;
}

json config_to_json(const PipelineConfig& c) {
  return json{
      {"min_short_edge_px", c.min_short_edge_px},
      {"cluster_count_k", c.cluster_count_k},
      {"dedup_epsilon", c.dedup_epsilon},
      {"select_top_k", c.select_top_k},
      {"select_rank_by", to_string(c.select_rank_by)},
      {"kmeans_max_iters", c.kmeans_max_iters},
      {"kmeans_tol", c.kmeans_tol},
      {"shard_size", c.shard_size},
      {"worker_threads", c.worker_threads},
      {"verify_local_images", c.verify_local_images},
      {"closed_set_conf_threshold", c.closed_set_conf_threshold},
      {"open_set_conf_threshold", c.open_set_conf_threshold},
      {"max_boxes_per_image", c.max_boxes_per_image},
      {"small_box_area_frac", c.small_box_area_frac},
      {"small_box_quota_frac", c.small_box_quota_frac},
      {"expert_max_in_flight", c.expert_max_in_flight},
      {"expert_max_retries", c.expert_max_retries},
      {"prompt_kind", to_string(c.prompt_kind)},
      {"engine_max_in_flight", c.engine_max_in_flight},
      {"engine_max_retries", c.engine_max_retries},
      {"engine_timeout_ms", c.engine_timeout_ms},
      {"backoff_initial_ms", c.backoff_initial_ms},
      {"backoff_factor", c.backoff_factor},
      {"backoff_cap_ms", c.backoff_cap_ms},
      {"classify_categories", c.classify_categories},
      {"rng_seed", c.rng_seed},
      {"inputs",
       {{"manifest", c.inputs.manifest},
        {"embeddings", c.inputs.embeddings},
        {"expert_url", c.inputs.expert_url},
        {"engine_url", c.inputs.engine_url},
        {"engine_model", c.inputs.engine_model}}},
  };
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    PipelineConfig c;
    c.validate();
    return c;
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const PipelineConfig& c) {
  const std::string canon = config_to_json(c).dump();
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(canon.data()), canon.size(), digest);
  std::ostringstream os;
  for (unsigned char b : digest) os << std::hex << std::setw(2) << std::setfill('0') << int(b);
  return os.str();
}

}  // namespace densefuse
