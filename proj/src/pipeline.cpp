#include "densefuse/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <mutex>
#include <unordered_map>
#include <unordered_set>

#include "densefuse/catalog.hpp"
#include "densefuse/curator.hpp"
#include "densefuse/embedstore.hpp"
#include "densefuse/error.hpp"
#include "densefuse/experts.hpp"
#include "densefuse/fusion.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/parallel.hpp"
#include "densefuse/stats.hpp"

namespace densefuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, 10> kStageNames = {"ingest", "filter",   "embed",  "cluster", "dedup",
                                                     "select", "annotate", "prompt", "caption", "stats"};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void remove_shards(const fs::path& dir) {
  if (!fs::is_directory(dir)) return;
  for (const auto& p : list_shards(dir)) fs::remove(p);
}

std::unordered_map<std::string, ImageRecord> catalog_by_id(const fs::path& dir) {
  std::unordered_map<std::string, ImageRecord> out;
  for (auto& r : read_shards(dir)) {
    auto id = r.id;
    out.emplace(std::move(id), std::move(r));
  }
  return out;
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error("count conservation violated: " + what);
}

}  // namespace

std::string to_string(PipelineStage s) { return kStageNames[static_cast<std::size_t>(s)]; }

PipelineStage pipeline_stage_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kStageNames.size(); ++i) {
    if (s == kStageNames[i]) return static_cast<PipelineStage>(i);
  }
  throw ConfigError("stage", "unknown stage \"" + s + "\"");
}

// --- Stages -------------------------------------------------------------------

StageCounts stage_ingest(const fs::path& manifest, const fs::path& out_dir, std::size_t shard_size) {
  auto result = ingest_manifest(manifest);
  fs::create_directories(out_dir);
  remove_shards(out_dir);
  write_shards(result.records, out_dir, shard_size);
  std::vector<json> errors;
  for (const auto& e : result.errors) errors.push_back({{"line", e.line_no}, {"kind", e.kind}, {"message", e.message}});
  jsonl::write_all(out_dir / "errors.jsonl", errors);
  return {result.records.size(), {{"line_errors", result.errors.size()}}};
}

StageCounts stage_filter(const fs::path& in_dir, const fs::path& out_dir, std::int64_t min_short_edge_px,
                         bool verify_local, unsigned threads) {
  const auto shards = list_shards(in_dir);
  fs::create_directories(out_dir);
  remove_shards(out_dir);
  std::vector<FilterResult> results(shards.size());
  std::vector<std::size_t> remeasured(shards.size(), 0);
  parallel_for(shards.size(), resolve_threads(threads), [&](std::size_t i) {
    auto records = read_shard(shards[i]);
    if (verify_local) {
      for (auto& r : records) {
        if (auto dims = measure_image_file(r.uri); dims && (dims->first != r.width_px || dims->second != r.height_px)) {
          r.width_px = dims->first;
          r.height_px = dims->second;
          ++remeasured[i];
        }
      }
    }
    results[i] = filter_records(std::move(records), min_short_edge_px);
    if (!results[i].kept.empty()) write_shard(results[i].kept, out_dir / shards[i].filename());
  });
  std::vector<json> rejected;
  std::size_t kept = 0, total_remeasured = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    kept += results[i].kept.size();
    total_remeasured += remeasured[i];
    for (const auto& r : results[i].rejected) {
      rejected.push_back({{"id", r.id}, {"width", r.width_px}, {"height", r.height_px}});
    }
  }
  jsonl::write_all(out_dir / "rejected.jsonl", rejected);
  return {kept, {{"rejected", rejected.size()}, {"remeasured", total_remeasured}}};
}

StageCounts stage_embed(const fs::path& embeddings, const fs::path& catalog_dir, const fs::path& out_store) {
  std::unordered_set<std::string> ids;
  for (const auto& r : read_shards(catalog_dir)) ids.insert(r.id);
  auto result = ingest_embeddings(embeddings, ids);
  if (out_store.has_parent_path()) fs::create_directories(out_store.parent_path());
  write_embedding_store(out_store, result.store);
  auto report = out_store;
  report.replace_filename("rejected_ids.txt");
  jsonl::write_text_lines(report, result.rejected_ids);
  return {result.store.size(), {{"rejected", result.rejected_ids.size()}, {"dim", result.store.dim()}}};
}

StageCounts stage_cluster(const fs::path& store_path, std::size_t k, std::uint64_t seed, std::size_t max_iters,
                          double tol, unsigned threads, const fs::path& out_model) {
  const auto store = load_embedding_store(store_path);
  const auto result = kmeans_run(store, k, seed, {max_iters, tol, resolve_threads(threads)});
  if (out_model.has_parent_path()) fs::create_directories(out_model.parent_path());
  write_model(out_model, result, fs::absolute(store_path));
  return {result.assignments.size(), {{"k", k}, {"iterations", result.model.iterations_run}}};
}

StageCounts stage_dedup(const fs::path& model, double epsilon, const fs::path& out, unsigned threads) {
  fs::path store_path;
  const auto km = read_model(model, &store_path);
  const auto store = load_embedding_store(store_path);
  const auto decisions = dedup_all(store, km.assignments, epsilon, resolve_threads(threads));
  check(decisions.size() == km.assignments.size(), "dedup decisions != assignments");
  std::unordered_map<std::string, std::size_t> kept_cluster;
  for (const auto& d : decisions) {
    if (d.decision.kept) kept_cluster.emplace(d.decision.image_id, d.cluster_id);
  }
  for (const auto& d : decisions) {
    if (!d.decision.kept) {
      auto it = kept_cluster.find(*d.decision.duplicate_of);
      check(it != kept_cluster.end() && it->second == d.cluster_id, "duplicate_of must name a kept item in-cluster");
    }
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_decisions(out, decisions);
  return {kept_cluster.size(), {{"assigned", decisions.size()}, {"removed", decisions.size() - kept_cluster.size()}}};
}

StageCounts stage_select(const fs::path& decisions_path, std::size_t top_k, RankBy rank_by,
                         const std::optional<fs::path>& catalog_dir, std::uint64_t seed, const fs::path& out) {
  const auto decisions = read_decisions(decisions_path);
  std::unordered_map<std::string, std::int64_t> short_edges;
  if (rank_by == RankBy::resolution) {
    if (!catalog_dir) throw ConfigError("select_rank_by", "resolution ranking needs the catalog");
    for (const auto& r : read_shards(*catalog_dir)) short_edges[r.id] = short_edge(r);
  }
  auto score = [&](const ClusterDecision& d) -> double {
    switch (rank_by) {
      case RankBy::centroid_similarity: return d.decision.centroid_similarity;
      case RankBy::resolution: {
        auto it = short_edges.find(d.decision.image_id);
        return it == short_edges.end() ? 0.0 : static_cast<double>(it->second);
      }
      case RankBy::random: return random_rank_score(d.decision.image_id, seed);
    }
    return 0.0;
  };
  const auto selected = select_all(decisions, top_k, score);
  std::size_t kept = 0;
  std::unordered_map<std::string, std::size_t> cluster_of;
  for (const auto& d : decisions) {
    if (d.decision.kept) {
      ++kept;
      cluster_of.emplace(d.decision.image_id, d.cluster_id);
    }
  }
  std::unordered_map<std::size_t, std::size_t> per_cluster;
  for (const auto& id : selected) {
    auto it = cluster_of.find(id);
    check(it != cluster_of.end(), "selected id \"" + id + "\" is not a kept item");
    check(++per_cluster[it->second] <= top_k, "cluster exceeds top_k");
  }
  check(selected.size() <= kept, "selected > kept");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  jsonl::write_text_lines(out, selected);
  return {selected.size(), {{"kept", kept}, {"clusters", per_cluster.size()}}};
}

StageCounts stage_annotate(const fs::path& selected_path, const fs::path& catalog_dir, const std::string& expert_url,
                           const PipelineConfig& config, const fs::path& out) {
  const auto ids = jsonl::read_text_lines(selected_path);
  const auto catalog = catalog_by_id(catalog_dir);
  auto transport = make_http_transport(expert_url, std::chrono::milliseconds(config.engine_timeout_ms));
  const BackoffPolicy policy{config.backoff_initial_ms, config.backoff_factor, config.backoff_cap_ms,
                             config.expert_max_retries};
  std::vector<AnnotationBundle> bundles(ids.size());
  std::atomic<std::size_t> degraded{0};
  parallel_for(ids.size(), static_cast<unsigned>(config.expert_max_in_flight), [&](std::size_t i) {
    auto it = catalog.find(ids[i]);
    if (it == catalog.end()) throw Error("selected id \"" + ids[i] + "\" is missing from the catalog");
    ImageRecord rec = it->second;
    advance_stage(rec, Stage::curated);
    ExpertClient client(*transport, policy, config.rng_seed ^ i);
    try {
      bundles[i] = build_bundle(rec, client.annotate_image(rec), config);
    } catch (const SchemaError& e) {
      bundles[i] = build_bundle(rec, RawAnnotation{{}, {}, {}, {std::string("schema error: ") + e.what()}, 0}, config);
    }
    if (!bundles[i].warnings.empty()) ++degraded;
    validate_bundle(bundles[i], config);
  });
  std::vector<json> rows;
  rows.reserve(bundles.size());
  std::size_t with_ocr = 0;
  for (const auto& b : bundles) {
    rows.push_back(bundle_to_json(b));
    if (!b.ocr.empty()) ++with_ocr;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  jsonl::write_all(out, rows);
  return {bundles.size(), {{"with_warnings", degraded.load()}, {"with_ocr", with_ocr}}};
}

StageCounts stage_prompt(const fs::path& annotations, PromptKind kind, const fs::path& out) {
  std::vector<json> rows;
  for (const auto& j : jsonl::read_all(annotations)) rows.push_back(prompt_to_json(assemble_prompt(bundle_from_json(j), kind)));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  jsonl::write_all(out, rows);
  return {rows.size(), {}};
}

StageCounts stage_caption(const fs::path& prompts_path, const std::string& engine_url, const std::string& engine_model,
                          const PipelineConfig& config, const fs::path& out, bool restart,
                          const std::atomic<bool>* cancel, BatchReport* report_out) {
  std::vector<FusionPrompt> prompts;
  for (const auto& j : jsonl::read_all(prompts_path)) prompts.push_back(prompt_from_json(j));
  std::vector<std::pair<std::string, std::string>> headers;
  if (const char* key = std::getenv("DENSEFUSE_API_KEY"); key && *key) {
    headers.emplace_back("Authorization", std::string("Bearer ") + key);
  }
  auto transport = make_http_transport(engine_url, std::chrono::milliseconds(config.engine_timeout_ms), headers);
  EngineClient client(*transport, engine_model, engine_backoff(config));
  BatchOptions opts;
  opts.max_in_flight = static_cast<std::size_t>(config.engine_max_in_flight);
  opts.out_path = out;
  opts.restart = restart;
  opts.cancel = cancel;
  opts.seed = config.rng_seed;
  const auto report = run_batch(prompts, client, opts);
  if (report_out) *report_out = report;
  if (!report.complete) throw Error("caption batch stopped before every prompt had a record; rerun to resume");
  return {report.succeeded,
          {{"failed_permanent", report.failed_permanent},
           {"failed_transient", report.failed_transient},
           {"resumed", report.resumed},
           {"inputs", report.input_count}}};
}

StageCounts stage_stats(const fs::path& captions_path, const fs::path& annotations_path, const fs::path& out,
                        const std::optional<std::string>& classify_engine_url, const std::string& engine_model,
                        const PipelineConfig& config) {
  std::vector<CaptionRecord> records;
  for (const auto& j : jsonl::read_all(captions_path)) records.push_back(caption_from_json(j));
  std::unordered_map<std::string, AnnotationBundle> bundles;
  if (!annotations_path.empty()) {
    for (const auto& j : jsonl::read_all(annotations_path)) {
      auto b = bundle_from_json(j);
      auto id = b.image_id;
      bundles.emplace(std::move(id), std::move(b));
    }
  }
  HeuristicTagger tagger;
  CorpusAggregator agg(tagger);
  for (const auto& r : records) {
    auto it = bundles.find(r.image_id);
    agg.add(r, it == bundles.end() ? nullptr : &it->second);
  }
  if (classify_engine_url) {
    auto transport = make_http_transport(*classify_engine_url, std::chrono::milliseconds(config.engine_timeout_ms));
    EngineClient client(*transport, engine_model, engine_backoff(config));
    std::vector<std::string> labels(records.size());
    parallel_for(records.size(), static_cast<unsigned>(config.engine_max_in_flight), [&](std::size_t i) {
      std::mt19937_64 rng(config.rng_seed ^ (i * 0x9E3779B97F4A7C15ULL));
      auto it = bundles.find(records[i].image_id);
      const std::string ref = it == bundles.end() ? records[i].image_id : it->second.uri;
      labels[i] = classify_category(client, records[i].image_id, ref, rng);
    });
    for (const auto& l : labels) agg.add_category(l);
  }
  const auto report = agg.finish();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out, std::ios::binary | std::ios::trunc) << corpus_report_to_json(report).dump(2) << '\n';
  return {static_cast<std::size_t>(report.sample_count), {}};
}

// --- Manifest -----------------------------------------------------------------

bool RunManifest::is_done(PipelineStage s) const {
  auto it = stages.find(s);
  return it != stages.end() && it->second.done;
}

json manifest_to_json(const RunManifest& m) {
  json stages = json::object();
  for (auto s : kStages) {
    auto it = m.stages.find(s);
    const StageState st = it == m.stages.end() ? StageState{} : it->second;
    json j{{"state", st.done ? "done" : "pending"}};
    if (st.done) {
      j["artifact"] = st.artifact;
      j["records"] = st.records;
      j["detail"] = st.detail;
    }
    stages[to_string(s)] = std::move(j);
  }
  return {{"config_hash", m.config_hash}, {"created_at", m.created_at}, {"updated_at", m.updated_at},
          {"stages", stages}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.created_at = j.at("created_at").get<std::string>();
    m.updated_at = j.at("updated_at").get<std::string>();
    for (auto s : kStages) {
      const auto& sj = j.at("stages").at(to_string(s));
      StageState st;
      st.done = sj.at("state").get<std::string>() == "done";
      if (st.done) {
        st.artifact = sj.at("artifact").get<std::string>();
        st.records = sj.at("records").get<std::size_t>();
        st.detail = sj.value("detail", std::map<std::string, std::size_t>{});
      }
      m.stages[s] = std::move(st);
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
}

RunManifest load_manifest(const fs::path& workdir) {
  std::ifstream in(workdir / "run_manifest.json", std::ios::binary);
  if (!in) throw IoError("no run manifest in " + workdir.string());
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
}

fs::path stage_artifact(const fs::path& workdir, PipelineStage s) {
  switch (s) {
    case PipelineStage::ingest: return workdir / "ingest";
    case PipelineStage::filter: return workdir / "filter";
    case PipelineStage::embed: return workdir / "embed" / "store.dfemb";
    case PipelineStage::cluster: return workdir / "cluster" / "model.df";
    case PipelineStage::dedup: return workdir / "dedup" / "decisions.jsonl";
    case PipelineStage::select: return workdir / "select" / "selected.txt";
    case PipelineStage::annotate: return workdir / "annotate" / "annotations.jsonl";
    case PipelineStage::prompt: return workdir / "prompt" / "prompts.jsonl";
    case PipelineStage::caption: return workdir / "caption" / "captions.jsonl";
    case PipelineStage::stats: return workdir / "stats" / "report.json";
  }
  return workdir;
}

namespace {

class WorkdirLock {
 public:
  explicit WorkdirLock(const fs::path& workdir) {
    const auto path = workdir / ".densefuse.lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error("another pipeline run holds " + path.string());
    }
  }
  ~WorkdirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  int fd_ = -1;
};

void save_manifest(const fs::path& workdir, RunManifest& m) {
  m.updated_at = utc_now();
  const auto tmp = workdir / "run_manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << manifest_to_json(m).dump(2) << '\n';
    if (!out.flush()) throw IoError("cannot write run manifest");
  }
  fs::rename(tmp, workdir / "run_manifest.json");
}

void check_conservation(const RunManifest& m, PipelineStage s, const StageCounts& c, const PipelineConfig& config) {
  auto rec = [&](PipelineStage p) { return m.stages.at(p).records; };
  auto det = [&](const char* key) {
    auto it = c.detail.find(key);
    return it == c.detail.end() ? std::size_t{0} : it->second;
  };
  switch (s) {
    case PipelineStage::ingest: break;
    case PipelineStage::filter:
      check(c.records <= rec(PipelineStage::ingest), "filter output > ingest");
      check(c.records + det("rejected") == rec(PipelineStage::ingest), "filter kept + rejected != ingested");
      break;
    case PipelineStage::embed: check(c.records <= rec(PipelineStage::filter), "embedded > filtered"); break;
    case PipelineStage::cluster: check(c.records == rec(PipelineStage::embed), "assigned != embedded"); break;
    case PipelineStage::dedup:
      check(det("assigned") == rec(PipelineStage::cluster), "dedup decisions != assigned");
      check(c.records <= rec(PipelineStage::cluster), "kept > assigned");
      break;
    case PipelineStage::select:
      check(c.records <= rec(PipelineStage::dedup), "selected > kept");
      check(c.records <= static_cast<std::size_t>(config.cluster_count_k * config.select_top_k),
            "selected > k * top_k");
      break;
    case PipelineStage::annotate: check(c.records == rec(PipelineStage::select), "bundles != selected"); break;
    case PipelineStage::prompt: check(c.records == rec(PipelineStage::annotate), "prompts != bundles"); break;
    case PipelineStage::caption:
      check(c.records + det("failed_permanent") + det("failed_transient") == rec(PipelineStage::prompt),
            "captions + failures != prompts");
      break;
    case PipelineStage::stats: check(c.records == rec(PipelineStage::caption), "stats samples != captions"); break;
  }
}

StageCounts run_stage(PipelineStage s, const PipelineConfig& c, const fs::path& wd, const RunOptions& opts) {
  const auto art = [&](PipelineStage p) { return stage_artifact(wd, p); };
  const auto threads = resolve_threads(c.worker_threads);
  switch (s) {
    case PipelineStage::ingest:
      if (c.inputs.manifest.empty()) throw ConfigError("inputs.manifest", "required for the ingest stage");
      return stage_ingest(c.inputs.manifest, art(s), static_cast<std::size_t>(c.shard_size));
    case PipelineStage::filter:
      return stage_filter(art(PipelineStage::ingest), art(s), c.min_short_edge_px, c.verify_local_images, threads);
    case PipelineStage::embed:
      if (c.inputs.embeddings.empty()) throw ConfigError("inputs.embeddings", "required for the embed stage");
      return stage_embed(c.inputs.embeddings, art(PipelineStage::filter), art(s));
    case PipelineStage::cluster:
      return stage_cluster(art(PipelineStage::embed), static_cast<std::size_t>(c.cluster_count_k), c.rng_seed,
                           static_cast<std::size_t>(c.kmeans_max_iters), c.kmeans_tol, threads, art(s));
    case PipelineStage::dedup: return stage_dedup(art(PipelineStage::cluster), c.dedup_epsilon, art(s), threads);
    case PipelineStage::select:
      return stage_select(art(PipelineStage::dedup), static_cast<std::size_t>(c.select_top_k), c.select_rank_by,
                          art(PipelineStage::filter), c.rng_seed, art(s));
    case PipelineStage::annotate:
      if (c.inputs.expert_url.empty()) throw ConfigError("inputs.expert_url", "required for the annotate stage");
      return stage_annotate(art(PipelineStage::select), art(PipelineStage::filter), c.inputs.expert_url, c, art(s));
    case PipelineStage::prompt: return stage_prompt(art(PipelineStage::annotate), c.prompt_kind, art(s));
    case PipelineStage::caption:
      if (c.inputs.engine_url.empty()) throw ConfigError("inputs.engine_url", "required for the caption stage");
      return stage_caption(art(PipelineStage::prompt), c.inputs.engine_url, c.inputs.engine_model, c, art(s),
                           opts.restart_captions || opts.force, opts.cancel);
    case PipelineStage::stats: {
      std::optional<std::string> classify;
      if (c.classify_categories) classify = c.inputs.engine_url;
      return stage_stats(art(PipelineStage::caption), art(PipelineStage::annotate), art(s), classify,
                         c.inputs.engine_model, c);
    }
  }
  return {};
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& config, const fs::path& workdir, const RunOptions& opts) {
  config.validate();
  if (static_cast<int>(opts.from) > static_cast<int>(opts.to)) throw ConfigError("from", "stage range is empty");
  fs::create_directories(workdir);
  WorkdirLock lock(workdir);

  const auto hash = config_hash(config);
  RunManifest m;
  if (fs::exists(workdir / "run_manifest.json")) {
    m = load_manifest(workdir);
    if (m.config_hash != hash) {
      throw ConfigError("config_hash", "config differs from the one this work directory was started with (stored " +
                                           m.config_hash.substr(0, 12) + ", now " + hash.substr(0, 12) + ")");
    }
  } else {
    m.config_hash = hash;
    m.created_at = utc_now();
    for (auto s : kStages) m.stages[s] = {};
  }

  for (auto s : kStages) {
    if (static_cast<int>(s) < static_cast<int>(opts.from)) {
      if (!m.is_done(s)) {
        throw Error("stage " + to_string(opts.from) + " needs stage " + to_string(s) + " to be done first");
      }
      continue;
    }
    if (static_cast<int>(s) > static_cast<int>(opts.to)) break;
    if (m.is_done(s) && !opts.force) continue;

    // Everything downstream of a rerun stage is stale.
    for (auto later : kStages) {
      if (static_cast<int>(later) >= static_cast<int>(s)) m.stages[later] = {};
    }
    try {
      const auto counts = run_stage(s, config, workdir, opts);
      check_conservation(m, s, counts, config);
      m.stages[s] = {true, stage_artifact(workdir, s).string(), counts.records, counts.detail};
    } catch (...) {
      m.stages[s] = {};
      save_manifest(workdir, m);
      throw;
    }
    save_manifest(workdir, m);
  }
  save_manifest(workdir, m);
  return m;
}

}  // namespace densefuse
