#include <csignal>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "densefuse/captioner.hpp"
#include "densefuse/config.hpp"
#include "densefuse/error.hpp"
#include "densefuse/mock_services.hpp"
#include "densefuse/parallel.hpp"
#include "densefuse/pipeline.hpp"
#include "densefuse/synth.hpp"

namespace df = densefuse;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_cancel{false};

void on_signal(int) { g_cancel.store(true); }

void print_counts(const std::string& stage, const df::StageCounts& c) {
  std::cerr << stage << ": " << c.records << " records";
  for (const auto& [k, v] : c.detail) std::cerr << ", " << k << "=" << v;
  std::cerr << '\n';
}

df::PipelineConfig config_or_default(const std::string& path) {
  return path.empty() ? df::PipelineConfig{} : df::load_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"densefuse: dense image caption corpus pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "JSON config (defaults apply when omitted)");

  // ingest
  std::string manifest, out;
  std::size_t shard_size = 10'000;
  auto* ingest = app.add_subcommand("ingest", "Validate a manifest and write sharded catalog files");
  ingest->add_option("--manifest", manifest)->required();
  ingest->add_option("--out", out)->required();
  ingest->add_option("--shard-size", shard_size);

  // filter
  std::string in_dir;
  std::int64_t min_edge = 448;
  bool verify_local = false;
  auto* filter = app.add_subcommand("filter", "Drop images whose short edge is below the minimum");
  filter->add_option("--in", in_dir)->required();
  filter->add_option("--out", out)->required();
  filter->add_option("--min-short-edge", min_edge);
  filter->add_flag("--verify-local", verify_local, "Re-measure local image files");

  // embed-ingest
  std::string emb_file, catalog;
  auto* embed = app.add_subcommand("embed-ingest", "Load and normalize embeddings for catalog images");
  embed->add_option("--file", emb_file)->required();
  embed->add_option("--catalog", catalog)->required();
  embed->add_option("--out", out)->required();

  // cluster
  std::string store;
  std::size_t k = 50'000, max_iters = 100;
  std::uint64_t seed = 0;
  double tol = 1e-6;
  unsigned threads = 0;
  auto* cluster = app.add_subcommand("cluster", "Spherical k-means over an embedding store");
  cluster->add_option("--store", store)->required();
  cluster->add_option("--k", k);
  cluster->add_option("--seed", seed);
  cluster->add_option("--max-iters", max_iters);
  cluster->add_option("--tol", tol);
  cluster->add_option("--threads", threads);
  cluster->add_option("--out", out)->required();

  // dedup
  std::string model;
  double epsilon = 0.4;
  auto* dedup = app.add_subcommand("dedup", "Within-cluster semantic deduplication");
  dedup->add_option("--model", model)->required();
  dedup->add_option("--epsilon", epsilon);
  dedup->add_option("--threads", threads);
  dedup->add_option("--out", out)->required();

  // select
  std::string decisions, rank_by = "centroid_similarity";
  std::size_t top_k = 20;
  auto* select = app.add_subcommand("select", "Keep the top-k survivors of each cluster");
  select->add_option("--decisions", decisions)->required();
  select->add_option("--top-k", top_k);
  select->add_option("--rank-by", rank_by)->check(CLI::IsMember({"centroid_similarity", "resolution", "random"}));
  select->add_option("--catalog", catalog, "Catalog directory (needed for --rank-by resolution)");
  select->add_option("--seed", seed);
  select->add_option("--out", out)->required();

  // annotate
  std::string selected, expert_url;
  auto* annotate = app.add_subcommand("annotate", "Query the vision experts for each selected image");
  annotate->add_option("--selected", selected)->required();
  annotate->add_option("--catalog", catalog)->required();
  annotate->add_option("--expert-url", expert_url)->required();
  annotate->add_option("--out", out)->required();

  // prompt
  std::string annotations, kind = "engine";
  auto* prompt = app.add_subcommand("prompt", "Assemble fusion prompts from annotation bundles");
  prompt->add_option("--annotations", annotations)->required();
  prompt->add_option("--kind", kind)->check(CLI::IsMember({"engine", "meta_gpt4v"}));
  prompt->add_option("--out", out)->required();

  // caption
  std::string prompts, engine_url, engine_model;
  std::int64_t max_in_flight = 0;
  bool restart = false;
  auto* caption = app.add_subcommand("caption", "Caption every prompt through the engine endpoint");
  caption->add_option("--prompts", prompts)->required();
  caption->add_option("--engine-url", engine_url)->required();
  caption->add_option("--engine-model", engine_model);
  caption->add_option("--max-in-flight", max_in_flight);
  caption->add_flag("--restart", restart, "Discard existing outputs instead of resuming");
  caption->add_option("--out", out)->required();

  // stats
  std::string captions, classify_url;
  auto* stats = app.add_subcommand("stats", "Corpus statistics over caption records");
  stats->add_option("--captions", captions)->required();
  stats->add_option("--annotations", annotations);
  stats->add_option("--classify-url", classify_url, "Engine endpoint for image-category classification");
  stats->add_option("--engine-model", engine_model);
  stats->add_option("--out", out)->required();

  // run
  std::string workdir, from = "ingest", to = "stats";
  bool force = false;
  auto* run = app.add_subcommand("run", "Run a range of pipeline stages inside a work directory");
  run->add_option("--workdir", workdir)->required();
  run->add_option("--from", from);
  run->add_option("--to", to);
  run->add_flag("--force", force);
  run->add_flag("--restart-captions", restart);

  // synth
  df::SynthOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Write a synthetic manifest and embedding fixture");
  synth->add_option("--out", out)->required();
  synth->add_option("--images", synth_opts.images);
  synth->add_option("--dim", synth_opts.dim);
  synth->add_option("--pairs", synth_opts.duplicate_pairs);
  synth->add_option("--seed", synth_opts.seed);

  // mock servers
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* mock_expert = app.add_subcommand("mock-expert", "Serve the deterministic expert mock");
  mock_expert->add_option("--host", host);
  mock_expert->add_option("--port", port);
  auto* mock_engine = app.add_subcommand("mock-engine", "Serve the caption engine mock");
  mock_engine->add_option("--host", host);
  mock_engine->add_option("--port", port);

  CLI11_PARSE(app, argc, argv);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    if (*ingest) {
      print_counts("ingest", df::stage_ingest(manifest, out, shard_size));
    } else if (*filter) {
      auto cfg = config_or_default(config_path);
      print_counts("filter", df::stage_filter(in_dir, out, min_edge, verify_local || cfg.verify_local_images,
                                              df::resolve_threads(cfg.worker_threads)));
    } else if (*embed) {
      print_counts("embed", df::stage_embed(emb_file, catalog, out));
    } else if (*cluster) {
      print_counts("cluster", df::stage_cluster(store, k, seed, max_iters, tol, threads, out));
    } else if (*dedup) {
      print_counts("dedup", df::stage_dedup(model, epsilon, out, threads));
    } else if (*select) {
      std::optional<fs::path> cat;
      if (!catalog.empty()) cat = catalog;
      print_counts("select",
                   df::stage_select(decisions, top_k, df::rank_by_from_string(rank_by), cat, seed, out));
    } else if (*annotate) {
      print_counts("annotate", df::stage_annotate(selected, catalog, expert_url, config_or_default(config_path), out));
    } else if (*prompt) {
      print_counts("prompt", df::stage_prompt(annotations, df::prompt_kind_from_string(kind), out));
    } else if (*caption) {
      auto cfg = config_or_default(config_path);
      if (max_in_flight > 0) cfg.engine_max_in_flight = max_in_flight;
      if (engine_model.empty()) engine_model = cfg.inputs.engine_model;
      df::BatchReport report;
      int rc = 0;
      try {
        print_counts("caption",
                     df::stage_caption(prompts, engine_url, engine_model, cfg, out, restart, &g_cancel, &report));
      } catch (const df::CheckpointError&) {
        throw;
      } catch (const df::Error& e) {
        std::cerr << "caption: " << e.what() << '\n';
        rc = 1;
      }
      std::cout << df::report_to_json(report).dump(2) << '\n';
      return rc;
    } else if (*stats) {
      auto cfg = config_or_default(config_path);
      if (engine_model.empty()) engine_model = cfg.inputs.engine_model;
      std::optional<std::string> cls;
      if (!classify_url.empty()) cls = classify_url;
      print_counts("stats", df::stage_stats(captions, annotations, out, cls, engine_model, cfg));
    } else if (*run) {
      if (config_path.empty()) throw df::ConfigError("config", "run needs --config");
      const auto cfg = df::load_config(config_path);
      std::cerr << "resolved config:\n" << df::config_to_json(cfg).dump(2) << '\n';
      df::RunOptions opts;
      opts.from = df::pipeline_stage_from_string(from);
      opts.to = df::pipeline_stage_from_string(to);
      opts.force = force;
      opts.restart_captions = restart;
      opts.cancel = &g_cancel;
      const auto m = df::run_pipeline(cfg, workdir, opts);
      for (auto s : df::kStages) {
        const auto& st = m.stages.at(s);
        std::cerr << df::to_string(s) << ": " << (st.done ? "done" : "pending");
        if (st.done) std::cerr << " (" << st.records << ")";
        std::cerr << '\n';
      }
      for (auto s : df::kStages) {
        if (static_cast<int>(s) >= static_cast<int>(opts.from) && static_cast<int>(s) <= static_cast<int>(opts.to) &&
            !m.is_done(s)) {
          return 1;
        }
      }
    } else if (*synth) {
      const auto fx = df::write_synthetic_fixture(out, synth_opts);
      std::cerr << "wrote " << fx.manifest << " and " << fx.embeddings << " (" << fx.duplicate_pairs.size()
                << " planted pairs)\n";
    } else if (*mock_expert) {
      df::mock::ExpertServer server;
      std::cerr << "mock expert on " << host << ":" << port << '\n';
      server.serve_forever(host, port);
    } else if (*mock_engine) {
      df::mock::EngineServer server;
      std::cerr << "mock engine on " << host << ":" << port << '\n';
      server.serve_forever(host, port);
    }
  } catch (const df::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
