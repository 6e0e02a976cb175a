#include <doctest.h>

#include <fstream>
#include <set>

#include "densefuse/curator.hpp"
#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/mock_services.hpp"
#include "densefuse/pipeline.hpp"
#include "densefuse/synth.hpp"
#include "unit/tmpdir.hpp"

using namespace densefuse;
using nlohmann::json;

TEST_CASE("config defaults and strict schema") {
  TmpDir tmp;
  std::ofstream(tmp / "empty.json") << "  \n";
  auto c = load_config(tmp / "empty.json");
  CHECK(c.dedup_epsilon == 0.4);
  CHECK(c.min_short_edge_px == 448);
  CHECK(c.select_top_k == 20);
  CHECK(c.cluster_count_k == 50'000);

  try {
    config_from_json(json{{"dedup_epsilon", 1.5}}).validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key_path() == "dedup_epsilon");
  }
  try {
    config_from_json(json{{"epsilonn", 0.4}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("epsilonn") != std::string::npos);
  }
  try {
    config_from_json(json{{"inputs", {{"engine_url", 5}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key_path() == "inputs.engine_url");
  }
  CHECK_THROWS_AS(config_from_json(json{{"select_rank_by", "loudest"}}), ConfigError);
  CHECK(config_from_json(config_to_json(c)).dedup_epsilon == 0.4);
  auto d = c;
  d.rng_seed = 9;
  CHECK(config_hash(c) != config_hash(d));
  CHECK(config_hash(c) == config_hash(load_config(tmp / "empty.json")));
}

TEST_CASE("stage names") {
  for (auto s : kStages) CHECK(pipeline_stage_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(pipeline_stage_from_string("nope"), ConfigError);
}

TEST_CASE("small end-to-end run with mocks") {
  TmpDir tmp;
  SynthOptions so;
  so.images = 200;
  so.dim = 32;
  so.duplicate_pairs = 8;
  so.topics = 8;
  auto fx = write_synthetic_fixture(tmp / "fx", so);

  mock::ExpertServer experts;
  experts.start();
  mock::EngineServer engine;
  engine.start();

  PipelineConfig cfg;
  cfg.cluster_count_k = 8;
  cfg.select_top_k = 10;
  cfg.backoff_initial_ms = 1;
  cfg.inputs.manifest = fx.manifest.string();
  cfg.inputs.embeddings = fx.embeddings.string();
  cfg.inputs.expert_url = experts.url();
  cfg.inputs.engine_url = engine.url();
  const auto wd = tmp.path / "work";

  auto m = run_pipeline(cfg, wd, {});
  for (auto s : kStages) CHECK(m.is_done(s));
  const auto count = [&](PipelineStage s) { return m.stages.at(s).records; };
  CHECK(count(PipelineStage::ingest) == 200);
  CHECK(count(PipelineStage::filter) <= count(PipelineStage::ingest));
  CHECK(count(PipelineStage::embed) <= count(PipelineStage::filter));
  CHECK(count(PipelineStage::dedup) <= count(PipelineStage::cluster));
  CHECK(count(PipelineStage::select) <= count(PipelineStage::dedup));
  CHECK(count(PipelineStage::select) <= 80);

  // Every planted pair loses exactly one member.
  std::map<std::string, bool> kept;
  for (const auto& d : read_decisions(stage_artifact(wd, PipelineStage::dedup))) kept[d.decision.image_id] = d.decision.kept;
  for (const auto& [a, b] : fx.duplicate_pairs) CHECK(kept.at(a) != kept.at(b));

  SUBCASE("rerun is a no-op") {
    const auto requests = engine.request_count();
    auto again = run_pipeline(cfg, wd, {});
    auto j1 = manifest_to_json(m), j2 = manifest_to_json(again);
    j1.erase("updated_at");
    j2.erase("updated_at");
    CHECK(j1 == j2);
    CHECK(engine.request_count() == requests);
  }
  SUBCASE("edited config is refused") {
    auto other = cfg;
    other.dedup_epsilon = 0.3;
    CHECK_THROWS_AS(run_pipeline(other, wd, {}), ConfigError);
  }
  SUBCASE("forcing a stage resets later ones") {
    RunOptions o;
    o.from = PipelineStage::prompt;
    o.to = PipelineStage::prompt;
    o.force = true;
    auto f = run_pipeline(cfg, wd, o);
    CHECK(f.is_done(PipelineStage::prompt));
    CHECK_FALSE(f.is_done(PipelineStage::caption));
    CHECK_FALSE(f.is_done(PipelineStage::stats));
    RunOptions rest;
    rest.from = PipelineStage::caption;
    auto g = run_pipeline(cfg, wd, rest);
    CHECK(g.is_done(PipelineStage::stats));
  }
  SUBCASE("a failing stage is left pending") {
    RunOptions o;
    o.from = PipelineStage::annotate;
    o.to = PipelineStage::annotate;
    o.force = true;
    experts.stop();
    CHECK_THROWS(run_pipeline(cfg, wd, o));
    auto after = load_manifest(wd);
    CHECK(after.is_done(PipelineStage::select));
    CHECK_FALSE(after.is_done(PipelineStage::annotate));
    CHECK_FALSE(after.is_done(PipelineStage::caption));
  }
  engine.stop();
  experts.stop();
}

TEST_CASE("later stages need their predecessors") {
  TmpDir tmp;
  PipelineConfig cfg;
  RunOptions o;
  o.from = PipelineStage::cluster;
  CHECK_THROWS_AS(run_pipeline(cfg, tmp.path, o), Error);
}
