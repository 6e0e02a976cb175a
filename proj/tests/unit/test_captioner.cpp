#include <doctest.h>

#include <fstream>
#include <map>

#include "densefuse/captioner.hpp"
#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/mock_services.hpp"
#include "unit/tmpdir.hpp"

using namespace densefuse;

namespace {

std::vector<FusionPrompt> prompts(std::size_t n) {
  std::vector<FusionPrompt> out;
  for (std::size_t i = 0; i < n; ++i) {
    AnnotationBundle b;
    b.image_id = "p" + std::to_string(i);
    b.world_knowledge = "item " + std::to_string(i);
    out.push_back(assemble_engine_prompt(b));
  }
  return out;
}

BackoffPolicy fast(std::int64_t retries = 3) { return {1, 2.0, 4, retries}; }

std::map<std::string, int> id_counts(const std::filesystem::path& captions) {
  std::map<std::string, int> n;
  for (const auto& p : {captions, failures_path_for(captions)}) {
    if (!std::filesystem::exists(p)) continue;
    for (const auto& j : jsonl::read_all(p)) ++n[j.at("image_id").get<std::string>()];
  }
  return n;
}

}  // namespace

TEST_CASE("backoff delays stay under the exponential envelope") {
  BackoffPolicy p{500, 2.0, 30'000, 10};
  std::mt19937_64 rng(1);
  for (int retry = 1; retry < 12; ++retry) {
    const auto cap = std::min<double>(30'000, 500 * std::pow(2.0, retry - 1));
    for (int i = 0; i < 50; ++i) {
      const auto d = p.delay(retry, rng).count();
      CHECK(d >= 0);
      CHECK(d <= cap);
    }
  }
}

TEST_CASE("completion text parsing") {
  CHECK(completion_text(R"({"choices":[{"message":{"role":"assistant","content":"hi"}}]})") == std::optional<std::string>("hi"));
  CHECK_FALSE(completion_text("{}"));
  CHECK_FALSE(completion_text("garbage"));
}

TEST_CASE("request body carries the prompt, the image and the id") {
  struct Null : HttpTransport {
    HttpResponse post_json(const std::string&, const std::string&) override { return {}; }
  } t;
  EngineClient c(t, "m", fast());
  auto j = c.request_body("id1", "prompt text", "https://x/y.jpg");
  CHECK(j.at("model") == "m");
  CHECK(j.at("metadata").at("image_id") == "id1");
  CHECK(j.dump().find("prompt text") != std::string::npos);
  CHECK(j.dump().find("https://x/y.jpg") != std::string::npos);
}

TEST_CASE("429, 429, 200 takes three attempts") {
  mock::EngineServer::Options o;
  o.per_id_script["p0"] = {429, 429};
  mock::EngineServer server(o);
  server.start();
  auto t = make_http_transport(server.url(), std::chrono::milliseconds(5000));
  EngineClient c(*t, "engine", fast());
  std::mt19937_64 rng(0);
  auto out = c.request_caption(prompts(1)[0], rng);
  REQUIRE(std::holds_alternative<CaptionRecord>(out));
  const auto& r = std::get<CaptionRecord>(out);
  CHECK(r.attempt_count == 3);
  CHECK(r.word_count > 0);
  CHECK(server.requests_for("p0") == 3);
  server.stop();
}

TEST_CASE("failure classes") {
  mock::EngineServer::Options o;
  o.per_id_script["p0"] = {400};
  o.per_id_script["p1"] = {503, 503, 503, 503};
  mock::EngineServer server(o);
  server.start();
  auto t = make_http_transport(server.url(), std::chrono::milliseconds(5000));
  EngineClient c(*t, "engine", fast(2));
  std::mt19937_64 rng(0);
  auto ps = prompts(2);
  auto a = c.request_caption(ps[0], rng);
  REQUIRE(std::holds_alternative<CaptionFailure>(a));
  CHECK(std::get<CaptionFailure>(a).error_class == FailureClass::permanent);
  CHECK(std::get<CaptionFailure>(a).attempt_count == 1);
  auto b = c.request_caption(ps[1], rng);
  REQUIRE(std::holds_alternative<CaptionFailure>(b));
  CHECK(std::get<CaptionFailure>(b).error_class == FailureClass::transient);
  CHECK(std::get<CaptionFailure>(b).http_status == 503);
  CHECK(std::get<CaptionFailure>(b).attempt_count == 3);
  server.stop();
}

TEST_CASE("batch honours the in-flight cap and resumes exactly once") {
  TmpDir tmp;
  mock::EngineServer::Options o;
  o.delay_ms = 20;
  o.per_id_script["p7"] = {400};
  mock::EngineServer server(o);
  server.start();
  auto t = make_http_transport(server.url(), std::chrono::milliseconds(5000));
  EngineClient c(*t, "engine", fast());
  auto ps = prompts(60);

  BatchOptions opts;
  opts.max_in_flight = 6;
  opts.out_path = tmp / "captions.jsonl";
  opts.stop_after = 25;
  auto first = run_batch(ps, c, opts);
  CHECK_FALSE(first.complete);
  CHECK(first.new_records == 25);
  CHECK(server.max_concurrency() == 6);

  opts.stop_after.reset();
  auto second = run_batch(ps, c, opts);
  CHECK(second.complete);
  CHECK(second.resumed == 25);
  CHECK(second.succeeded + second.failed_permanent + second.failed_transient == 60);
  CHECK(second.failed_permanent == 1);
  auto counts = id_counts(opts.out_path);
  CHECK(counts.size() == 60);
  for (const auto& [id, n] : counts) CHECK(n == 1);

  auto third = run_batch(ps, c, opts);
  CHECK(third.new_records == 0);
  CHECK(third.resumed == 60);
  server.stop();
}

TEST_CASE("corrupt checkpoint refuses to resume") {
  TmpDir tmp;
  std::ofstream(tmp / "c.jsonl") << R"({"image_id":"p0","caption":"x","engine_id":"e","latency_ms":1,"attempts":1,"kind":"engine","words":1})"
                                 << "\n{\"image_id\":\"p1\",\"capt";
  CHECK_THROWS_AS(load_checkpoint_ids(tmp / "c.jsonl", failures_path_for(tmp / "c.jsonl")), CheckpointError);

  struct Ok : HttpTransport {
    HttpResponse post_json(const std::string&, const std::string&) override {
      return {200, R"({"choices":[{"message":{"content":"A cat."}}]})", ""};
    }
  } t;
  EngineClient c(t, "e", fast());
  BatchOptions opts;
  opts.out_path = tmp / "c.jsonl";
  CHECK_THROWS_AS(run_batch(prompts(3), c, opts), CheckpointError);
  opts.restart = true;
  auto r = run_batch(prompts(3), c, opts);
  CHECK(r.succeeded == 3);
  CHECK(r.complete);
}

TEST_CASE("caption and failure records round trip") {
  CaptionRecord r{"id", "A dog.", "eng", 12, 2, PromptKind::meta_gpt4v, 2};
  auto back = caption_from_json(caption_to_json(r));
  CHECK(back.caption == r.caption);
  CHECK(back.attempt_count == 2);
  CHECK(back.prompt_kind == PromptKind::meta_gpt4v);
  CaptionFailure f{"id", FailureClass::permanent, 400, "bad", 1, PromptKind::engine};
  auto fb = failure_from_json(failure_to_json(f));
  CHECK(fb.error_class == FailureClass::permanent);
  CHECK(fb.http_status == 400);
}

TEST_CASE("nearest-rank percentile") {
  CHECK(percentile({}, 50) == 0.0);
  CHECK(percentile({5, 1, 3, 2, 4}, 50) == 3.0);
  CHECK(percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 95) == 10.0);
  CHECK(percentile({1, 2, 3, 4}, 100) == 4.0);
}

TEST_CASE("local image files become data URLs") {
  TmpDir tmp;
  std::ofstream(tmp / "x.png", std::ios::binary) << "abc";
  CHECK(image_url_for((tmp / "x.png").string()) == "data:image/png;base64,YWJj");
  CHECK(image_url_for("https://h/x.jpg") == "https://h/x.jpg");
  CHECK(base64_encode("hello") == "aGVsbG8=");
}
