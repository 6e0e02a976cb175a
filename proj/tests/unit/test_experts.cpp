#include <doctest.h>

#include <random>

#include "densefuse/error.hpp"
#include "densefuse/experts.hpp"
#include "densefuse/mock_services.hpp"
#include "oracles/oracles.hpp"

using namespace densefuse;
using nlohmann::json;

namespace {

DetectionBox box(std::string label, std::int64_t x1, std::int64_t y1, std::int64_t x2, std::int64_t y2, double conf,
                 BoxSource src = BoxSource::closed_set) {
  return {std::move(label), x1, y1, x2, y2, conf, src};
}

std::array<Point, 4> quad(double x1, double y1, double x2, double y2) {
  return {Point{x1, y1}, Point{x2, y1}, Point{x2, y2}, Point{x1, y2}};
}

ImageRecord image(std::string id = "img-1") {
  ImageRecord r;
  r.id = std::move(id);
  r.uri = "https://example.org/" + r.id + ".jpg";
  r.width_px = 800;
  r.height_px = 600;
  r.web_caption = "a shop front";
  return r;
}

BackoffPolicy fast() { return {1, 2.0, 5, 1}; }

}  // namespace

TEST_CASE("open vocabulary derivation") {
  CHECK(derive_open_vocab({{"dog", 0.9}, {"Dog", 0.8}, {"cat", 0.7}}) == std::vector<std::string>{"dog", "cat"});
  CHECK(derive_open_vocab({}).empty());
  std::vector<Tag> many;
  for (int i = 0; i < 150; ++i) many.push_back({"t" + std::to_string(i), static_cast<double>((i * 37) % 150) / 150.0});
  auto v = derive_open_vocab(many);
  REQUIRE(v.size() == 100);
  auto sorted = many;
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.score > b.score; });
  std::set<std::string> top;
  for (int i = 0; i < 100; ++i) top.insert(sorted[static_cast<std::size_t>(i)].name);
  CHECK(std::set<std::string>(v.begin(), v.end()) == top);
}

TEST_CASE("confidence filter") {
  PipelineConfig cfg;
  CHECK(filter_detections({box("a", 0, 0, 5, 5, 0.9)}, cfg).size() == 1);
  CHECK(filter_detections({box("a", 0, 0, 5, 5, 0.30, BoxSource::open_set)}, cfg).empty());
  std::mt19937_64 rng(2);
  std::vector<DetectionBox> ten;
  for (int i = 0; i < 10; ++i) {
    ten.push_back(box("b" + std::to_string(i), 0, 0, 5 + i, 5, std::uniform_real_distribution<>(0, 1)(rng),
                      i % 2 ? BoxSource::open_set : BoxSource::closed_set));
  }
  std::vector<DetectionBox> want;
  for (const auto& b : ten) {
    if (b.confidence >= (b.source == BoxSource::open_set ? 0.35 : 0.5)) want.push_back(b);
  }
  CHECK(filter_detections(ten, cfg) == want);
}

TEST_CASE("balanced sampling examples") {
  PipelineConfig cfg;
  const std::int64_t w = 1000, h = 1000;  // small: area < 20000
  std::vector<DetectionBox> eight;
  for (int i = 0; i < 8; ++i) eight.push_back(box("o", 10 * i, 0, 10 * i + 300, 300, 0.9));
  CHECK(balanced_sample(eight, w, h, cfg).size() == 8);

  std::vector<DetectionBox> mixed;
  for (int i = 0; i < 10; ++i) mixed.push_back(box("s", i * 20, 0, i * 20 + 10, 10, 0.51 + 0.01 * i));
  for (int i = 0; i < 20; ++i) mixed.push_back(box("L", i, 100, i + 500, 600, 0.6 + 0.01 * i));
  auto out = balanced_sample(mixed, w, h, cfg);
  REQUIRE(out.size() == 20);
  int small = 0;
  for (const auto& b : out) small += b.label == "s";
  CHECK(small == 6);
  for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i - 1].area() >= out[i].area());

  std::vector<DetectionBox> all_small;
  for (int i = 0; i < 30; ++i) all_small.push_back(box("s", i, 0, i + 10, 10, 0.5 + 0.01 * i));
  auto s = balanced_sample(all_small, w, h, cfg);
  REQUIRE(s.size() == 20);
  for (const auto& b : s) CHECK(b.confidence >= 0.6 - 1e-12);
}

TEST_CASE("balanced sampling agrees with the reference greedy") {
  PipelineConfig cfg;
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::int64_t> coord(0, 900);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<DetectionBox> in;
    std::vector<oracle::Box> ref;
    const int n = static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) {
      const auto x = coord(rng), y = coord(rng);
      const auto side = rng() % 3 == 0 ? 5 + static_cast<std::int64_t>(rng() % 100) : 150 + static_cast<std::int64_t>(rng() % 200);
      const double conf = std::round(std::uniform_real_distribution<>(0.5, 1)(rng) * 20) / 20;
      const std::string label = std::string(1, static_cast<char>('a' + rng() % 3));
      in.push_back(box(label, x, y, std::min<std::int64_t>(x + side, 1000), std::min<std::int64_t>(y + side, 1000), conf));
      ref.push_back({label, in.back().x1, in.back().y1, in.back().x2, in.back().y2, conf, 0});
    }
    auto got = balanced_sample(in, 1000, 1000, cfg);
    auto want = oracle::balanced_sample(ref, 1000, 1000, 20, 0.02, 0.3);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].label == want[i].label);
      CHECK(got[i].x1 == want[i].x1);
      CHECK(got[i].y2 == want[i].y2);
      CHECK(got[i].confidence == want[i].conf);
    }
  }
}

TEST_CASE("ocr reading order") {
  std::vector<OcrLine> two{{"lower", quad(0, 50, 10, 60), 0.9}, {"upper", quad(0, 10, 10, 20), 0.9}};
  CHECK(order_ocr(two)[0].text == "upper");

  std::vector<OcrLine> dup{{"SALE", quad(0, 0, 100, 20), 0.9}, {"SALE", quad(0, 0, 100, 21), 0.8}};
  CHECK(quad_iou(*dup[0].quad, *dup[1].quad) > 0.9);
  CHECK(order_ocr(dup).size() == 1);

  std::vector<OcrLine> grid;
  std::vector<std::pair<double, double>> yx;
  for (double x : {300.0, 20.0}) {
    for (double y : {200.0, 10.0, 90.0}) {
      grid.push_back({"t" + std::to_string(static_cast<int>(x)) + "_" + std::to_string(static_cast<int>(y)),
                      quad(x, y, x + 100, y + 20), 0.9});
      yx.push_back({y, x});
    }
  }
  grid.push_back({"loose", std::nullopt, 0.5});
  std::sort(yx.begin(), yx.end());
  auto ordered = order_ocr(grid);
  REQUIRE(ordered.size() == 7);
  for (std::size_t i = 0; i < yx.size(); ++i) {
    CHECK(ordered[i].quad->at(0).y == yx[i].first);
    CHECK(ordered[i].quad->at(0).x == yx[i].second);
  }
  CHECK(ordered.back().text == "loose");
}

TEST_CASE("response parsing drops degenerate boxes") {
  json body{{"boxes", json::array()}};
  for (int i = 0; i < 5; ++i) body["boxes"].push_back({{"label", "ok"}, {"bbox", {10 * i, 10, 10 * i + 5, 40}}, {"score", 0.9}});
  body["boxes"].push_back({{"label", "bad"}, {"bbox", {50, 10, 50, 40}}, {"score", 0.9}});
  body["boxes"].push_back({{"label", "bad"}, {"bbox", {60, 10, 40, 40}}, {"score", 0.9}});
  auto p = parse_expert_response(body, 800, 600);
  CHECK(p.boxes.size() == 5);
  CHECK(p.invalid_boxes == 2);
  CHECK_THROWS_AS(parse_expert_response(json{{"boxes", "nope"}}, 800, 600), SchemaError);
  auto clamped = parse_expert_response(json{{"boxes", {{{"label", "c"}, {"bbox", {-5, -5, 900.4, 700}}, {"score", 0.9}}}}}, 800, 600);
  REQUIRE(clamped.boxes.size() == 1);
  CHECK(clamped.boxes[0].x1 == 0);
  CHECK(clamped.boxes[0].x2 == 800);
  CHECK(clamped.boxes[0].y2 == 600);
}

TEST_CASE("annotate against the mock expert") {
  mock::ExpertServer::Options opts;
  opts.responder = [](const json& req) -> std::optional<json> {
    const auto task = req.at("tasks").at(0).get<std::string>();
    if (task == "tags") return json{{"tags", {{{"name", "cat"}, {"score", 0.9}}, {{"name", "sofa"}, {"score", 0.8}}, {{"name", "lamp"}, {"score", 0.6}}}}};
    if (task == "detect_closed")
      return json{{"boxes", {{{"label", "cat"}, {"bbox", {10, 10, 200, 200}}, {"score", 0.9}, {"source", "closed_set"}}}}};
    if (task == "detect_open") {
      CHECK(req.at("vocabulary") == json{"cat", "sofa", "lamp"});
      return json{{"boxes", {{{"label", "lamp"}, {"bbox", {300, 10, 340, 90}}, {"score", 0.5}, {"source", "open_set"}}}}};
    }
    return json{{"ocr", {{{"text", "HELLO"}, {"score", 0.9}}}}};
  };
  mock::ExpertServer server(opts);
  server.start();
  auto transport = make_http_transport(server.url(), std::chrono::milliseconds(5000));
  ExpertClient client(*transport, fast());
  auto raw = client.annotate_image(image());
  CHECK(raw.tags.size() == 3);
  CHECK(raw.boxes.size() == 2);
  CHECK(raw.ocr.size() == 1);
  CHECK(raw.warnings.empty());
  PipelineConfig cfg;
  auto b = build_bundle(image(), raw, cfg);
  validate_bundle(b, cfg);
  CHECK(b.world_knowledge == "a shop front");
  CHECK(bundle_from_json(bundle_to_json(b)) == b);
  server.stop();
}

TEST_CASE("partial expert failure degrades one section") {
  mock::ExpertServer::Options opts;
  opts.failing_tasks = {"ocr"};
  mock::ExpertServer server(opts);
  server.start();
  auto transport = make_http_transport(server.url(), std::chrono::milliseconds(5000));
  ExpertClient client(*transport, fast());
  auto raw = client.annotate_image(image());
  CHECK(raw.ocr.empty());
  REQUIRE(raw.warnings.size() == 1);
  CHECK(raw.warnings[0].find("ocr") != std::string::npos);
  PipelineConfig cfg;
  auto b = build_bundle(image(), raw, cfg);
  validate_bundle(b, cfg);
  server.stop();
}

TEST_CASE("unreachable expert service") {
  auto transport = make_http_transport("http://127.0.0.1:1", std::chrono::milliseconds(500));
  ExpertClient client(*transport, fast());
  CHECK_THROWS_AS(client.annotate_image(image()), ServiceUnavailableError);
}

TEST_CASE("generated mock content is deterministic and schema-valid") {
  json req{{"image_id", "q"}, {"image", {{"uri", "u"}, {"width", 640}, {"height", 480}}},
           {"tasks", {"tags", "detect_closed", "ocr"}}};
  CHECK(mock::ExpertServer::generate(req) == mock::ExpertServer::generate(req));
  CHECK_NOTHROW(parse_expert_response(mock::ExpertServer::generate(req), 640, 480));
}
