#include <doctest.h>

#include <fstream>
#include <random>
#include <regex>
#include <sstream>

#include "densefuse/error.hpp"
#include "densefuse/fusion.hpp"

using namespace densefuse;

namespace {

std::string slurp(const std::string& rel) {
  std::ifstream in(std::string(DENSEFUSE_TEST_DATA) + "/" + rel, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

AnnotationBundle fixture() { return bundle_from_json(nlohmann::json::parse(slurp("golden/fixture_bundle.json"))); }

}  // namespace

TEST_CASE("golden prompts") {
  const auto b = fixture();
  const auto meta = assemble_meta_prompt(b);
  const auto engine = assemble_engine_prompt(b);
  CHECK(meta.text == slurp("golden/meta_prompt.txt"));
  CHECK(engine.text == slurp("golden/engine_prompt.txt"));
  CHECK(meta.text.find("NO longer than 192 words") != std::string::npos);
  CHECK(engine.text.find("you should disregard any inaccuracies") != std::string::npos);
  CHECK(meta.image_ref == b.uri);
  const std::regex line(R"(^        [^:\n]+: \[\d+, \d+, \d+, \d+\]$)");
  for (const auto& l : format_boxes(b.boxes)) CHECK(std::regex_match("        " + l, line));
}

TEST_CASE("duplicate labels get ordinals") {
  std::vector<DetectionBox> boxes{{"dog", 0, 0, 10, 10, 0.9, BoxSource::closed_set},
                                  {"cat", 1, 1, 5, 5, 0.9, BoxSource::closed_set},
                                  {"dog", 2, 2, 4, 4, 0.9, BoxSource::open_set}};
  CHECK(format_boxes(boxes) ==
        std::vector<std::string>{"dog 1: [0, 0, 10, 10]", "cat: [1, 1, 5, 5]", "dog 2: [2, 2, 4, 4]"});
}

TEST_CASE("empty sections keep their headers") {
  AnnotationBundle b;
  b.image_id = "e";
  auto p = assemble_engine_prompt(b);
  CHECK(p.text.find("    [World Knowledge]: \n    [Detection Box]:\n    [OCR]:\n[IMAGE]:") != std::string::npos);
  auto s = extract_sections(p.text, PromptKind::engine);
  CHECK(s.world_knowledge.empty());
  CHECK(s.box_lines.empty());
  CHECK(s.ocr_lines.empty());
}

TEST_CASE("multi-line labels are rejected") {
  AnnotationBundle b;
  b.boxes.push_back({"two\nlines", 0, 0, 1, 1, 0.9, BoxSource::closed_set});
  CHECK_THROWS_AS(assemble_engine_prompt(b), SchemaError);
}

TEST_CASE("section extraction round trip") {
  std::mt19937_64 rng(99);
  const std::vector<std::string> words = {"red", "Café", "dog", "42", "[OCR]:", "sign", "über", "x:", "", "  "};
  auto phrase = [&](int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s += (i ? " " : "") + words[rng() % words.size()];
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    AnnotationBundle b;
    b.image_id = "r" + std::to_string(trial);
    b.world_knowledge = phrase(static_cast<int>(rng() % 6));
    if (trial % 7 == 0) b.world_knowledge += "\n    [Detection Box]:\n        fake: [1, 2, 3, 4]";
    const int nb = static_cast<int>(rng() % 6);
    for (int i = 0; i < nb; ++i) {
      std::string label = "obj" + std::to_string(rng() % 3);
      const std::int64_t x = static_cast<std::int64_t>(rng() % 500), y = static_cast<std::int64_t>(rng() % 500);
      b.boxes.push_back({label, x, y, x + 1 + static_cast<std::int64_t>(rng() % 50), y + 7, 0.9, BoxSource::closed_set});
    }
    const int no = static_cast<int>(rng() % 4);
    for (int i = 0; i < no; ++i) {
      std::string t = phrase(1 + static_cast<int>(rng() % 4));
      if (t.find_first_not_of(' ') == std::string::npos) t = "txt";
      t.erase(0, t.find_first_not_of(' '));
      t.erase(t.find_last_not_of(' ') + 1);
      b.ocr.push_back({t, std::nullopt, 0.8});
    }
    for (auto kind : {PromptKind::engine, PromptKind::meta_gpt4v}) {
      const auto p = assemble_prompt(b, kind);
      const auto s = extract_sections(p.text, kind);
      CHECK(s.world_knowledge == b.world_knowledge);
      CHECK(s.box_lines == format_boxes(b.boxes));
      std::vector<std::string> texts;
      for (const auto& l : b.ocr) texts.push_back(l.text);
      CHECK(s.ocr_lines == texts);
      CHECK(prompt_from_json(prompt_to_json(p)).text == p.text);
    }
  }
  CHECK_THROWS_AS(extract_sections("not a prompt", PromptKind::engine), FormatError);
}
