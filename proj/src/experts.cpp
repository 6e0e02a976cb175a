#include "densefuse/experts.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "densefuse/error.hpp"

namespace densefuse {

using nlohmann::json;

std::string to_string(BoxSource s) { return s == BoxSource::closed_set ? "closed_set" : "open_set"; }

std::string to_string(ExpertTask t) {
  switch (t) {
    case ExpertTask::tags: return "tags";
    case ExpertTask::detect_closed: return "detect_closed";
    case ExpertTask::detect_open: return "detect_open";
    case ExpertTask::ocr: return "ocr";
  }
  return "tags";
}

ExpertTask expert_task_from_string(const std::string& s) {
  for (auto t : kAllTasks) {
    if (to_string(t) == s) return t;
  }
  throw SchemaError("unknown expert task \"" + s + "\"");
}

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

BoxSource source_from_string(const std::string& s) {
  if (s == "closed_set") return BoxSource::closed_set;
  if (s == "open_set") return BoxSource::open_set;
  throw SchemaError("unknown box source \"" + s + "\"");
}

double get_score(const json& item, const char* key, const char* what) {
  auto it = item.find(key);
  if (it == item.end() || !it->is_number()) throw SchemaError(std::string(what) + ": \"" + key + "\" must be a number");
  const double v = it->get<double>();
  if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(std::string(what) + ": \"" + key + "\" outside [0, 1]");
  return v;
}

std::string get_string(const json& item, const char* key, const char* what) {
  auto it = item.find(key);
  if (it == item.end() || !it->is_string()) throw SchemaError(std::string(what) + ": \"" + key + "\" must be a string");
  return it->get<std::string>();
}

const json* get_array(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || it->is_null()) return nullptr;
  if (!it->is_array()) throw SchemaError(std::string("\"") + key + "\" must be an array");
  return &*it;
}

std::array<Point, 4> rect_quad(double x1, double y1, double x2, double y2) {
  return {Point{x1, y1}, Point{x2, y1}, Point{x2, y2}, Point{x1, y2}};
}

std::array<Point, 4> parse_quad(const json& v) {
  if (!v.is_array() || v.size() != 4) throw SchemaError("ocr bbox must have 4 entries");
  if (std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); })) {
    return rect_quad(v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>());
  }
  std::array<Point, 4> q;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& p = v[i];
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw SchemaError("ocr bbox must be [x1, y1, x2, y2] or four [x, y] points");
    }
    q[i] = {p[0].get<double>(), p[1].get<double>()};
  }
  return q;
}

struct Rect {
  double left, top, right, bottom;
};

Rect bounds(const std::array<Point, 4>& q) {
  Rect r{q[0].x, q[0].y, q[0].x, q[0].y};
  for (const auto& p : q) {
    r.left = std::min(r.left, p.x);
    r.top = std::min(r.top, p.y);
    r.right = std::max(r.right, p.x);
    r.bottom = std::max(r.bottom, p.y);
  }
  return r;
}

// Selection priority: confidence, then (label, x1, y1) and the remaining fields for a total order.
bool selection_before(const DetectionBox& a, const DetectionBox& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return std::tie(a.label, a.x1, a.y1, a.x2, a.y2, a.source) < std::tie(b.label, b.x1, b.y1, b.x2, b.y2, b.source);
}

bool display_before(const DetectionBox& a, const DetectionBox& b) {
  if (a.area() != b.area()) return a.area() > b.area();
  return selection_before(a, b);
}

}  // namespace

std::string fold_name(std::string_view s) {
  std::string out = squash_whitespace(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string squash_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

ParsedSection parse_expert_response(const json& body, std::int64_t width_px, std::int64_t height_px,
                                    BoxSource default_source) {
  if (!body.is_object()) throw SchemaError("expert response must be a JSON object");
  ParsedSection out;
  if (const json* tags = get_array(body, "tags")) {
    for (const auto& t : *tags) {
      if (!t.is_object()) throw SchemaError("tag entries must be objects");
      Tag tag{fold_name(get_string(t, "name", "tag")), get_score(t, "score", "tag")};
      if (!tag.name.empty()) out.tags.push_back(std::move(tag));
    }
  }
  if (const json* boxes = get_array(body, "boxes")) {
    for (const auto& b : *boxes) {
      if (!b.is_object()) throw SchemaError("box entries must be objects");
      DetectionBox box;
      box.label = fold_name(get_string(b, "label", "box"));
      box.confidence = get_score(b, "score", "box");
      box.source = b.contains("source") ? source_from_string(get_string(b, "source", "box")) : default_source;
      auto bb = b.find("bbox");
      if (bb == b.end() || !bb->is_array() || bb->size() != 4 ||
          !std::all_of(bb->begin(), bb->end(), [](const json& e) { return e.is_number(); })) {
        throw SchemaError("box: \"bbox\" must be four numbers");
      }
      auto px = [](const json& v, std::int64_t hi) {
        const double r = std::round(v.get<double>());
        return static_cast<std::int64_t>(std::clamp(r, 0.0, static_cast<double>(hi)));
      };
      box.x1 = px((*bb)[0], width_px);
      box.y1 = px((*bb)[1], height_px);
      box.x2 = px((*bb)[2], width_px);
      box.y2 = px((*bb)[3], height_px);
      if (box.x2 <= box.x1 || box.y2 <= box.y1 || box.label.empty()) {
        ++out.invalid_boxes;
        continue;
      }
      out.boxes.push_back(std::move(box));
    }
  }
  if (const json* lines = get_array(body, "ocr")) {
    for (const auto& l : *lines) {
      if (!l.is_object()) throw SchemaError("ocr entries must be objects");
      OcrLine line;
      line.text = squash_whitespace(get_string(l, "text", "ocr"));
      line.confidence = get_score(l, "score", "ocr");
      if (auto q = l.find("bbox"); q != l.end() && !q->is_null()) line.quad = parse_quad(*q);
      if (!line.text.empty()) out.ocr.push_back(std::move(line));
    }
  }
  return out;
}

std::vector<std::string> derive_open_vocab(const std::vector<Tag>& tags, std::size_t cap) {
  std::vector<std::string> names;
  std::vector<double> best;
  std::unordered_map<std::string, std::size_t> pos;
  for (const auto& t : tags) {
    auto name = fold_name(t.name);
    if (name.empty()) continue;
    auto [it, fresh] = pos.emplace(name, names.size());
    if (fresh) {
      names.push_back(std::move(name));
      best.push_back(t.score);
    } else {
      best[it->second] = std::max(best[it->second], t.score);
    }
  }
  if (names.size() <= cap) return names;
  std::vector<std::size_t> order(names.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return best[a] > best[b]; });
  order.resize(cap);
  std::sort(order.begin(), order.end());
  std::vector<std::string> out;
  out.reserve(cap);
  for (std::size_t i : order) out.push_back(names[i]);
  return out;
}

std::vector<DetectionBox> filter_detections(const std::vector<DetectionBox>& boxes, const PipelineConfig& config) {
  std::vector<DetectionBox> out;
  for (const auto& b : boxes) {
    const double t =
        b.source == BoxSource::closed_set ? config.closed_set_conf_threshold : config.open_set_conf_threshold;
    if (b.confidence >= t) out.push_back(b);
  }
  return out;
}

std::vector<DetectionBox> balanced_sample(const std::vector<DetectionBox>& boxes, std::int64_t width_px,
                                          std::int64_t height_px, const PipelineConfig& config) {
  const auto cap = static_cast<std::size_t>(config.max_boxes_per_image);
  std::vector<DetectionBox> out;
  if (boxes.size() <= cap) {
    out = boxes;
  } else {
    const double image_area = static_cast<double>(width_px) * static_cast<double>(height_px);
    auto is_small = [&](const DetectionBox& b) {
      return static_cast<double>(b.area()) / image_area < config.small_box_area_frac;
    };
    std::vector<DetectionBox> ranked = boxes;
    std::sort(ranked.begin(), ranked.end(), selection_before);
    const auto quota = static_cast<std::size_t>(std::ceil(config.small_box_quota_frac * static_cast<double>(cap)));
    std::vector<char> chosen(ranked.size(), 0);
    std::size_t picked = 0;
    for (std::size_t i = 0; i < ranked.size() && picked < std::min(quota, cap); ++i) {
      if (is_small(ranked[i])) {
        chosen[i] = 1;
        ++picked;
      }
    }
    for (std::size_t i = 0; i < ranked.size() && picked < cap; ++i) {
      if (!chosen[i]) {
        chosen[i] = 1;
        ++picked;
      }
    }
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      if (chosen[i]) out.push_back(ranked[i]);
    }
  }
  std::sort(out.begin(), out.end(), display_before);
  return out;
}

double quad_iou(const std::array<Point, 4>& a, const std::array<Point, 4>& b) {
  const Rect ra = bounds(a), rb = bounds(b);
  const double iw = std::max(0.0, std::min(ra.right, rb.right) - std::max(ra.left, rb.left));
  const double ih = std::max(0.0, std::min(ra.bottom, rb.bottom) - std::max(ra.top, rb.top));
  const double inter = iw * ih;
  const double uni = (ra.right - ra.left) * (ra.bottom - ra.top) + (rb.right - rb.left) * (rb.bottom - rb.top) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<OcrLine> order_ocr(const std::vector<OcrLine>& lines) {
  std::vector<OcrLine> boxed, loose;
  for (const auto& l : lines) (l.quad ? boxed : loose).push_back(l);
  std::stable_sort(boxed.begin(), boxed.end(), [](const OcrLine& a, const OcrLine& b) {
    const Rect ra = bounds(*a.quad), rb = bounds(*b.quad);
    if (ra.top != rb.top) return ra.top < rb.top;
    return ra.left < rb.left;
  });
  std::vector<OcrLine> out;
  for (auto& l : boxed) {
    const bool dup = std::any_of(out.begin(), out.end(), [&](const OcrLine& k) {
      return k.text == l.text && quad_iou(*k.quad, *l.quad) > 0.9;
    });
    if (!dup) out.push_back(std::move(l));
  }
  for (auto& l : loose) out.push_back(std::move(l));
  return out;
}

json expert_request_json(const ImageRecord& record, ExpertTask task, const std::vector<std::string>& vocabulary) {
  json req{{"image_id", record.id},
           {"image", {{"uri", record.uri}, {"width", record.width_px}, {"height", record.height_px}}},
           {"tasks", json::array({to_string(task)})}};
  if (task == ExpertTask::detect_open) req["vocabulary"] = vocabulary;
  return req;
}

RawAnnotation ExpertClient::annotate_image(const ImageRecord& record, const std::set<ExpertTask>& tasks) {
  RawAnnotation raw;
  bool any_response = false;
  std::vector<std::string> unreachable;

  auto call = [&](ExpertTask task, const std::vector<std::string>& vocab) {
    const auto body = expert_request_json(record, task, vocab).dump();
    auto outcome = post_with_retries(transport_, "/v1/annotate", body, policy_, rng_);
    const auto& res = outcome.response;
    if (res.status == 0) {
      unreachable.push_back(to_string(task));
      raw.warnings.push_back(to_string(task) + ": expert unreachable after " + std::to_string(outcome.attempts) +
                             " attempts (" + res.error + ")");
      return;
    }
    any_response = true;
    if (res.status < 200 || res.status >= 300) {
      raw.warnings.push_back(to_string(task) + ": expert returned HTTP " + std::to_string(res.status));
      return;
    }
    json parsed;
    try {
      parsed = json::parse(res.body);
    } catch (const json::parse_error& e) {
      throw SchemaError(record.id + " " + to_string(task) + ": response is not JSON: " + e.what());
    }
    const auto default_source = task == ExpertTask::detect_open ? BoxSource::open_set : BoxSource::closed_set;
    ParsedSection section;
    try {
      section = parse_expert_response(parsed, record.width_px, record.height_px, default_source);
    } catch (const SchemaError& e) {
      throw SchemaError(record.id + " " + to_string(task) + ": " + e.what());
    }
    switch (task) {
      case ExpertTask::tags:
        raw.tags = std::move(section.tags);
        break;
      case ExpertTask::detect_closed:
      case ExpertTask::detect_open:
        raw.boxes.insert(raw.boxes.end(), section.boxes.begin(), section.boxes.end());
        raw.invalid_boxes += section.invalid_boxes;
        if (section.invalid_boxes > 0) {
          raw.warnings.push_back(to_string(task) + ": dropped " + std::to_string(section.invalid_boxes) +
                                 " invalid boxes");
        }
        break;
      case ExpertTask::ocr:
        raw.ocr = std::move(section.ocr);
        break;
    }
  };

  for (auto task : {ExpertTask::tags, ExpertTask::detect_closed, ExpertTask::ocr}) {
    if (tasks.count(task)) call(task, {});
  }
  if (tasks.count(ExpertTask::detect_open)) {
    const auto vocab = derive_open_vocab(raw.tags);
    if (!vocab.empty()) call(ExpertTask::detect_open, vocab);
  }
  if (!any_response && !unreachable.empty()) {
    throw ServiceUnavailableError("expert service unreachable for image \"" + record.id + "\"");
  }
  return raw;
}

AnnotationBundle build_bundle(const ImageRecord& record, RawAnnotation raw, const PipelineConfig& config) {
  AnnotationBundle b;
  b.image_id = record.id;
  b.uri = record.uri;
  b.width_px = record.width_px;
  b.height_px = record.height_px;
  std::unordered_map<std::string, std::size_t> seen;
  for (auto& t : raw.tags) {
    auto [it, fresh] = seen.emplace(t.name, b.tags.size());
    if (fresh) {
      b.tags.push_back(std::move(t));
    } else {
      b.tags[it->second].score = std::max(b.tags[it->second].score, t.score);
    }
  }
  b.boxes = balanced_sample(filter_detections(raw.boxes, config), record.width_px, record.height_px, config);
  b.ocr = order_ocr(raw.ocr);
  b.world_knowledge = record.web_caption;
  b.warnings = std::move(raw.warnings);
  return b;
}

void validate_bundle(const AnnotationBundle& b, const PipelineConfig& config) {
  auto fail = [&](const std::string& what) { throw SchemaError("bundle \"" + b.image_id + "\": " + what); };
  if (b.boxes.size() > static_cast<std::size_t>(config.max_boxes_per_image)) fail("too many boxes");
  for (const auto& box : b.boxes) {
    if (box.label.empty() || box.label.find('\n') != std::string::npos) fail("box label must be one non-empty line");
    if (!(0 <= box.x1 && box.x1 < box.x2 && box.x2 <= b.width_px)) fail("box x-range outside the image");
    if (!(0 <= box.y1 && box.y1 < box.y2 && box.y2 <= b.height_px)) fail("box y-range outside the image");
    const double t =
        box.source == BoxSource::closed_set ? config.closed_set_conf_threshold : config.open_set_conf_threshold;
    if (box.confidence < t) fail("box below its confidence threshold");
  }
  for (const auto& l : b.ocr) {
    if (l.text.empty() || l.text != squash_whitespace(l.text)) fail("ocr text must be one trimmed non-empty line");
  }
  for (const auto& t : b.tags) {
    if (t.name.empty()) fail("empty tag name");
  }
}

json bundle_to_json(const AnnotationBundle& b) {
  json tags = json::array(), boxes = json::array(), ocr = json::array();
  for (const auto& t : b.tags) tags.push_back({{"name", t.name}, {"score", t.score}});
  for (const auto& x : b.boxes) {
    boxes.push_back({{"label", x.label},
                     {"bbox", {x.x1, x.y1, x.x2, x.y2}},
                     {"score", x.confidence},
                     {"source", to_string(x.source)}});
  }
  for (const auto& l : b.ocr) {
    json line{{"text", l.text}, {"score", l.confidence}};
    if (l.quad) {
      json q = json::array();
      for (const auto& p : *l.quad) q.push_back({p.x, p.y});
      line["bbox"] = std::move(q);
    }
    ocr.push_back(std::move(line));
  }
  return json{{"image_id", b.image_id},   {"uri", b.uri},   {"width", b.width_px},
              {"height", b.height_px},    {"tags", tags},   {"boxes", boxes},
              {"ocr", ocr},               {"world_knowledge", b.world_knowledge},
              {"warnings", b.warnings}};
}

AnnotationBundle bundle_from_json(const json& j) {
  try {
    AnnotationBundle b;
    b.image_id = j.at("image_id").get<std::string>();
    b.uri = j.value("uri", "");
    b.width_px = j.at("width").get<std::int64_t>();
    b.height_px = j.at("height").get<std::int64_t>();
    b.world_knowledge = j.value("world_knowledge", "");
    b.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& t : j.at("tags")) b.tags.push_back({t.at("name").get<std::string>(), t.at("score").get<double>()});
    for (const auto& x : j.at("boxes")) {
      DetectionBox box;
      box.label = x.at("label").get<std::string>();
      const auto& bb = x.at("bbox");
      box.x1 = bb.at(0).get<std::int64_t>();
      box.y1 = bb.at(1).get<std::int64_t>();
      box.x2 = bb.at(2).get<std::int64_t>();
      box.y2 = bb.at(3).get<std::int64_t>();
      box.confidence = x.at("score").get<double>();
      box.source = source_from_string(x.at("source").get<std::string>());
      b.boxes.push_back(std::move(box));
    }
    for (const auto& l : j.at("ocr")) {
      OcrLine line;
      line.text = l.at("text").get<std::string>();
      line.confidence = l.at("score").get<double>();
      if (l.contains("bbox")) line.quad = parse_quad(l.at("bbox"));
      b.ocr.push_back(std::move(line));
    }
    return b;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("annotation bundle: ") + e.what());
  }
}

}  // namespace densefuse
