#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "densefuse/catalog.hpp"
#include "densefuse/config.hpp"
#include "densefuse/http.hpp"

namespace densefuse {

struct Tag {
  std::string name;
  double score = 0.0;
  bool operator==(const Tag&) const = default;
};

enum class BoxSource { closed_set, open_set };
std::string to_string(BoxSource s);

struct DetectionBox {
  std::string label;
  std::int64_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double confidence = 0.0;
  BoxSource source = BoxSource::closed_set;

  std::int64_t area() const { return (x2 - x1) * (y2 - y1); }
  bool operator==(const DetectionBox&) const = default;
};

struct Point {
  double x = 0.0, y = 0.0;
  bool operator==(const Point&) const = default;
};

struct OcrLine {
  std::string text;
  std::optional<std::array<Point, 4>> quad;
  double confidence = 0.0;

  bool operator==(const OcrLine&) const = default;
};

struct AnnotationBundle {
  std::string image_id;
  std::string uri;
  std::int64_t width_px = 0;
  std::int64_t height_px = 0;
  std::vector<Tag> tags;
  std::vector<DetectionBox> boxes;
  std::vector<OcrLine> ocr;
  std::string world_knowledge;
  std::vector<std::string> warnings;

  bool operator==(const AnnotationBundle&) const = default;
};

enum class ExpertTask { tags, detect_closed, detect_open, ocr };
std::string to_string(ExpertTask t);
ExpertTask expert_task_from_string(const std::string& s);
inline const std::set<ExpertTask> kAllTasks = {ExpertTask::tags, ExpertTask::detect_closed, ExpertTask::detect_open,
                                               ExpertTask::ocr};

// Trim plus ASCII lowercase.
std::string fold_name(std::string_view s);
// Whitespace runs (including newlines) become one space; ends trimmed.
std::string squash_whitespace(std::string_view s);

struct ParsedSection {
  std::vector<Tag> tags;
  std::vector<DetectionBox> boxes;
  std::vector<OcrLine> ocr;
  std::size_t invalid_boxes = 0;  // degenerate or outside the image after clamping
};

// Validates an expert response body against the wire schema. Throws SchemaError
// on type or key violations. Boxes are rounded to integer pixels and clamped to
// the image; boxes with x2 <= x1 or y2 <= y1 are dropped and counted.
ParsedSection parse_expert_response(const nlohmann::json& body, std::int64_t width_px, std::int64_t height_px,
                                    BoxSource default_source = BoxSource::closed_set);

inline constexpr std::size_t kOpenVocabCap = 100;

// Unique folded tag names in first-occurrence order; when more than `cap`,
// keeps the `cap` names with the highest score (ties by first occurrence).
std::vector<std::string> derive_open_vocab(const std::vector<Tag>& tags, std::size_t cap = kOpenVocabCap);

std::vector<DetectionBox> filter_detections(const std::vector<DetectionBox>& boxes, const PipelineConfig& config);

// Caps the box list, reserving ceil(quota * cap) slots for small boxes. Output
// is ordered largest area first.
std::vector<DetectionBox> balanced_sample(const std::vector<DetectionBox>& boxes, std::int64_t width_px,
                                          std::int64_t height_px, const PipelineConfig& config);

// Reading order: top y, then left x; lines without a box keep input order at the
// end. Same-text lines whose boxes overlap with IoU > 0.9 collapse to the first.
std::vector<OcrLine> order_ocr(const std::vector<OcrLine>& lines);

// Axis-aligned IoU of the quads' bounding rectangles.
double quad_iou(const std::array<Point, 4>& a, const std::array<Point, 4>& b);

struct RawAnnotation {
  std::vector<Tag> tags;
  std::vector<DetectionBox> boxes;
  std::vector<OcrLine> ocr;
  std::vector<std::string> warnings;
  std::size_t invalid_boxes = 0;
};

class ExpertClient {
 public:
  ExpertClient(HttpTransport& transport, BackoffPolicy policy, std::uint64_t seed = 0)
      : transport_(transport), policy_(policy), rng_(seed) {}

  // One request per task. An HTTP error on a task leaves that section empty and
  // adds a warning. Throws ServiceUnavailableError if no task got any HTTP
  // response, SchemaError on a malformed body.
  RawAnnotation annotate_image(const ImageRecord& record, const std::set<ExpertTask>& tasks = kAllTasks);

 private:
  HttpTransport& transport_;
  BackoffPolicy policy_;
  std::mt19937_64 rng_;
};

// Confidence filter, balanced sampling, OCR ordering, and world knowledge pass-through.
AnnotationBundle build_bundle(const ImageRecord& record, RawAnnotation raw, const PipelineConfig& config);

// Checks the bundle invariants (box bounds and thresholds, cap, non-empty
// single-line labels and OCR text). Throws SchemaError.
void validate_bundle(const AnnotationBundle& b, const PipelineConfig& config);

nlohmann::json bundle_to_json(const AnnotationBundle& b);
AnnotationBundle bundle_from_json(const nlohmann::json& j);

nlohmann::json expert_request_json(const ImageRecord& record, ExpertTask task,
                                   const std::vector<std::string>& vocabulary);

}  // namespace densefuse
