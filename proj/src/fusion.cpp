#include "densefuse/fusion.hpp"

#include <unordered_map>

#include "densefuse/error.hpp"

namespace densefuse {

namespace {

const std::string kMetaPreamble =
    "You are the most powerful large multimodal model which is responsible for generating image description to help "
    "the blind people to understand the world. Since they cannot see, so you should describe the image as detailed "
    "as possible.\n"
    "\n"
    "The description of image must abide by the following policies:\n"
    "    1. The generated caption must be comprehensive and detailed plain text, covering as many aspects / content / "
    "areas / contents of the image as possible.\n"
    "    2. You may describe the foreground / background / salient objects.\n"
    "    3. When describing objects, please endeavor to include as much of the following information:\n"
    "        3.1. textures / attributes / locations / presence / status / characteristics / numbers of objects\n"
    "        3.2. relative positions between objects\n"
    "    4. The composition / color / layout / texture of image should also be considered.\n"
    "    5. You may describe the elements one by one with details.\n"
    "    6. If there are common sense or world knowledge, for example, species, celebrities, scenic spots and "
    "historical sites, you must state them explicitly instead of using phrases like \"a person\", \"a place\", etc.\n"
    "    7. Other objective and subjective details that can help understand and reproduce the image.\n"
    "    8. Text contents must be appeared in the caption if there exists. Keep the original language of text "
    "content.\n"
    "    9. The description should be purely factual, with no subjective speculation.\n"
    "    10. If there are some statement are inferred, just state the conclusion. DO NOT add the evidence or thought "
    "chain.\n"
    "    11. DO NOT add description associated with aspects like mood or atmosphere.\n"
    "    12. DO NOT including any reasoning description like \"probably because\" or \"appears to be\"\n"
    "    13. DO NOT add any unnecessary speculation about the things that are not part of the image such as \"the "
    "image is inspiring to viewers\" or \"seeing this makes you feel joy\".\n"
    "    14. DO NOT add things such as \"creates a unique and entertaining visual\", as these descriptions are "
    "interpretations and not a part of the image itself.\n"
    "    15. DO NOT analyze the text content in the image, and only tell the content themselves.\n"
    "    16. DO NOT add any further analysis to the image.\n"
    "    17. DO NOT use introductory phrases like \"The image showcases\", \"The photo captures\", \"The image shows\" "
    "and more.\n"
    "    18. The caption should NO longer than 192 words.\n"
    "Besides image, you are also provided with some external information to help you understanding the image "
    "including a short caption, detection results, ocr results, attributes, etc. The short caption might contains "
    "rich world knowledge which should be considered in the final caption but also may not have any relevance to the "
    "image. Besides, there might be some errors in the external information including detail missing or wrong "
    "details. If there are mistakes, you may ignore them. Note that external information like bounding box are just "
    "a reference information, some details like bounding box should not be presented in the final caption since it's "
    "not a common information in caption. If the external information is not used, DO NOT specify the reason of not "
    "using them.\n";

const std::string kEnginePreamble =
    "You are a powerful multimodal model and you should generate detailed descriptions of this image, using "
    "additional external information such as [Caption], [Detection Box], and [OCR]. [Caption] might contain rich "
    "world knowledge which should be considered in the final description but also may not have any relevance to the "
    "image. Although this information may contain errors or be incomplete, you should disregard any inaccuracies. "
    "External details like detection boxes are just for reference and should not be included in the final "
    "description. If external information is not used, do not specify why.\n";

const std::string kExternalHeader = "[External Information]:\n";
const std::string kWorldKnowledge = "    [World Knowledge]: ";
const std::string kBoxHeader = "    [Detection Box]:\n";
const std::string kOcrHeader = "    [OCR]:\n";
const std::string kItemIndent = "        ";
const std::string kImageSentinel = "[IMAGE]:";

// The meta template leaves a blank line before the sentinel; the engine template does not.
const std::string& tail(PromptKind kind) {
  static const std::string meta = "\n" + kImageSentinel;
  return kind == PromptKind::meta_gpt4v ? meta : kImageSentinel;
}

void check_single_line(const std::string& s, const std::string& image_id, const char* what) {
  if (s.empty() || s.find('\n') != std::string::npos || s.find('\r') != std::string::npos) {
    throw SchemaError("bundle \"" + image_id + "\": " + what + " must be one non-empty line");
  }
}

std::vector<std::string> split_lines(std::string_view body, const char* section) {
  std::vector<std::string> out;
  while (!body.empty()) {
    const auto nl = body.find('\n');
    if (nl == std::string_view::npos) throw FormatError(std::string(section) + " line is not newline-terminated");
    auto line = body.substr(0, nl);
    if (line.substr(0, kItemIndent.size()) != kItemIndent) {
      throw FormatError(std::string(section) + " line lacks item indentation");
    }
    out.emplace_back(line.substr(kItemIndent.size()));
    body.remove_prefix(nl + 1);
  }
  return out;
}

}  // namespace

const std::string& prompt_preamble(PromptKind kind) {
  return kind == PromptKind::meta_gpt4v ? kMetaPreamble : kEnginePreamble;
}

std::vector<std::string> format_boxes(const std::vector<DetectionBox>& boxes) {
  std::unordered_map<std::string, std::size_t> total, seen;
  for (const auto& b : boxes) ++total[b.label];
  std::vector<std::string> lines;
  lines.reserve(boxes.size());
  for (const auto& b : boxes) {
    std::string label = b.label;
    if (total[b.label] > 1) label += " " + std::to_string(++seen[b.label]);
    lines.push_back(label + ": [" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) +
                    ", " + std::to_string(b.y2) + "]");
  }
  return lines;
}

std::string external_information(const AnnotationBundle& bundle) {
  for (const auto& b : bundle.boxes) check_single_line(b.label, bundle.image_id, "box label");
  for (const auto& l : bundle.ocr) check_single_line(l.text, bundle.image_id, "OCR text");
  std::string out = kExternalHeader;
  out += kWorldKnowledge + bundle.world_knowledge + "\n";
  out += kBoxHeader;
  for (const auto& line : format_boxes(bundle.boxes)) out += kItemIndent + line + "\n";
  out += kOcrHeader;
  for (const auto& l : bundle.ocr) out += kItemIndent + l.text + "\n";
  return out;
}

FusionPrompt assemble_prompt(const AnnotationBundle& bundle, PromptKind kind) {
  FusionPrompt p;
  p.kind = kind;
  p.image_id = bundle.image_id;
  p.image_ref = bundle.uri.empty() ? bundle.image_id : bundle.uri;
  p.text = prompt_preamble(kind) + external_information(bundle) + tail(kind);
  return p;
}

FusionPrompt assemble_meta_prompt(const AnnotationBundle& bundle) {
  return assemble_prompt(bundle, PromptKind::meta_gpt4v);
}

FusionPrompt assemble_engine_prompt(const AnnotationBundle& bundle) {
  return assemble_prompt(bundle, PromptKind::engine);
}

PromptSections extract_sections(const std::string& text, PromptKind kind) {
  const std::string head = prompt_preamble(kind) + kExternalHeader + kWorldKnowledge;
  const std::string& end = tail(kind);
  if (text.size() < head.size() + end.size() || text.compare(0, head.size(), head) != 0 ||
      text.compare(text.size() - end.size(), end.size(), end) != 0) {
    throw FormatError("prompt does not match the " + to_string(kind) + " template");
  }
  const std::string_view middle(text.data() + head.size(), text.size() - head.size() - end.size());
  // Box and OCR lines are single-line, so the last box header is the real one
  // even if the world knowledge happens to contain the same text.
  const std::string box_marker = "\n" + kBoxHeader;
  const auto box_pos = middle.rfind(box_marker);
  if (box_pos == std::string_view::npos) throw FormatError("prompt has no [Detection Box] section");
  PromptSections out;
  out.world_knowledge = std::string(middle.substr(0, box_pos));
  auto rest = middle.substr(box_pos + box_marker.size());
  std::size_t ocr_pos = std::string_view::npos;
  for (std::size_t p = 0; p <= rest.size();) {
    if (rest.substr(p, kOcrHeader.size()) == kOcrHeader) {
      ocr_pos = p;
      break;
    }
    const auto nl = rest.find('\n', p);
    if (nl == std::string_view::npos) break;
    p = nl + 1;
  }
  if (ocr_pos == std::string_view::npos) throw FormatError("prompt has no [OCR] section");
  out.box_lines = split_lines(rest.substr(0, ocr_pos), "detection box");
  out.ocr_lines = split_lines(rest.substr(ocr_pos + kOcrHeader.size()), "OCR");
  return out;
}

nlohmann::json prompt_to_json(const FusionPrompt& p) {
  return {{"image_id", p.image_id}, {"kind", to_string(p.kind)}, {"image_ref", p.image_ref}, {"prompt", p.text}};
}

FusionPrompt prompt_from_json(const nlohmann::json& j) {
  try {
    FusionPrompt p;
    p.image_id = j.at("image_id").get<std::string>();
    p.kind = prompt_kind_from_string(j.at("kind").get<std::string>());
    p.image_ref = j.value("image_ref", p.image_id);
    p.text = j.at("prompt").get<std::string>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prompt record: ") + e.what());
  }
}

}  // namespace densefuse
