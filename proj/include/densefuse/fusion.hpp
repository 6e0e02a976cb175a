#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "densefuse/config.hpp"
#include "densefuse/experts.hpp"

namespace densefuse {

struct FusionPrompt {
  PromptKind kind = PromptKind::engine;
  std::string image_id;
  std::string image_ref;  // uri handed to the engine as the image attachment
  std::string text;
};

// `<label>: [x1, y1, x2, y2]` per box; labels that occur more than once get
// 1-based ordinals in output order ("dog 1", "dog 2").
std::vector<std::string> format_boxes(const std::vector<DetectionBox>& boxes);

// Meta-dataset prompt and the shorter caption-engine prompt.
// Throws SchemaError if a label or OCR line is empty or spans lines.
FusionPrompt assemble_meta_prompt(const AnnotationBundle& bundle);
FusionPrompt assemble_engine_prompt(const AnnotationBundle& bundle);
FusionPrompt assemble_prompt(const AnnotationBundle& bundle, PromptKind kind);

// The shared "[External Information]:" block, from its header through the last OCR line.
std::string external_information(const AnnotationBundle& bundle);

struct PromptSections {
  std::string world_knowledge;
  std::vector<std::string> box_lines;
  std::vector<std::string> ocr_lines;
};

// Inverse of assembly. Throws FormatError when `text` does not follow the template.
PromptSections extract_sections(const std::string& text, PromptKind kind);

// Fixed instruction text preceding "[External Information]:".
const std::string& prompt_preamble(PromptKind kind);

nlohmann::json prompt_to_json(const FusionPrompt& p);
FusionPrompt prompt_from_json(const nlohmann::json& j);

}  // namespace densefuse
