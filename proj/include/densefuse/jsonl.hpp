#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace densefuse::jsonl {

// Calls fn(line_no, line) for each line (1-based), without the trailing newline.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn);

// Parses every non-empty line as JSON. Throws FormatError naming file and line.
std::vector<nlohmann::json> read_all(const std::filesystem::path& path);

void write_all(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

// One JSON document per line, no ASCII escaping of UTF-8.
inline std::string dump_line(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) + "\n";
}

std::vector<std::string> read_text_lines(const std::filesystem::path& path);
void write_text_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

}  // namespace densefuse::jsonl
