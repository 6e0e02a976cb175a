#include "densefuse/jsonl.hpp"

#include "densefuse/error.hpp"

namespace densefuse::jsonl {

void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    fn(line_no, line);
  }
  if (in.bad()) throw IoError("read failure on " + path.string());
}

std::vector<nlohmann::json> read_all(const std::filesystem::path& path) {
  std::vector<nlohmann::json> rows;
  for_each_line(path, [&](std::size_t line_no, const std::string& line) {
    if (line.empty()) return;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  });
  return rows;
}

void write_all(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : rows) out << dump_line(r);
  if (!out.flush()) throw IoError("write failure on " + path.string());
}

std::vector<std::string> read_text_lines(const std::filesystem::path& path) {
  std::vector<std::string> lines;
  for_each_line(path, [&](std::size_t, const std::string& line) {
    if (!line.empty()) lines.push_back(line);
  });
  return lines;
}

void write_text_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out.flush()) throw IoError("write failure on " + path.string());
}

}  // namespace densefuse::jsonl
