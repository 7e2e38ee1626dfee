#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace wqe::jsonl {

// Whole-file text I/O; files ending in ".gz" are transparently (de)compressed.
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& content);

struct Line {
  std::size_t number = 0;  // 1-based
  std::string text;
  bool terminated = true;  // false when the file ends without a newline
};

std::vector<Line> split_lines(const std::string& content);

}  // namespace wqe::jsonl
