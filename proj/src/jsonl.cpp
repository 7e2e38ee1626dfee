#include "wqe/jsonl.hpp"

#include <zlib.h>

#include <fstream>
#include <sstream>

#include "wqe/error.hpp"

namespace wqe::jsonl {

namespace {

bool is_gzip(const std::filesystem::path& path) { return path.extension() == ".gz"; }

}  // namespace

std::string read_text(const std::filesystem::path& path) {
  if (is_gzip(path)) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw IoError("cannot open " + path.string());
    std::string out;
    char buf[1 << 15];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
    int err = 0;
    const char* msg = gzerror(f, &err);
    const bool failed = n < 0 || (err != Z_OK && err != Z_STREAM_END);
    const std::string what = failed ? std::string(msg) : std::string();
    gzclose(f);
    // A truncated gzip stream decodes to a prefix; surface it as a parse failure.
    if (failed) throw ParseError(path.string() + ": " + what);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (is_gzip(path)) {
    gzFile f = gzopen(path.c_str(), "wb9");
    if (f == nullptr) throw IoError("cannot open " + path.string() + " for writing");
    const int written = content.empty() ? 0 : gzwrite(f, content.data(), static_cast<unsigned>(content.size()));
    const int rc = gzclose(f);
    if ((!content.empty() && written == 0) || rc != Z_OK) throw IoError("failed writing " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Line> split_lines(const std::string& content) {
  std::vector<Line> lines;
  std::size_t pos = 0;
  std::size_t number = 1;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos) {
      lines.push_back({number, content.substr(pos), false});
      break;
    }
    lines.push_back({number, content.substr(pos, nl - pos), true});
    pos = nl + 1;
    ++number;
  }
  return lines;
}

}  // namespace wqe::jsonl
