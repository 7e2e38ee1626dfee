#pragma once

#include <filesystem>
#include <string>

#include "wqe/trace.hpp"

namespace wqe {

// `.wqet.jsonl` layout: a header line {schema_version, kind, num_segments}
// followed by one segment per line. Every line, including the last, ends with
// '\n'; a file that stops short of that is rejected as truncated.
TraceFile parse_trace_file(const std::string& content, const std::string& origin = "<memory>");
std::string serialize_trace_file(const TraceFile& file);

// Paths ending in ".gz" are gzip (de)compressed.
TraceFile load_trace(const std::filesystem::path& path);
void save_trace(const TraceFile& file, const std::filesystem::path& path);

}  // namespace wqe
