#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "wqe/labels.hpp"

namespace wqe {

struct SpanAnnotation {
  std::string annotator_id;
  std::vector<ErrorSpan> spans;
};

struct PostEdit {
  std::string annotator_id;
  std::string text;
};

// One line of an annotation file. `language` is optional and groups segments
// for per-language evaluation; it defaults to "all".
struct AnnotationRecord {
  std::string segment_id;
  std::string mt_text;
  std::string language = "all";
  std::vector<SpanAnnotation> annotations;
  std::vector<PostEdit> post_edits;
};

// Normalized spans per annotator, deriving spans from post-edits where needed.
// An annotator present in both lists contributes the union.
std::map<std::string, std::vector<ErrorSpan>> annotator_spans(const AnnotationRecord& record);

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);
void save_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path);

}  // namespace wqe
