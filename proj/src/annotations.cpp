#include "wqe/annotations.hpp"

#include "json.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"
#include "wqe/utf8.hpp"

namespace wqe {

using nlohmann::json;

std::map<std::string, std::vector<ErrorSpan>> annotator_spans(const AnnotationRecord& record) {
  std::map<std::string, std::vector<ErrorSpan>> out;
  for (const auto& a : record.annotations) {
    auto& dst = out[a.annotator_id];
    dst.insert(dst.end(), a.spans.begin(), a.spans.end());
  }
  for (const auto& pe : record.post_edits) {
    auto spans = spans_from_edits(record.mt_text, pe.text, pe.annotator_id);
    auto& dst = out[pe.annotator_id];
    dst.insert(dst.end(), spans.begin(), spans.end());
  }
  for (auto& [id, spans] : out) spans = normalize_spans(std::move(spans));
  return out;
}

namespace {

AnnotationRecord parse_record(const json& j) {
  AnnotationRecord r;
  r.segment_id = j.at("segment_id").get<std::string>();
  r.mt_text = j.at("mt_text").get<std::string>();
  if (j.contains("language") && !j["language"].is_null()) r.language = j["language"].get<std::string>();
  const std::size_t text_len = utf8::length(r.mt_text);
  if (j.contains("annotations")) {
    for (const auto& a : j["annotations"]) {
      SpanAnnotation sa;
      sa.annotator_id = a.at("annotator_id").get<std::string>();
      for (const auto& s : a.value("spans", json::array())) {
        ErrorSpan span;
        span.char_start = s.at("start").get<std::size_t>();
        span.char_end = s.at("end").get<std::size_t>();
        span.severity = parse_severity(s.value("severity", std::string("unspecified")));
        span.annotator_id = sa.annotator_id;
        if (span.char_start >= span.char_end || span.char_end > text_len) {
          throw InvalidInput("segment " + r.segment_id + ": span [" + std::to_string(span.char_start) + ", " +
                             std::to_string(span.char_end) + ") outside MT text");
        }
        sa.spans.push_back(std::move(span));
      }
      r.annotations.push_back(std::move(sa));
    }
  }
  if (j.contains("post_edits")) {
    for (const auto& p : j["post_edits"]) {
      r.post_edits.push_back({p.at("annotator_id").get<std::string>(), p.at("text").get<std::string>()});
    }
  }
  return r;
}

}  // namespace

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path) {
  std::vector<AnnotationRecord> records;
  for (const auto& line : jsonl::split_lines(jsonl::read_text(path))) {
    if (line.text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(parse_record(json::parse(line.text)));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line.number) + ": " + e.what());
    }
  }
  return records;
}

void save_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) {
    json j;
    j["segment_id"] = r.segment_id;
    j["mt_text"] = r.mt_text;
    j["language"] = r.language;
    json anns = json::array();
    for (const auto& a : r.annotations) {
      json spans = json::array();
      for (const auto& s : a.spans) {
        spans.push_back({{"start", s.char_start}, {"end", s.char_end}, {"severity", severity_label(s.severity)}});
      }
      anns.push_back({{"annotator_id", a.annotator_id}, {"spans", std::move(spans)}});
    }
    j["annotations"] = std::move(anns);
    json pes = json::array();
    for (const auto& p : r.post_edits) pes.push_back({{"annotator_id", p.annotator_id}, {"text", p.text}});
    j["post_edits"] = std::move(pes);
    out += j.dump();
    out += '\n';
  }
  jsonl::write_text(path, out);
}

}  // namespace wqe
