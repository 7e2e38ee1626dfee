#include "wqe/trace_io.hpp"

#include "json.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"

namespace wqe {

using nlohmann::json;

namespace {

json meta_to_json(const ModelMeta& m) {
  return {{"num_layers", m.num_layers},
          {"num_heads", m.num_heads},
          {"vocab_size", m.vocab_size},
          {"architecture", architecture_name(m.architecture)}};
}

ModelMeta meta_from_json(const json& j) {
  ModelMeta m;
  m.num_layers = j.at("num_layers").get<int>();
  m.num_heads = j.at("num_heads").get<int>();
  m.vocab_size = j.at("vocab_size").get<int>();
  m.architecture = parse_architecture(j.at("architecture").get<std::string>());
  return m;
}

json tokens_to_json(const std::vector<TokenSpan>& tokens) {
  json arr = json::array();
  for (const auto& t : tokens) {
    json tj = {{"text", t.token_string}, {"special", t.is_special}};
    if (!t.is_special) {
      tj["start"] = t.char_start;
      tj["end"] = t.char_end;
    }
    arr.push_back(std::move(tj));
  }
  return arr;
}

std::vector<TokenSpan> tokens_from_json(const json& arr) {
  std::vector<TokenSpan> tokens;
  for (const auto& tj : arr) {
    TokenSpan t;
    t.token_string = tj.at("text").get<std::string>();
    t.is_special = tj.value("special", false);
    if (!t.is_special) {
      t.char_start = tj.at("start").get<std::size_t>();
      t.char_end = tj.at("end").get<std::size_t>();
    }
    tokens.push_back(std::move(t));
  }
  return tokens;
}

template <typename T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
void get_optional(const json& j, const char* key, std::optional<T>& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

json config_to_json(const DeskModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"model_dim", c.model_dim},
          {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
          {"architecture", architecture_name(c.architecture)},
          {"dropout_p", c.dropout_p},     {"seed", c.seed}};
}

DeskModelConfig config_from_json(const json& j) {
  DeskModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.dropout_p = j.at("dropout_p").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json full_to_json(const GenerationTrace& t) {
  json j;
  j["segment_id"] = t.segment_id;
  j["model_meta"] = meta_to_json(t.model_meta);
  j["tokens"] = tokens_to_json(t.tokens);
  json steps = json::array();
  for (const auto& s : t.steps) {
    json sj;
    sj["chosen_token_id"] = s.chosen_token_id;
    sj["final_dist"] = s.final_dist;
    put_optional(sj, "layer_dists", s.layer_dists);
    put_optional(sj, "attention", s.attention);
    put_optional(sj, "mcd_chosen_logprobs", s.mcd_chosen_logprobs);
    put_optional(sj, "blood_layer_scores", s.blood_layer_scores);
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  if (t.desk) {
    j["desk"] = {{"config", config_to_json(t.desk->config)},
                 {"source_ids", t.desk->source_ids},
                 {"target_ids", t.desk->target_ids}};
  }
  return j;
}

GenerationTrace full_from_json(const json& j) {
  GenerationTrace t;
  t.segment_id = j.at("segment_id").get<std::string>();
  t.model_meta = meta_from_json(j.at("model_meta"));
  t.tokens = tokens_from_json(j.at("tokens"));
  for (const auto& sj : j.at("steps")) {
    StepRecord s;
    s.chosen_token_id = sj.at("chosen_token_id").get<int>();
    s.final_dist = sj.at("final_dist").get<std::vector<double>>();
    get_optional(sj, "layer_dists", s.layer_dists);
    get_optional(sj, "attention", s.attention);
    get_optional(sj, "mcd_chosen_logprobs", s.mcd_chosen_logprobs);
    get_optional(sj, "blood_layer_scores", s.blood_layer_scores);
    t.steps.push_back(std::move(s));
  }
  if (auto it = j.find("desk"); it != j.end() && !it->is_null()) {
    DeskProvenance d;
    d.config = config_from_json(it->at("config"));
    d.source_ids = it->at("source_ids").get<std::vector<int>>();
    d.target_ids = it->at("target_ids").get<std::vector<int>>();
    t.desk = std::move(d);
  }
  return t;
}

json summary_to_json(const SummaryTrace& t) {
  json j;
  j["segment_id"] = t.segment_id;
  j["model_meta"] = meta_to_json(t.model_meta);
  j["tokens"] = tokens_to_json(t.tokens);
  json steps = json::array();
  for (const auto& s : t.steps) {
    json sj = json::object();
    put_optional(sj, "surprisal", s.surprisal);
    put_optional(sj, "entropy", s.entropy);
    put_optional(sj, "mcd_avg", s.mcd_avg);
    put_optional(sj, "mcd_var", s.mcd_var);
    put_optional(sj, "ll_surprisal", s.ll_surprisal);
    put_optional(sj, "ll_kl", s.ll_kl);
    put_optional(sj, "pred_depth", s.pred_depth);
    put_optional(sj, "attn_entropy_avg", s.attn_entropy_avg);
    put_optional(sj, "attn_entropy_max", s.attn_entropy_max);
    put_optional(sj, "blood", s.blood);
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  return j;
}

SummaryTrace summary_from_json(const json& j) {
  SummaryTrace t;
  t.segment_id = j.at("segment_id").get<std::string>();
  t.model_meta = meta_from_json(j.at("model_meta"));
  t.tokens = tokens_from_json(j.at("tokens"));
  for (const auto& sj : j.at("steps")) {
    SummaryStep s;
    get_optional(sj, "surprisal", s.surprisal);
    get_optional(sj, "entropy", s.entropy);
    get_optional(sj, "mcd_avg", s.mcd_avg);
    get_optional(sj, "mcd_var", s.mcd_var);
    get_optional(sj, "ll_surprisal", s.ll_surprisal);
    get_optional(sj, "ll_kl", s.ll_kl);
    get_optional(sj, "pred_depth", s.pred_depth);
    get_optional(sj, "attn_entropy_avg", s.attn_entropy_avg);
    get_optional(sj, "attn_entropy_max", s.attn_entropy_max);
    get_optional(sj, "blood", s.blood);
    t.steps.push_back(std::move(s));
  }
  return t;
}

}  // namespace

TraceFile parse_trace_file(const std::string& content, const std::string& origin) {
  const auto lines = jsonl::split_lines(content);
  if (lines.empty()) throw ParseError(origin + ": empty trace file");
  for (const auto& line : lines) {
    if (!line.terminated) {
      throw ParseError(origin + ":" + std::to_string(line.number) + ": unterminated last line (truncated file?)");
    }
  }

  TraceFile file;
  std::size_t expected = 0;
  try {
    const json header = json::parse(lines.front().text);
    if (!header.is_object() || !header.contains("schema_version")) {
      throw ParseError(origin + ":1: missing header line");
    }
    const int version = header.at("schema_version").get<int>();
    if (version != kTraceSchemaVersion) {
      throw VersionError(origin + ": schema_version " + std::to_string(version) + " unsupported (expected " +
                         std::to_string(kTraceSchemaVersion) + ")");
    }
    const auto kind = header.at("kind").get<std::string>();
    if (kind == "full") {
      file.kind = TraceKind::full;
    } else if (kind == "summary") {
      file.kind = TraceKind::summary;
    } else {
      throw ParseError(origin + ":1: unknown trace kind '" + kind + "'");
    }
    expected = header.at("num_segments").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(origin + ":1: bad header: " + e.what());
  }

  for (std::size_t k = 1; k < lines.size(); ++k) {
    const auto& line = lines[k];
    try {
      const json j = json::parse(line.text);
      if (file.kind == TraceKind::full) {
        file.full.push_back(full_from_json(j));
      } else {
        file.summary.push_back(summary_from_json(j));
      }
    } catch (const json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line.number) + ": " + e.what());
    } catch (const InvalidConfig& e) {
      throw ParseError(origin + ":" + std::to_string(line.number) + ": " + e.what());
    }
  }
  if (file.size() != expected) {
    throw ParseError(origin + ": header announces " + std::to_string(expected) + " segments, found " +
                     std::to_string(file.size()));
  }
  return file;
}

std::string serialize_trace_file(const TraceFile& file) {
  std::string out;
  json header = {{"schema_version", kTraceSchemaVersion},
                 {"kind", file.kind == TraceKind::full ? "full" : "summary"},
                 {"num_segments", file.size()}};
  out += header.dump();
  out += '\n';
  if (file.kind == TraceKind::full) {
    for (const auto& t : file.full) {
      out += full_to_json(t).dump();
      out += '\n';
    }
  } else {
    for (const auto& t : file.summary) {
      out += summary_to_json(t).dump();
      out += '\n';
    }
  }
  return out;
}

TraceFile load_trace(const std::filesystem::path& path) {
  return parse_trace_file(jsonl::read_text(path), path.string());
}

void save_trace(const TraceFile& file, const std::filesystem::path& path) {
  jsonl::write_text(path, serialize_trace_file(file));
}

}  // namespace wqe
