#include "wqe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <set>
#include <thread>

#include "json.hpp"
#include "wqe/deskmodel.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"
#include "wqe/rng.hpp"
#include "wqe/trace_io.hpp"
#include "wqe/utf8.hpp"

namespace wqe {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string exact(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t binomial(std::size_t n, std::size_t k) {
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---- desk corpus helpers ----

std::vector<double> word_distribution(const std::vector<double>& dist) {
  std::vector<double> out(dist.begin() + kFirstWordId, dist.end());
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (auto& p : out) p /= total;
  return out;
}

int sample_word(const std::vector<double>& dist, double temperature, double u) {
  auto w = word_distribution(dist);
  if (temperature != 1.0) {
    double total = 0.0;
    for (auto& p : w) {
      p = std::pow(p, 1.0 / temperature);
      total += p;
    }
    for (auto& p : w) p /= total;
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    acc += w[k];
    if (u < acc) return static_cast<int>(k) + kFirstWordId;
  }
  return static_cast<int>(w.size()) - 1 + kFirstWordId;
}

// Word from the lower half of the vocabulary by probability; higher severity
// picks a less probable word.
int sample_corruption(const std::vector<double>& dist, double severity) {
  std::vector<int> ids;
  for (int id = kFirstWordId; id < static_cast<int>(dist.size()); ++id) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)]; });
  const std::size_t half = std::max<std::size_t>(1, ids.size() / 2);
  return ids[std::min(half - 1, static_cast<std::size_t>((1.0 - severity) * static_cast<double>(half)))];
}

std::size_t draw_length(const CounterRng& rng, std::uint64_t counter, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(counter, hi - lo + 1));
}

std::string annotator_name(std::size_t a) { return "A" + std::to_string(a + 1); }

// Per-token labels of one annotator: gold labels with independent flips, plus
// severity-dependent misses of injected errors.
std::vector<std::uint8_t> noisy_labels(const DeskCorpusSegment& seg, double noise, double severity_miss,
                                       const CounterRng& rng) {
  std::vector<std::uint8_t> out(seg.corrupted);
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double flip = out[j] != 0 ? noise + severity_miss * (1.0 - seg.severity[j]) : noise;
    if (flip > 0.0 && rng.uniform(j) < flip) out[j] = out[j] != 0 ? 0 : 1;
  }
  return out;
}

ErrorSeverity severity_class(double s) {
  if (s < 1.0 / 3.0) return ErrorSeverity::minor;
  return s < 2.0 / 3.0 ? ErrorSeverity::major : ErrorSeverity::critical;
}

// ---- evaluation helpers ----

std::map<std::string, const std::vector<TokenSpan>*> index_trace_tokens(const TraceFile& traces) {
  std::map<std::string, const std::vector<TokenSpan>*> out;
  auto add = [&](const std::string& id, const std::vector<TokenSpan>& tokens) {
    if (!out.emplace(id, &tokens).second) throw AlignmentError("duplicate segment id in traces: " + id);
  };
  if (traces.kind == TraceKind::full) {
    for (const auto& t : traces.full) add(t.segment_id, t.tokens);
  } else {
    for (const auto& t : traces.summary) add(t.segment_id, t.tokens);
  }
  return out;
}

struct LabelledSegment {
  std::string segment_id;
  std::string language;
  std::map<std::string, LabelVector> labels;  // annotator -> token labels
};

std::vector<LabelledSegment> label_segments(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                                            Diagnostics* diagnostics) {
  const auto tokens = index_trace_tokens(traces);
  std::vector<LabelledSegment> out;
  std::set<std::string> seen;
  for (const auto& record : annotations) {
    if (!seen.insert(record.segment_id).second) {
      throw AlignmentError("duplicate segment id in annotations: " + record.segment_id);
    }
    const auto it = tokens.find(record.segment_id);
    if (it == tokens.end()) {
      emit(diagnostics, {Severity::warning, "missing_trace", "segment_id", record.segment_id, std::nullopt,
                         "annotated segment has no trace; skipped"});
      continue;
    }
    const std::size_t text_length = utf8::length(record.mt_text);
    LabelledSegment seg{record.segment_id, record.language, {}};
    for (const auto& [annotator, spans] : annotator_spans(record)) {
      seg.labels[annotator] = align_spans_to_tokens(spans, *it->second, text_length, record.segment_id, annotator).labels;
    }
    out.push_back(std::move(seg));
  }
  return out;
}

std::vector<std::string> languages_in_order(const std::vector<LabelledSegment>& segments) {
  std::vector<std::string> out;
  for (const auto& s : segments) {
    if (std::find(out.begin(), out.end(), s.language) == out.end()) out.push_back(s.language);
  }
  return out;
}

// Label sets of every annotator of `language` over the segments all of them annotated.
struct SharedLabels {
  std::vector<std::string> annotators;
  std::vector<std::string> segment_ids;
  std::vector<LabelVector> sets;
};

SharedLabels shared_labels(const std::vector<LabelledSegment>& segments, const std::string& language) {
  SharedLabels out;
  std::set<std::string> annotators;
  for (const auto& s : segments) {
    if (s.language != language) continue;
    for (const auto& [a, l] : s.labels) annotators.insert(a);
  }
  out.annotators.assign(annotators.begin(), annotators.end());
  out.sets.resize(out.annotators.size());
  for (const auto& s : segments) {
    if (s.language != language || s.labels.size() != annotators.size()) continue;
    out.segment_ids.push_back(s.segment_id);
    for (std::size_t a = 0; a < out.annotators.size(); ++a) {
      const auto& l = s.labels.at(out.annotators[a]);
      out.sets[a].insert(out.sets[a].end(), l.begin(), l.end());
    }
  }
  return out;
}

// metric id -> segment id -> values
using ScoreIndex = std::map<std::string, std::map<std::string, const MetricScores*>>;

// Metric ids grouped by family, families in canonical order.
std::vector<std::pair<std::string, std::vector<std::string>>> metric_ids_by_family(const ScoreTable& scores) {
  std::vector<std::string> families;
  for (const char* f : kMetricFamilies) {
    if (scores.count(f) != 0) families.push_back(f);
  }
  for (const auto& [f, s] : scores) {
    if (std::find(families.begin(), families.end(), f) == families.end()) families.push_back(f);
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  for (const auto& f : families) {
    std::vector<std::string> ids;
    for (const auto& m : scores.at(f)) {
      if (std::find(ids.begin(), ids.end(), m.metric_id) == ids.end()) ids.push_back(m.metric_id);
    }
    out.emplace_back(f, std::move(ids));
  }
  return out;
}

std::vector<double> pooled(const std::map<std::string, const MetricScores*>& by_segment, const std::string& metric,
                           const std::vector<std::string>& segment_ids) {
  std::vector<double> out;
  for (const auto& id : segment_ids) {
    const auto it = by_segment.find(id);
    if (it == by_segment.end()) throw AlignmentError("metric " + metric + " has no scores for segment " + id);
    out.insert(out.end(), it->second->values.begin(), it->second->values.end());
  }
  return out;
}

ScoreIndex index_scores(const ScoreTable& scores) {
  ScoreIndex out;
  for (const auto& [family, list] : scores) {
    for (const auto& m : list) {
      if (!out[m.metric_id].emplace(m.segment_id, &m).second) {
        throw AlignmentError("duplicate scores for " + m.metric_id + " / " + m.segment_id);
      }
    }
  }
  return out;
}

std::string strip_layer(const std::string& metric_id) {
  const auto pos = metric_id.find("[l=");
  return pos == std::string::npos ? metric_id : metric_id.substr(0, pos);
}

void finish_row(ReportRow& row, const std::vector<std::string>& languages) {
  std::vector<double> aps, f1s;
  for (const auto& lang : languages) {
    const auto it = row.units.find(lang);
    if (it == row.units.end() || it->second.empty()) continue;
    std::vector<double> a, f;
    for (const auto& u : it->second) {
      a.push_back(u.ap);
      f.push_back(u.f1);
    }
    row.per_language[lang] = {mean(a), mean(f)};
    aps.push_back(mean(a));
    f1s.push_back(mean(f));
  }
  row.average_ap = mean(aps);
  row.average_f1 = mean(f1s);
}

json range_json(const AgreementRange& r) { return {{"min", r.min}, {"avg", r.avg}, {"max", r.max}}; }

}  // namespace

// ---- desk-gen ----------------------------------------------------------------

std::vector<DeskCorpusSegment> desk_corpus(const DeskGenOptions& options) {
  options.model.validate();
  if (options.segments == 0) throw InvalidConfig("desk-gen: segments must be positive");
  if (options.min_source_length == 0 || options.min_source_length > options.max_source_length ||
      options.min_target_length == 0 || options.min_target_length > options.max_target_length) {
    throw InvalidConfig("desk-gen: invalid length range");
  }
  if (options.inject_errors > options.min_target_length) {
    throw InvalidConfig("desk-gen: inject_errors exceeds the minimum target length");
  }
  if (!(options.temperature > 0.0)) throw InvalidConfig("desk-gen: temperature must be positive");
  if (options.languages.empty()) throw InvalidConfig("desk-gen: at least one language is required");

  const DeskModel model(options.model);
  const CounterRng root = CounterRng(options.seed).split(hash_string("desk-gen"));
  const auto vocab_words = static_cast<std::uint64_t>(options.model.vocab_size - kFirstWordId);
  std::vector<DeskCorpusSegment> out;
  for (std::size_t i = 0; i < options.segments; ++i) {
    const CounterRng rng = root.split(i);
    DeskCorpusSegment seg;
    char id[32];
    std::snprintf(id, sizeof id, "seg-%05zu", i);
    seg.segment_id = id;
    seg.language = options.languages[i % options.languages.size()];

    const CounterRng src_rng = rng.split(1);
    const std::size_t src_len = draw_length(src_rng, 0, options.min_source_length, options.max_source_length);
    for (std::size_t k = 0; k < src_len; ++k) {
      seg.source_ids.push_back(kFirstWordId + static_cast<int>(src_rng.below(k + 1, vocab_words)));
    }

    const CounterRng tgt_rng = rng.split(2);
    const std::size_t tgt_len = draw_length(tgt_rng, 0, options.min_target_length, options.max_target_length);
    std::vector<std::size_t> positions(tgt_len);
    std::iota(positions.begin(), positions.end(), 0);
    for (std::size_t k = 0; k < options.inject_errors; ++k) {
      const auto j = k + static_cast<std::size_t>(tgt_rng.below(1000 + k, tgt_len - k));
      std::swap(positions[k], positions[j]);
    }
    seg.corrupted.assign(tgt_len, 0);
    seg.severity.assign(tgt_len, 0.0);
    for (std::size_t k = 0; k < options.inject_errors; ++k) {
      seg.corrupted[positions[k]] = 1;
      seg.severity[positions[k]] = tgt_rng.uniform(2000 + k);
    }

    const CounterRng sample_rng = rng.split(3);
    for (std::size_t j = 0; j < tgt_len; ++j) {
      const auto dist = model.next_token_distribution(seg.source_ids, seg.target_ids);
      seg.target_ids.push_back(seg.corrupted[j] != 0 ? sample_corruption(dist, seg.severity[j])
                                                     : sample_word(dist, options.temperature, sample_rng.uniform(j)));
    }
    out.push_back(std::move(seg));
  }
  return out;
}

DeskGenResult desk_generate(const DeskGenOptions& options) {
  if (options.annotators == 0) throw InvalidConfig("desk-gen: annotators must be positive");
  if (options.label_noise < 0.0 || options.label_noise >= 1.0) throw InvalidConfig("desk-gen: label_noise outside [0, 1)");
  if (options.severity_miss < 0.0 || options.label_noise + options.severity_miss > 1.0) {
    throw InvalidConfig("desk-gen: severity_miss must be >= 0 with label_noise + severity_miss <= 1");
  }
  if (options.mcd_passes < 0) throw InvalidConfig("desk-gen: mcd_passes must be >= 0");
  const auto corpus = desk_corpus(options);
  const DeskModel model(options.model);
  const CounterRng root = CounterRng(options.seed).split(hash_string("desk-annotate"));

  DeskGenResult result;
  result.traces.kind = TraceKind::full;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& seg = corpus[i];
    auto trace = model.force_decode(seg.segment_id, seg.source_ids, seg.target_ids, options.mcd_passes, options.seed);
    const auto text = render_desk_text(seg.target_ids);

    AnnotationRecord record;
    record.segment_id = seg.segment_id;
    record.mt_text = text.text;
    record.language = seg.language;
    for (std::size_t a = 0; a < options.annotators; ++a) {
      const auto labels = noisy_labels(seg, options.label_noise, options.severity_miss, root.split({i, a}));
      if (options.as_post_edits) {
        // Replace each marked token by the model's preferred alternative.
        std::vector<int> edited = seg.target_ids;
        for (std::size_t j = 0; j < labels.size(); ++j) {
          if (labels[j] == 0) continue;
          const auto& dist = trace.steps[j].final_dist;
          int best = -1;
          for (int id = kFirstWordId; id < static_cast<int>(dist.size()); ++id) {
            if (id == seg.target_ids[j]) continue;
            if (best < 0 || dist[static_cast<std::size_t>(id)] > dist[static_cast<std::size_t>(best)]) best = id;
          }
          edited[j] = best;
        }
        record.post_edits.push_back({annotator_name(a), render_desk_text(edited).text});
      } else {
        SpanAnnotation ann{annotator_name(a), {}};
        for (std::size_t j = 0; j < labels.size(); ++j) {
          if (labels[j] != 0) {
            const auto sev = seg.corrupted[j] != 0 ? severity_class(seg.severity[j]) : ErrorSeverity::minor;
            ann.spans.push_back({text.tokens[j].char_start, text.tokens[j].char_end, sev, ann.annotator_id});
          }
        }
        ann.spans = normalize_spans(std::move(ann.spans));
        record.annotations.push_back(std::move(ann));
      }
    }
    result.annotations.push_back(std::move(record));

    if (options.class_probs) {
      // A noisy span classifier working on whitespace words.
      const CounterRng cls = root.split({i, 1u << 20});
      TokenClassProbs probs{seg.segment_id, whitespace_tokens(text.text), {}};
      for (std::size_t w = 0; w < probs.scorer_tokens.size(); ++w) {
        const auto& word = probs.scorer_tokens[w];
        bool err = false;
        for (std::size_t j = 0; j < seg.corrupted.size(); ++j) {
          const auto& t = text.tokens[j];
          err = err || (seg.corrupted[j] != 0 && t.char_start < word.char_end && word.char_start < t.char_end);
        }
        const double e = (err ? 0.45 : 0.05) + 0.45 * cls.uniform(4 * w);
        const double a = 0.1 + cls.uniform(4 * w + 1);
        const double b = 0.1 + cls.uniform(4 * w + 2);
        const double c = 0.1 + cls.uniform(4 * w + 3);
        const double s = a + b + c;
        probs.probs.push_back({1.0 - e, e * a / s, e * b / s, e * c / s});
      }
      result.class_probs.push_back(std::move(probs));
    }
    result.traces.full.push_back(std::move(trace));
  }
  return result;
}

DeskGenResult cmd_desk_gen(const DeskGenOptions& options) {
  if (options.out_dir.empty()) throw InvalidConfig("desk-gen: output directory required");
  auto result = desk_generate(options);
  save_trace(result.traces, options.out_dir / kTracesFile);
  save_annotations(result.annotations, options.out_dir / kAnnotationsFile);
  if (options.class_probs) save_class_probs(result.class_probs, options.out_dir / kClassProbsFile);
  return result;
}

// ---- validate ----------------------------------------------------------------

Diagnostics cmd_validate(const fs::path& traces_path) { return validate_traces(load_trace(traces_path)); }

// ---- score -------------------------------------------------------------------

ScoreTable score_traces(const TraceFile& traces, const ScoreRunOptions& options, Diagnostics* diagnostics) {
  for (const auto& m : options.metrics) {
    if (!is_metric_family(m)) throw InvalidConfig("unknown metric family: " + m);
  }
  for (const auto& m : options.flip) {
    if (!is_metric_family(m)) throw InvalidConfig("unknown metric family in flip list: " + m);
  }
  auto wanted = [&](const std::string& family) {
    return options.metrics.empty() ||
           std::find(options.metrics.begin(), options.metrics.end(), family) != options.metrics.end();
  };
  const ScoreOptions score_options{options.mcd_passes, options.blood_probes, wanted("blood")};

  const std::size_t n = traces.size();
  std::vector<std::map<std::string, std::vector<MetricScores>>> per_segment(n);
  std::vector<Diagnostics> per_segment_diags(n);
  std::vector<std::string> ids(n);

  parallel_for(n, options.threads, [&](std::size_t i) {
    if (traces.kind == TraceKind::full) {
      const auto& trace = traces.full[i];
      ids[i] = trace.segment_id;
      std::unique_ptr<DeskModel> model;
      if (trace.desk && score_options.include_blood) model = std::make_unique<DeskModel>(trace.desk->config);
      per_segment[i] = scores_from_summary(summarize(trace, score_options, model.get(), &per_segment_diags[i]));
    } else {
      ids[i] = traces.summary[i].segment_id;
      per_segment[i] = scores_from_summary(traces.summary[i]);
    }
  });
  for (auto& d : per_segment_diags) {
    for (auto& x : d) emit(diagnostics, std::move(x));
  }

  ScoreTable out;
  for (const char* family : kMetricFamilies) {
    if (!wanted(family)) continue;
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < n; ++i) {
      if (per_segment[i].count(family) == 0) missing.push_back(ids[i]);
    }
    if (!missing.empty()) {
      emit(diagnostics, {Severity::warning, "metric_unavailable", family, missing.front(), std::nullopt,
                         std::string(family) + " unavailable for " + std::to_string(missing.size()) + " of " +
                             std::to_string(n) + " segments; not written"});
      continue;
    }
    const bool flip = std::find(options.flip.begin(), options.flip.end(), family) != options.flip.end();
    auto& dst = out[flip ? kFlipPrefix + std::string(family) : std::string(family)];
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& m : per_segment[i][family]) {
        if (flip) {
          m.metric_id = kFlipPrefix + m.metric_id;
          for (auto& v : m.values) v = -v;
        }
        dst.push_back(std::move(m));
      }
    }
  }
  return out;
}

ScoreTable cmd_score(const ScoreRunOptions& options, Diagnostics* diagnostics) {
  if (options.out_dir.empty()) throw InvalidConfig("score: output directory required");
  const auto traces = load_trace(options.traces);
  const auto problems = validate_traces(traces);
  bool failed = false;
  for (const auto& d : problems) {
    failed = failed || d.severity == Severity::error;
    emit(diagnostics, d);
  }
  if (failed) throw InvalidInput("score: " + options.traces.string() + " failed validation");
  auto table = score_traces(traces, options, diagnostics);
  fs::create_directories(options.out_dir);
  for (const auto& [family, scores] : table) save_scores(scores, options.out_dir / (family + kScoresSuffix));
  return table;
}

ScoreTable load_score_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("scores directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const std::string suffix = kScoresSuffix;
    if (entry.is_regular_file() && name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  ScoreTable out;
  for (const auto& f : files) {
    const auto name = f.filename().string();
    out[name.substr(0, name.size() - std::string(kScoresSuffix).size())] = load_scores(f);
  }
  if (out.empty()) throw IoError("no *" + std::string(kScoresSuffix) + " files in " + dir.string());
  return out;
}

// ---- evaluate ----------------------------------------------------------------

std::vector<EvalUnit> build_units(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                                  Diagnostics* diagnostics) {
  const auto segments = label_segments(annotations, traces, diagnostics);
  std::vector<EvalUnit> units;
  for (const auto& lang : languages_in_order(segments)) {
    std::map<std::string, EvalUnit> by_annotator;
    for (const auto& s : segments) {
      if (s.language != lang) continue;
      for (const auto& [a, labels] : s.labels) {
        auto& u = by_annotator[a];
        u.language = lang;
        u.annotator = a;
        u.segment_ids.push_back(s.segment_id);
        u.labels.insert(u.labels.end(), labels.begin(), labels.end());
      }
    }
    for (auto& [a, u] : by_annotator) {
      u.excluded = std::none_of(u.labels.begin(), u.labels.end(), [](std::uint8_t l) { return l != 0; });
      if (u.excluded) {
        emit(diagnostics, {Severity::warning, "no_positives", "labels", "", std::nullopt,
                           "language " + lang + ", annotator " + a + ": no positive labels; excluded"});
      }
      units.push_back(std::move(u));
    }
  }
  return units;
}

std::vector<double> pooled_scores(const std::vector<MetricScores>& scores, const std::vector<std::string>& segment_ids) {
  std::map<std::string, const MetricScores*> by_segment;
  std::string metric;
  for (const auto& m : scores) {
    by_segment.emplace(m.segment_id, &m);
    metric = m.metric_id;
  }
  return pooled(by_segment, metric, segment_ids);
}

EvalReport evaluate(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces, const ScoreTable& scores,
                    const std::vector<TokenClassProbs>* class_probs, const EvaluateOptions& options,
                    Diagnostics* diagnostics) {
  EvalReport report;
  const auto segments = label_segments(annotations, traces, nullptr);
  report.units = build_units(annotations, traces, diagnostics);
  report.languages = languages_in_order(segments);
  if (std::all_of(report.units.begin(), report.units.end(), [](const EvalUnit& u) { return u.excluded; })) {
    throw NoPositives("no positive labels in any language");
  }
  for (const auto& lang : report.languages) {
    const bool any = std::any_of(report.units.begin(), report.units.end(),
                                 [&](const EvalUnit& u) { return u.language == lang && !u.excluded; });
    if (!any) report.excluded_languages.push_back(lang);
  }

  const auto index = index_scores(scores);
  auto check_length = [](const std::vector<double>& s, const EvalUnit& u, const std::string& metric) {
    if (s.size() != u.labels.size()) {
      throw ShapeMismatch("metric " + metric + " has " + std::to_string(s.size()) + " scores for " +
                          std::to_string(u.labels.size()) + " labelled tokens (" + u.language + "/" + u.annotator + ")");
    }
  };

  auto score_row = [&](const std::string& metric, const std::function<std::vector<double>(const EvalUnit&)>& get,
                       bool keep_curve) {
    ReportRow row{metric, {}, {}, 0.0, 0.0};
    for (const auto& u : report.units) {
      if (u.excluded) continue;
      const auto s = get(u);
      check_length(s, u, metric);
      const auto f1 = optimal_f1(s, u.labels);
      row.units[u.language].push_back({u.annotator, average_precision(s, u.labels), f1.f1, f1.threshold, std::nullopt});
      if (keep_curve) report.pr_curves.push_back({metric, u.language, u.annotator, pr_curve(s, u.labels)});
    }
    finish_row(row, report.languages);
    report.rows.push_back(std::move(row));
  };

  for (const auto& [family, ids] : metric_ids_by_family(scores)) {
    for (const auto& id : ids) {
      const auto& by_segment = index.at(id);
      score_row(id, [&](const EvalUnit& u) { return pooled(by_segment, id, u.segment_ids); }, true);
    }
    if (ids.size() > 1) {
      ReportRow row{strip_layer(ids.front()) + "[best]", {}, {}, 0.0, 0.0};
      for (const auto& u : report.units) {
        if (u.excluded) continue;
        std::vector<std::vector<double>> layers;
        for (const auto& id : ids) {
          layers.push_back(pooled(index.at(id), id, u.segment_ids));
          check_length(layers.back(), u, id);
        }
        const auto best = best_layer(layers, u.labels);
        const auto f1 = optimal_f1(layers[best.layer], u.labels);
        row.units[u.language].push_back({u.annotator, best.ap, f1.f1, f1.threshold, best.layer});
      }
      finish_row(row, report.languages);
      report.rows.push_back(std::move(row));
    }
  }

  if (class_probs != nullptr) {
    const auto tokens = index_trace_tokens(traces);
    std::map<std::string, std::vector<double>> conf, binary;
    for (const auto& p : *class_probs) {
      const auto it = tokens.find(p.segment_id);
      if (it == tokens.end()) continue;
      conf[p.segment_id] = project_scores(xcomet_conf(p), p.scorer_tokens, *it->second, diagnostics).values;
      const auto bin = xcomet_binary(p, diagnostics);
      MetricScores as_scores{"xcomet_binary", p.segment_id, std::vector<double>(bin.labels.begin(), bin.labels.end())};
      binary[p.segment_id] = project_scores(as_scores, p.scorer_tokens, *it->second, diagnostics).values;
    }
    auto from = [](const std::map<std::string, std::vector<double>>& m, const char* name) {
      return [&m, name](const EvalUnit& u) {
        std::vector<double> out;
        for (const auto& id : u.segment_ids) {
          const auto it = m.find(id);
          if (it == m.end()) throw AlignmentError(std::string(name) + ": no class probabilities for segment " + id);
          out.insert(out.end(), it->second.begin(), it->second.end());
        }
        return out;
      };
    };
    score_row("xcomet_conf", from(conf, "xcomet_conf"), true);
    // Binary predictions: F1 at the fixed decision, not an optimized threshold.
    ReportRow row{"xcomet_binary", {}, {}, 0.0, 0.0};
    const auto get = from(binary, "xcomet_binary");
    for (const auto& u : report.units) {
      if (u.excluded) continue;
      const auto s = get(u);
      check_length(s, u, "xcomet_binary");
      const LabelVector pred(s.begin(), s.end());
      row.units[u.language].push_back({u.annotator, average_precision(s, u.labels), binary_f1(pred, u.labels), 1.0,
                                       std::nullopt});
    }
    finish_row(row, report.languages);
    report.rows.push_back(std::move(row));
  }

  {
    ReportRow row{"random", {}, {}, 0.0, 0.0};
    for (const auto& u : report.units) {
      if (u.excluded) continue;
      const auto base = random_baseline(u.labels, options.trials, options.seed ^ hash_string(u.language + "\x1f" + u.annotator));
      row.units[u.language].push_back({u.annotator, base.ap, base.f1_star, std::nan(""), std::nullopt});
    }
    finish_row(row, report.languages);
    report.rows.push_back(std::move(row));
  }

  for (const auto& lang : report.languages) {
    const auto shared = shared_labels(segments, lang);
    if (shared.annotators.size() < 2) {
      emit(diagnostics, {Severity::info, "single_annotator", "labels", "", std::nullopt,
                         "language " + lang + ": fewer than two annotators; no human-editor row"});
      continue;
    }
    try {
      report.human_editors.push_back({lang, human_agreement(shared.sets, diagnostics)});
    } catch (const NoPositives& e) {
      emit(diagnostics, {Severity::warning, "no_positives", "labels", "", std::nullopt, "language " + lang + ": " + e.what()});
    }
  }
  return report;
}

EvalReport cmd_evaluate(const EvaluateOptions& options, Diagnostics* diagnostics) {
  if (options.out_dir.empty()) throw InvalidConfig("evaluate: output directory required");
  const auto annotations = load_annotations(options.annotations);
  const auto traces = load_trace(options.traces);
  const auto scores = load_score_dir(options.scores_dir);
  std::optional<std::vector<TokenClassProbs>> probs;
  if (options.class_probs) probs = load_class_probs(*options.class_probs);
  auto report = evaluate(annotations, traces, scores, probs ? &*probs : nullptr, options, diagnostics);
  jsonl::write_text(options.out_dir / "report.json", report_json(report));
  jsonl::write_text(options.out_dir / "report.tsv", report_tsv(report));
  jsonl::write_text(options.out_dir / "pr_points.csv", pr_points_csv(report));
  return report;
}

std::string report_json(const EvalReport& report) {
  auto number = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j;
  j["languages"] = report.languages;
  j["excluded_languages"] = report.excluded_languages;
  json units = json::array();
  for (const auto& u : report.units) {
    const auto positives = std::count_if(u.labels.begin(), u.labels.end(), [](std::uint8_t l) { return l != 0; });
    units.push_back({{"language", u.language},
                     {"annotator", u.annotator},
                     {"segments", u.segment_ids.size()},
                     {"tokens", u.labels.size()},
                     {"positives", positives},
                     {"excluded", u.excluded}});
  }
  j["units"] = std::move(units);
  json rows = json::array();
  for (const auto& r : report.rows) {
    json langs = json::object();
    for (const auto& [lang, results] : r.units) {
      json list = json::array();
      for (const auto& u : results) {
        json e = {{"annotator", u.annotator}, {"ap", u.ap}, {"f1", u.f1}, {"threshold", number(u.threshold)}};
        if (u.layer) e["layer"] = *u.layer;
        list.push_back(std::move(e));
      }
      const auto& agg = r.per_language.at(lang);
      langs[lang] = {{"ap", agg.first}, {"f1", agg.second}, {"units", std::move(list)}};
    }
    rows.push_back({{"metric", r.metric},
                    {"average", {{"ap", number(r.average_ap)}, {"f1", number(r.average_f1)}}},
                    {"languages", std::move(langs)}});
  }
  j["rows"] = std::move(rows);
  json human = json::array();
  for (const auto& h : report.human_editors) {
    human.push_back({{"language", h.language},
                     {"ap", range_json(h.agreement.ap)},
                     {"f1", range_json(h.agreement.f1)},
                     {"golds_used", h.agreement.golds_used}});
  }
  j["human_editors"] = std::move(human);
  return j.dump(2) + "\n";
}

std::string report_tsv(const EvalReport& report) {
  std::string out = "metric";
  for (const auto& lang : report.languages) out += "\t" + lang + "_ap\t" + lang + "_f1";
  out += "\tavg_ap\tavg_f1\n";
  for (const auto& r : report.rows) {
    out += r.metric;
    for (const auto& lang : report.languages) {
      const auto it = r.per_language.find(lang);
      out += it == r.per_language.end() ? "\t-\t-" : "\t" + fixed(it->second.first, 4) + "\t" + fixed(it->second.second, 4);
    }
    out += "\t" + fixed(r.average_ap, 4) + "\t" + fixed(r.average_f1, 4) + "\n";
  }
  const std::pair<const char*, double AgreementRange::*> parts[] = {
      {"min", &AgreementRange::min}, {"avg", &AgreementRange::avg}, {"max", &AgreementRange::max}};
  if (!report.human_editors.empty()) {
    for (const auto& [name, member] : parts) {
      out += std::string("human_editors[") + name + "]";
      std::vector<double> aps, f1s;
      for (const auto& lang : report.languages) {
        const auto it = std::find_if(report.human_editors.begin(), report.human_editors.end(),
                                     [&](const HumanRow& h) { return h.language == lang; });
        if (it == report.human_editors.end()) {
          out += "\t-\t-";
          continue;
        }
        aps.push_back(it->agreement.ap.*member);
        f1s.push_back(it->agreement.f1.*member);
        out += "\t" + fixed(aps.back(), 4) + "\t" + fixed(f1s.back(), 4);
      }
      out += "\t" + fixed(mean(aps), 4) + "\t" + fixed(mean(f1s), 4) + "\n";
    }
  }
  return out;
}

std::string pr_points_csv(const EvalReport& report) {
  std::string out = "metric,language,annotator,threshold,precision,recall,f1\n";
  for (const auto& c : report.pr_curves) {
    for (const auto& p : c.points) {
      out += c.metric + "," + c.language + "," + c.annotator + "," + exact(p.threshold) + "," + exact(p.precision) + "," +
             exact(p.recall) + "," + exact(p.f1) + "\n";
    }
  }
  return out;
}

// ---- correlate ---------------------------------------------------------------

std::vector<CorrelationBand> correlate(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                                       const ScoreTable& scores, const CorrelateOptions& options,
                                       Diagnostics* diagnostics) {
  const auto segments = label_segments(annotations, traces, diagnostics);
  const auto index = index_scores(scores);
  std::vector<std::string> metrics;
  for (const auto& [family, ids] : metric_ids_by_family(scores)) {
    for (const auto& id : ids) {
      const bool selected = options.metrics.empty() ||
                            std::find(options.metrics.begin(), options.metrics.end(), id) != options.metrics.end() ||
                            std::find(options.metrics.begin(), options.metrics.end(), family) != options.metrics.end();
      if (selected) metrics.push_back(id);
    }
  }
  for (const auto& m : options.metrics) {
    const bool known = scores.count(m) != 0 || index.count(m) != 0;
    if (!known) throw InvalidConfig("correlate: unknown metric " + m);
  }

  std::vector<CorrelationBand> out;
  for (const auto& lang : languages_in_order(segments)) {
    const auto shared = shared_labels(segments, lang);
    if (shared.annotators.size() < 2) {
      throw InvalidInput("correlate: language " + lang + " has " + std::to_string(shared.annotators.size()) +
                         " annotator(s); at least two label sets are required");
    }
    for (const auto& metric : metrics) {
      const auto values = pooled(index.at(metric), metric, shared.segment_ids);
      if (values.size() != shared.sets.front().size()) throw ShapeMismatch("correlate: " + metric + " length differs from labels");
      for (std::size_t size = 1; size <= shared.sets.size(); ++size) {
        CorrelationBand band{lang, metric, size, binomial(shared.sets.size(), size), std::nullopt};
        try {
          band.result = subset_correlations(values, shared.sets, size, options.threads);
        } catch (const DegenerateInput& e) {
          emit(diagnostics, {Severity::warning, "degenerate", metric, "", std::nullopt,
                             "language " + lang + ", L=" + std::to_string(size) + ": " + e.what()});
        }
        out.push_back(std::move(band));
      }
    }
  }
  return out;
}

std::vector<CorrelationBand> cmd_correlate(const CorrelateOptions& options, Diagnostics* diagnostics) {
  if (options.out_path.empty()) throw InvalidConfig("correlate: output path required");
  const auto annotations = load_annotations(options.annotations);
  const auto traces = load_trace(options.traces);
  const auto scores = load_score_dir(options.scores_dir);
  auto bands = correlate(annotations, traces, scores, options, diagnostics);
  jsonl::write_text(options.out_path, bands_csv(bands));
  return bands;
}

std::string bands_csv(const std::vector<CorrelationBand>& bands) {
  std::string out = "language,metric,L,median,lower,upper,n_subsets,n_degenerate\n";
  for (const auto& b : bands) {
    out += b.language + "," + b.metric + "," + std::to_string(b.subset_size) + ",";
    if (b.result) {
      out += exact(b.result->median) + "," + exact(b.result->lower) + "," + exact(b.result->upper) + "," +
             std::to_string(b.num_subsets) + "," + std::to_string(b.result->degenerate) + "\n";
    } else {
      out += "nan,nan,nan," + std::to_string(b.num_subsets) + "," + std::to_string(b.num_subsets) + "\n";
    }
  }
  return out;
}

// ---- report ------------------------------------------------------------------

std::string merge_reports(const std::vector<ReportInput>& inputs) {
  if (inputs.empty()) throw InvalidInput("report: no input reports");
  std::vector<std::string> metrics;
  std::vector<std::map<std::string, std::pair<std::string, std::string>>> cells(inputs.size());
  auto cell = [](const json& v) { return v.is_number() ? fixed(v.get<double>(), 4) : std::string("-"); };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    json j;
    try {
      j = json::parse(jsonl::read_text(inputs[k].report_json));
      for (const auto& row : j.at("rows")) {
        const auto metric = row.at("metric").get<std::string>();
        if (std::find(metrics.begin(), metrics.end(), metric) == metrics.end()) metrics.push_back(metric);
        cells[k][metric] = {cell(row.at("average").at("ap")), cell(row.at("average").at("f1"))};
      }
      const auto& human = j.at("human_editors");
      for (const char* part : {"min", "avg", "max"}) {
        if (human.empty()) break;
        const std::string metric = std::string("human_editors[") + part + "]";
        double ap = 0.0, f1 = 0.0;
        for (const auto& h : human) {
          ap += h.at("ap").at(part).get<double>();
          f1 += h.at("f1").at(part).get<double>();
        }
        const auto n = static_cast<double>(human.size());
        if (std::find(metrics.begin(), metrics.end(), metric) == metrics.end()) metrics.push_back(metric);
        cells[k][metric] = {fixed(ap / n, 4), fixed(f1 / n, 4)};
      }
    } catch (const json::exception& e) {
      throw ParseError(inputs[k].report_json.string() + ": " + e.what());
    }
  }
  std::string out = "metric";
  for (const auto& in : inputs) out += "\t" + in.name + "_ap\t" + in.name + "_f1";
  out += "\n";
  for (const auto& m : metrics) {
    out += m;
    for (const auto& c : cells) {
      const auto it = c.find(m);
      out += it == c.end() ? "\t-\t-" : "\t" + it->second.first + "\t" + it->second.second;
    }
    out += "\n";
  }
  return out;
}

void cmd_report(const std::vector<ReportInput>& inputs, const fs::path& out_path) {
  if (out_path.empty()) throw InvalidConfig("report: output path required");
  jsonl::write_text(out_path, merge_reports(inputs));
}

}  // namespace wqe
