#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wqe/annotations.hpp"
#include "wqe/diagnostics.hpp"
#include "wqe/eval.hpp"
#include "wqe/metrics.hpp"
#include "wqe/model_meta.hpp"
#include "wqe/supervised.hpp"
#include "wqe/trace.hpp"

namespace wqe {

inline constexpr const char* kTracesFile = "traces.wqet.jsonl";
inline constexpr const char* kAnnotationsFile = "annotations.jsonl";
inline constexpr const char* kClassProbsFile = "classprobs.jsonl";
inline constexpr const char* kScoresSuffix = ".scores.jsonl";
inline constexpr const char* kFlipPrefix = "neg:";

// ---- desk-gen --------------------------------------------------------------

struct DeskGenOptions {
  DeskModelConfig model;
  double temperature = 1.0;  // sampling temperature for uncorrupted target tokens
  std::uint64_t seed = 0;  // corpus, corruption, annotator noise and dropout masks
  std::size_t segments = 100;
  std::size_t min_source_length = 4;
  std::size_t max_source_length = 8;
  std::size_t min_target_length = 6;
  std::size_t max_target_length = 10;
  int mcd_passes = kDefaultMcdPasses;
  std::size_t inject_errors = 0;  // corrupted target tokens per segment
  std::size_t annotators = 1;
  double label_noise = 0.0;       // per-token flip probability for each annotator
  // Extra miss probability for an injected error of severity s: severity_miss * (1 - s).
  double severity_miss = 0.0;
  bool as_post_edits = false;     // annotators deliver post-edits instead of spans
  std::vector<std::string> languages = {"all"};
  bool class_probs = false;
  std::filesystem::path out_dir;
};

struct DeskCorpusSegment {
  std::string segment_id;
  std::string language;
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  std::vector<std::uint8_t> corrupted;  // per target token
  std::vector<double> severity;         // per target token, in [0, 1); 0 where not corrupted
};

// Sources, sampled targets and corruption positions, without traces.
std::vector<DeskCorpusSegment> desk_corpus(const DeskGenOptions& options);

struct DeskGenResult {
  TraceFile traces;
  std::vector<AnnotationRecord> annotations;
  std::vector<TokenClassProbs> class_probs;
};

DeskGenResult desk_generate(const DeskGenOptions& options);
// Writes traces, annotations and (optionally) class probabilities to out_dir.
DeskGenResult cmd_desk_gen(const DeskGenOptions& options);

// ---- validate --------------------------------------------------------------

// Parse errors propagate as exceptions; content problems come back as diagnostics.
Diagnostics cmd_validate(const std::filesystem::path& traces_path);

// ---- score -----------------------------------------------------------------

struct ScoreRunOptions {
  std::filesystem::path traces;
  std::filesystem::path out_dir;
  std::vector<std::string> metrics;  // families; empty means all
  std::vector<std::string> flip;     // families whose sign is inverted
  int mcd_passes = kDefaultMcdPasses;
  int blood_probes = kBloodProbes;
  unsigned threads = 1;
};

// Family -> per-segment scores, segments in trace order.
using ScoreTable = std::map<std::string, std::vector<MetricScores>>;

ScoreTable score_traces(const TraceFile& traces, const ScoreRunOptions& options, Diagnostics* diagnostics = nullptr);
// Writes one <family>.scores.jsonl per family that produced scores.
ScoreTable cmd_score(const ScoreRunOptions& options, Diagnostics* diagnostics = nullptr);
ScoreTable load_score_dir(const std::filesystem::path& dir);

// ---- evaluate --------------------------------------------------------------

struct EvaluateOptions {
  std::filesystem::path annotations;
  std::filesystem::path traces;
  std::filesystem::path scores_dir;
  std::optional<std::filesystem::path> class_probs;
  int trials = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
};

// One (language, annotator) evaluation unit with corpus-pooled labels.
struct EvalUnit {
  std::string language;
  std::string annotator;
  std::vector<std::string> segment_ids;
  LabelVector labels;
  bool excluded = false;  // no positives
};

struct UnitResult {
  std::string annotator;
  double ap = 0.0;
  double f1 = 0.0;
  double threshold = 0.0;
  std::optional<std::size_t> layer;  // for best-layer rows
};

struct ReportRow {
  std::string metric;
  // language -> unit results in unit order; excluded units are absent
  std::map<std::string, std::vector<UnitResult>> units;
  std::map<std::string, std::pair<double, double>> per_language;  // mean AP, F1*
  double average_ap = 0.0;
  double average_f1 = 0.0;
};

struct HumanRow {
  std::string language;
  HumanAgreement agreement;
};

struct PrCurveRecord {
  std::string metric;
  std::string language;
  std::string annotator;
  std::vector<PRPoint> points;
};

struct EvalReport {
  std::vector<std::string> languages;
  std::vector<EvalUnit> units;
  std::vector<ReportRow> rows;
  std::vector<HumanRow> human_editors;
  std::vector<std::string> excluded_languages;
  std::vector<PrCurveRecord> pr_curves;
};

// Pooled labels for every unit, using trace tokens for tokenization.
std::vector<EvalUnit> build_units(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                                  Diagnostics* diagnostics = nullptr);

// Concatenates one metric's per-segment scores in the order of `segment_ids`.
std::vector<double> pooled_scores(const std::vector<MetricScores>& scores, const std::vector<std::string>& segment_ids);

EvalReport evaluate(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                    const ScoreTable& scores, const std::vector<TokenClassProbs>* class_probs,
                    const EvaluateOptions& options, Diagnostics* diagnostics = nullptr);
EvalReport cmd_evaluate(const EvaluateOptions& options, Diagnostics* diagnostics = nullptr);

std::string report_json(const EvalReport& report);
std::string report_tsv(const EvalReport& report);
std::string pr_points_csv(const EvalReport& report);

// ---- correlate -------------------------------------------------------------

struct CorrelateOptions {
  std::filesystem::path annotations;
  std::filesystem::path traces;
  std::filesystem::path scores_dir;
  std::vector<std::string> metrics;  // metric ids or families; empty means all
  unsigned threads = 1;
  std::filesystem::path out_path;
};

struct CorrelationBand {
  std::string language;
  std::string metric;
  std::size_t subset_size = 0;
  std::size_t num_subsets = 0;
  std::optional<SubsetCorrelations> result;  // nullopt when every subset was degenerate
};

std::vector<CorrelationBand> correlate(const std::vector<AnnotationRecord>& annotations, const TraceFile& traces,
                                       const ScoreTable& scores, const CorrelateOptions& options,
                                       Diagnostics* diagnostics = nullptr);
std::vector<CorrelationBand> cmd_correlate(const CorrelateOptions& options, Diagnostics* diagnostics = nullptr);
std::string bands_csv(const std::vector<CorrelationBand>& bands);

// ---- report ----------------------------------------------------------------

struct ReportInput {
  std::string name;
  std::filesystem::path report_json;
};

// Multi-dataset table: one row per metric, AP and F1* averages per dataset.
std::string merge_reports(const std::vector<ReportInput>& inputs);
void cmd_report(const std::vector<ReportInput>& inputs, const std::filesystem::path& out_path);

}  // namespace wqe
