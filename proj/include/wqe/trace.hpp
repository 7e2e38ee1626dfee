#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wqe/diagnostics.hpp"
#include "wqe/labels.hpp"
#include "wqe/model_meta.hpp"

namespace wqe {

inline constexpr int kTraceSchemaVersion = 1;
inline constexpr double kDistributionTolerance = 1e-6;

// One generated (force-decoded) target token.
struct StepRecord {
  int chosen_token_id = 0;
  std::vector<double> final_dist;                                       // P_N, linear
  std::optional<std::vector<std::vector<double>>> layer_dists;          // P_0..P_{N-1}
  std::optional<std::vector<std::vector<std::vector<double>>>> attention;  // [layer][head][context]
  std::optional<std::vector<double>> mcd_chosen_logprobs;               // natural log
  std::optional<std::vector<double>> blood_layer_scores;                // N-1 boundaries

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

// Present on traces written by the desk model, so BLOOD can be recomputed.
struct DeskProvenance {
  DeskModelConfig config;
  std::vector<int> source_ids;
  std::vector<int> target_ids;

  friend bool operator==(const DeskProvenance&, const DeskProvenance&) = default;
};

struct GenerationTrace {
  std::string segment_id;
  ModelMeta model_meta;
  std::vector<TokenSpan> tokens;
  std::vector<StepRecord> steps;
  std::optional<DeskProvenance> desk;

  friend bool operator==(const GenerationTrace&, const GenerationTrace&) = default;
};

struct SummaryStep {
  std::optional<double> surprisal;
  std::optional<double> entropy;
  std::optional<double> mcd_avg;
  std::optional<double> mcd_var;
  std::optional<std::vector<double>> ll_surprisal;
  std::optional<std::vector<double>> ll_kl;
  std::optional<double> pred_depth;
  std::optional<double> attn_entropy_avg;
  std::optional<double> attn_entropy_max;
  std::optional<std::vector<double>> blood;

  friend bool operator==(const SummaryStep&, const SummaryStep&) = default;
};

struct SummaryTrace {
  std::string segment_id;
  ModelMeta model_meta;
  std::vector<TokenSpan> tokens;
  std::vector<SummaryStep> steps;

  friend bool operator==(const SummaryTrace&, const SummaryTrace&) = default;
};

enum class TraceKind { full, summary };

struct TraceFile {
  TraceKind kind = TraceKind::full;
  std::vector<GenerationTrace> full;
  std::vector<SummaryTrace> summary;

  std::size_t size() const noexcept { return kind == TraceKind::full ? full.size() : summary.size(); }

  friend bool operator==(const TraceFile&, const TraceFile&) = default;
};

// Empty result iff every invariant of the trace holds. At most one diagnostic
// is reported per offending vector.
Diagnostics validate_trace(const GenerationTrace& trace);
Diagnostics validate_trace(const SummaryTrace& trace);
Diagnostics validate_traces(const TraceFile& file);

}  // namespace wqe
