#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wqe/labels.hpp"
#include "wqe/model_meta.hpp"
#include "wqe/trace.hpp"

namespace wqe {

inline constexpr int kBosId = 0;
inline constexpr int kSepId = 1;  // end-of-source separator / end-of-sentence
inline constexpr int kFirstWordId = 2;

// Surface form for desk-model ids. Ids whose piece starts with a word boundary
// are separated from the previous token by a space.
std::string desk_piece(int id);
bool desk_piece_starts_word(int id);

struct DeskText {
  std::string text;
  std::vector<TokenSpan> tokens;  // one per id, then a trailing special "</s>"
};

DeskText render_desk_text(std::span<const int> ids);

// Cached activations of one (source, target) pair. Decoder positions are
// [BOS, source..., SEP, target...] for decoder-only models and [BOS, target...]
// for encoder-decoder models.
struct ForwardCache {
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  std::size_t first_step_position = 0;
  // hidden[l][pos]: input of decoder block l (l = N is the final residual stream).
  std::vector<std::vector<std::vector<double>>> hidden;
  std::vector<std::vector<std::vector<double>>> self_keys;    // [layer][pos]
  std::vector<std::vector<std::vector<double>>> self_values;  // [layer][pos]
  std::vector<std::vector<std::vector<double>>> cross_keys;   // [layer][src_pos]
  std::vector<std::vector<std::vector<double>>> cross_values;
  // attention[l][pos][head]: self weights, then cross weights when present.
  std::vector<std::vector<std::vector<std::vector<double>>>> self_attention;
  std::vector<std::vector<std::vector<std::vector<double>>>> cross_attention;

  std::size_t num_steps() const noexcept { return target_ids.size(); }
  std::size_t position_of_step(std::size_t step) const noexcept { return first_step_position + step; }
};

// Key for dropout masks of one stochastic pass. Masks are drawn per
// (seed, segment, pass, layer, site, position, unit).
struct DropoutPass {
  std::uint64_t seed = 0;
  std::uint64_t segment_key = 0;
  std::uint64_t pass = 0;
};

// Tiny pre-norm transformer with GELU feed-forward and sinusoidal positions.
// Weights are a pure function of the config (including its seed) and are
// immutable after construction.
class DeskModel {
 public:
  explicit DeskModel(const DeskModelConfig& config);
  ~DeskModel();
  DeskModel(DeskModel&&) noexcept;
  DeskModel& operator=(DeskModel&&) noexcept;
  DeskModel(const DeskModel&) = delete;
  DeskModel& operator=(const DeskModel&) = delete;

  const DeskModelConfig& config() const noexcept { return config_; }
  ModelMeta meta() const noexcept;
  std::uint64_t weights_checksum() const noexcept;

  // Teacher-forced pass; `dropout` enables stochastic masks.
  ForwardCache run(std::span<const int> source_ids, std::span<const int> target_ids,
                   const DropoutPass* dropout = nullptr) const;

  std::vector<double> logits(std::span<const double> hidden_state) const;
  std::vector<double> distribution(std::span<const double> hidden_state) const;

  // Final-layer distribution of the token following `target_prefix`.
  std::vector<double> next_token_distribution(std::span<const int> source_ids,
                                              std::span<const int> target_prefix) const;

  // One StepRecord per target id: final distribution, per-layer logit-lens
  // distributions, per-head attention and `mcd_passes` dropout samples of
  // log p(t*). `mcd_passes == 0` omits the dropout samples.
  GenerationTrace force_decode(const std::string& segment_id, std::span<const int> source_ids,
                               std::span<const int> target_ids, int mcd_passes, std::uint64_t seed) const;

  // Decoder block `layer` at the position that predicts target `step`, with the
  // rest of the context held at its cached value.
  std::vector<double> layer_input(const ForwardCache& cache, std::size_t step, int layer) const;
  std::vector<double> layer_apply(const ForwardCache& cache, std::size_t step, int layer,
                                  std::span<const double> x) const;
  // Exact Jacobian-vector product of layer_apply at layer_input.
  std::vector<double> layer_jvp(const ForwardCache& cache, std::size_t step, int layer,
                                std::span<const double> direction) const;

  struct Weights;

 private:
  void check_ids(std::span<const int> ids, const char* what, bool allow_empty) const;
  void check_step(const ForwardCache& cache, std::size_t step, int layer) const;

  DeskModelConfig config_;
  std::unique_ptr<Weights> weights_;
};

}  // namespace wqe
