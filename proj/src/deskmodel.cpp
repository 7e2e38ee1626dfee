#include "wqe/deskmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

#include "wqe/error.hpp"
#include "wqe/rng.hpp"
#include "wqe/utf8.hpp"

namespace wqe {

namespace {

// Forward-mode dual number: value and directional derivative.
struct Dual {
  double v = 0.0;
  double d = 0.0;
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual operator+(Dual a, double b) { return {a.v + b, a.d}; }
inline Dual operator-(Dual a, double b) { return {a.v - b, a.d}; }
inline Dual operator*(Dual a, double b) { return {a.v * b, a.d * b}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
inline Dual operator/(Dual a, double b) { return {a.v / b, a.d / b}; }
inline Dual& operator+=(Dual& a, Dual b) { return a = a + b; }

inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }

inline double exp_of(double x) { return std::exp(x); }
inline Dual exp_of(Dual x) {
  const double e = std::exp(x.v);
  return {e, e * x.d};
}

inline double inv_sqrt(double x) { return 1.0 / std::sqrt(x); }
inline Dual inv_sqrt(Dual x) {
  const double s = 1.0 / std::sqrt(x.v);
  return {s, -0.5 * s * s * s * x.d};
}

// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline Dual gelu(Dual x) {
  const double cdf = 0.5 * (1.0 + std::erf(x.v * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x.v * x.v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return {x.v * cdf, (cdf + x.v * pdf) * x.d};
}

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

template <class T>
std::vector<T> matvec(const Matrix& m, std::span<const T> x) {
  std::vector<T> out(m.rows, T{});
  for (std::size_t r = 0; r < m.rows; ++r) {
    T acc{};
    const double* w = m.data.data() + r * m.cols;
    for (std::size_t c = 0; c < m.cols; ++c) acc += x[c] * w[c];
    out[r] = acc;
  }
  return out;
}

struct LayerNorm {
  std::vector<double> gamma;
  std::vector<double> beta;

  template <class T>
  std::vector<T> apply(std::span<const T> x) const {
    const auto n = static_cast<double>(x.size());
    T mean{};
    for (const auto& v : x) mean += v;
    mean = mean / n;
    T var{};
    for (const auto& v : x) var += (v - mean) * (v - mean);
    const T scale = inv_sqrt(var / n + 1e-5);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * scale * gamma[i] + beta[i];
    return out;
  }
};

struct Attention {
  Matrix wq, wk, wv, wo;
};

struct Block {
  LayerNorm ln_self;
  Attention self;
  bool has_cross = false;
  LayerNorm ln_cross;
  Attention cross;
  LayerNorm ln_ff;
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
};

// Keys/values visible to one query. `own_slot` marks the entry that belongs
// to the query position itself; its key/value are recomputed from the query
// input so that derivatives flow through it.
struct KvContext {
  std::span<const std::vector<double>> keys;
  std::span<const std::vector<double>> values;
  std::size_t own_slot = static_cast<std::size_t>(-1);
};

enum MaskSite : std::uint64_t { kSelfSite = 0, kCrossSite = 1, kFfSite = 2 };

// Inverted-dropout masks for one (pass, stack, layer, position).
struct MaskSource {
  CounterRng rng;
  double p = 0.0;

  double keep(MaskSite site, std::uint64_t a, std::uint64_t b) const {
    return rng.split(site).uniform(a * 4096 + b) < p ? 0.0 : 1.0 / (1.0 - p);
  }
};

template <class T>
std::vector<T> attend(const Attention& w, int heads, std::span<const T> normed, const KvContext& ctx, MaskSite site,
                      const MaskSource* mask, std::vector<std::vector<double>>* weights_out) {
  const std::size_t dim = normed.size();
  const std::size_t head_dim = dim / static_cast<std::size_t>(heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const auto q = matvec<T>(w.wq, normed);
  const bool has_own = ctx.own_slot < ctx.keys.size();
  std::vector<T> own_k, own_v;
  if (has_own) {
    own_k = matvec<T>(w.wk, normed);
    own_v = matvec<T>(w.wv, normed);
  }
  const std::size_t slots = ctx.keys.size();
  std::vector<T> mixed(dim, T{});
  if (weights_out != nullptr) weights_out->assign(static_cast<std::size_t>(heads), {});

  std::vector<T> scores(slots);
  for (int h = 0; h < heads; ++h) {
    const std::size_t lo = static_cast<std::size_t>(h) * head_dim;
    for (std::size_t j = 0; j < slots; ++j) {
      T s{};
      if (j == ctx.own_slot) {
        for (std::size_t d = lo; d < lo + head_dim; ++d) s += q[d] * own_k[d];
      } else {
        for (std::size_t d = lo; d < lo + head_dim; ++d) s += q[d] * ctx.keys[j][d];
      }
      scores[j] = s * inv_scale;
    }
    double max_score = value_of(scores[0]);
    for (const auto& s : scores) max_score = std::max(max_score, value_of(s));
    T total{};
    for (auto& s : scores) {
      s = exp_of(s - max_score);
      total += s;
    }
    for (auto& s : scores) s = s / total;
    if (weights_out != nullptr) {
      auto& out = (*weights_out)[static_cast<std::size_t>(h)];
      out.resize(slots);
      for (std::size_t j = 0; j < slots; ++j) out[j] = value_of(scores[j]);
    }
    for (std::size_t j = 0; j < slots; ++j) {
      T weight = scores[j];
      if (mask != nullptr) weight = weight * mask->keep(site, static_cast<std::uint64_t>(h), j);
      if (j == ctx.own_slot) {
        for (std::size_t d = lo; d < lo + head_dim; ++d) mixed[d] += weight * own_v[d];
      } else {
        for (std::size_t d = lo; d < lo + head_dim; ++d) mixed[d] += weight * ctx.values[j][d];
      }
    }
  }
  return matvec<T>(w.wo, mixed);
}

struct AttentionRecord {
  std::vector<std::vector<double>> self;
  std::vector<std::vector<double>> cross;
};

template <class T>
std::vector<T> apply_block(const Block& b, int heads, std::span<const T> x, const KvContext& self_ctx,
                           const KvContext* cross_ctx, const MaskSource* mask, AttentionRecord* record) {
  std::vector<T> h(x.begin(), x.end());
  {
    const auto normed = b.ln_self.apply<T>(h);
    const auto out = attend<T>(b.self, heads, normed, self_ctx, kSelfSite, mask, record ? &record->self : nullptr);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += out[i];
  }
  if (b.has_cross && cross_ctx != nullptr) {
    const auto normed = b.ln_cross.apply<T>(h);
    const auto out = attend<T>(b.cross, heads, normed, *cross_ctx, kCrossSite, mask, record ? &record->cross : nullptr);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += out[i];
  }
  const auto normed = b.ln_ff.apply<T>(h);
  auto hidden = matvec<T>(b.w1, normed);
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = gelu(hidden[i] + b.b1[i]);
  const auto out = matvec<T>(b.w2, hidden);
  for (std::size_t i = 0; i < h.size(); ++i) {
    T z = out[i] + b.b2[i];
    if (mask != nullptr) z = z * mask->keep(kFfSite, 0, i);
    h[i] += z;
  }
  return h;
}

// Fills tensors from the seeded generator; one child stream per tensor.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : root_(seed) {}

  std::vector<double> normal(std::size_t n, double mean, double stddev) {
    const CounterRng stream = root_.split(next_id_++);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = mean + stddev * stream.normal(i);
    return out;
  }

  Matrix matrix(std::size_t rows, std::size_t cols, double stddev) {
    return {rows, cols, normal(rows * cols, 0.0, stddev)};
  }

  LayerNorm layer_norm(std::size_t dim) { return {normal(dim, 1.0, 0.1), normal(dim, 0.0, 0.1)}; }

  Attention attention(std::size_t dim) {
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    return {matrix(dim, dim, 2.0 * s), matrix(dim, dim, 2.0 * s), matrix(dim, dim, s), matrix(dim, dim, s)};
  }

  Block block(std::size_t dim, bool cross) {
    Block b;
    const std::size_t ff = 4 * dim;
    b.ln_self = layer_norm(dim);
    b.self = attention(dim);
    b.has_cross = cross;
    if (cross) {
      b.ln_cross = layer_norm(dim);
      b.cross = attention(dim);
    }
    b.ln_ff = layer_norm(dim);
    b.w1 = matrix(ff, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
    b.b1 = normal(ff, 0.0, 0.1);
    b.w2 = matrix(dim, ff, 1.0 / std::sqrt(static_cast<double>(ff)));
    b.b2 = normal(dim, 0.0, 0.1);
    return b;
  }

 private:
  CounterRng root_;
  std::uint64_t next_id_ = 0;
};

std::vector<double> positional(std::size_t pos, std::size_t dim) {
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    const double angle = static_cast<double>(pos) * freq;
    out[i] = 0.5 * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
  }
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_logit);
    total += out[i];
  }
  for (auto& p : out) p /= total;
  return out;
}

double log_softmax_at(std::span<const double> logits, std::size_t index) {
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - max_logit);
  return logits[index] - max_logit - std::log(total);
}

const char* const kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v"};
const char* const kNuclei[] = {"a", "e", "i", "o", "ù"};

}  // namespace

struct DeskModel::Weights {
  Matrix embedding;
  Matrix unembedding;
  std::vector<Block> encoder;
  std::vector<Block> decoder;
  LayerNorm encoder_norm;
  LayerNorm final_norm;
};

std::string desk_piece(int id) {
  if (id == kBosId) return "<s>";
  if (id == kSepId) return "</s>";
  const int k = id - kFirstWordId;
  return std::string(kOnsets[k % 13]) + kNuclei[(k / 13) % 5];
}

bool desk_piece_starts_word(int id) { return id >= kFirstWordId && (id * 7) % 3 != 0; }

DeskText render_desk_text(std::span<const int> ids) {
  DeskText out;
  std::size_t chars = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < kFirstWordId) throw InvalidInput("render_desk_text: special id " + std::to_string(id) + " in text");
    if (i > 0 && desk_piece_starts_word(id)) {
      out.text += ' ';
      ++chars;
    }
    const std::string piece = desk_piece(id);
    const std::size_t len = utf8::length(piece);
    out.text += piece;
    out.tokens.push_back({piece, chars, chars + len, false});
    chars += len;
  }
  out.tokens.push_back({"</s>", 0, 0, true});
  return out;
}

DeskModel::DeskModel(const DeskModelConfig& config) : config_(config), weights_(std::make_unique<Weights>()) {
  config_.validate();
  const auto dim = static_cast<std::size_t>(config_.model_dim);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  const bool enc_dec = config_.architecture == Architecture::encoder_decoder;
  Initializer init(config_.seed);
  auto& w = *weights_;
  w.embedding = init.matrix(vocab, dim, 1.0);
  w.unembedding = init.matrix(vocab, dim, 2.5 / std::sqrt(static_cast<double>(dim)));
  w.final_norm = init.layer_norm(dim);
  for (int l = 0; l < config_.num_layers; ++l) w.decoder.push_back(init.block(dim, enc_dec));
  if (enc_dec) {
    for (int l = 0; l < config_.num_layers; ++l) w.encoder.push_back(init.block(dim, false));
    w.encoder_norm = init.layer_norm(dim);
  }
}

DeskModel::~DeskModel() = default;
DeskModel::DeskModel(DeskModel&&) noexcept = default;
DeskModel& DeskModel::operator=(DeskModel&&) noexcept = default;

ModelMeta DeskModel::meta() const noexcept {
  return {config_.num_layers, config_.num_heads, config_.vocab_size, config_.architecture};
}

std::uint64_t DeskModel::weights_checksum() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::span<const double> values) {
    for (double v : values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
  };
  auto feed_norm = [&](const LayerNorm& n) {
    feed(n.gamma);
    feed(n.beta);
  };
  auto feed_attn = [&](const Attention& a) {
    feed(a.wq.data);
    feed(a.wk.data);
    feed(a.wv.data);
    feed(a.wo.data);
  };
  auto feed_block = [&](const Block& b) {
    feed_norm(b.ln_self);
    feed_attn(b.self);
    if (b.has_cross) {
      feed_norm(b.ln_cross);
      feed_attn(b.cross);
    }
    feed_norm(b.ln_ff);
    feed(b.w1.data);
    feed(b.b1);
    feed(b.w2.data);
    feed(b.b2);
  };
  const auto& w = *weights_;
  feed(w.embedding.data);
  feed(w.unembedding.data);
  feed_norm(w.final_norm);
  for (const auto& b : w.decoder) feed_block(b);
  for (const auto& b : w.encoder) feed_block(b);
  if (!w.encoder.empty()) feed_norm(w.encoder_norm);
  return h;
}

void DeskModel::check_ids(std::span<const int> ids, const char* what, bool allow_empty) const {
  if (!allow_empty && ids.empty()) throw InvalidInput(std::string("desk model: empty ") + what);
  for (int id : ids) {
    if (id < kFirstWordId || id >= config_.vocab_size) {
      throw InvalidInput(std::string("desk model: ") + what + " id " + std::to_string(id) + " outside [" +
                         std::to_string(kFirstWordId) + ", " + std::to_string(config_.vocab_size) + ")");
    }
  }
}

ForwardCache DeskModel::run(std::span<const int> source_ids, std::span<const int> target_ids,
                            const DropoutPass* dropout) const {
  check_ids(source_ids, "source", true);
  check_ids(target_ids, "target", false);
  const auto& w = *weights_;
  const auto dim = static_cast<std::size_t>(config_.model_dim);
  const int heads = config_.num_heads;
  const auto layers = static_cast<std::size_t>(config_.num_layers);
  const bool enc_dec = config_.architecture == Architecture::encoder_decoder;

  ForwardCache cache;
  cache.source_ids.assign(source_ids.begin(), source_ids.end());
  cache.target_ids.assign(target_ids.begin(), target_ids.end());

  // Decoder input ids; the last target id is never an input.
  std::vector<int> inputs{kBosId};
  if (!enc_dec) {
    inputs.insert(inputs.end(), source_ids.begin(), source_ids.end());
    inputs.push_back(kSepId);
    cache.first_step_position = inputs.size() - 1;
  } else {
    cache.first_step_position = 0;
  }
  inputs.insert(inputs.end(), target_ids.begin(), target_ids.end() - 1);
  const std::size_t positions = inputs.size();

  const CounterRng pass_rng = dropout != nullptr
                                  ? CounterRng(dropout->seed).split({dropout->segment_key, dropout->pass})
                                  : CounterRng(0);
  const bool stochastic = dropout != nullptr && config_.dropout_p > 0.0;
  auto mask_for = [&](std::uint64_t stack, std::size_t layer, std::size_t pos) {
    return MaskSource{pass_rng.split({stack, layer, pos}), config_.dropout_p};
  };

  auto embed = [&](int id, std::size_t pos) {
    auto row = w.embedding.row(static_cast<std::size_t>(id));
    auto pe = positional(pos, dim);
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = row[i] + pe[i];
    return out;
  };

  auto project_kv = [&](const Attention& a, const LayerNorm* norm, const std::vector<std::vector<double>>& states,
                        std::vector<std::vector<double>>& keys, std::vector<std::vector<double>>& values) {
    keys.resize(states.size());
    values.resize(states.size());
    for (std::size_t j = 0; j < states.size(); ++j) {
      const auto normed = norm != nullptr ? norm->apply<double>(states[j]) : states[j];
      keys[j] = matvec<double>(a.wk, normed);
      values[j] = matvec<double>(a.wv, normed);
    }
  };

  std::vector<std::vector<double>> encoded;
  if (enc_dec) {
    std::vector<std::vector<double>> states;
    for (std::size_t j = 0; j < source_ids.size(); ++j) states.push_back(embed(source_ids[j], j));
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<std::vector<double>> keys, values;
      project_kv(w.encoder[l].self, &w.encoder[l].ln_self, states, keys, values);
      std::vector<std::vector<double>> next(states.size());
      for (std::size_t j = 0; j < states.size(); ++j) {
        KvContext ctx{keys, values, j};
        const MaskSource mask = mask_for(0, l, j);
        next[j] = apply_block<double>(w.encoder[l], heads, states[j], ctx, nullptr, stochastic ? &mask : nullptr,
                                      nullptr);
      }
      states = std::move(next);
    }
    for (const auto& s : states) encoded.push_back(w.encoder_norm.apply<double>(s));
  }

  cache.hidden.assign(layers + 1, {});
  cache.self_keys.assign(layers, {});
  cache.self_values.assign(layers, {});
  cache.cross_keys.assign(layers, {});
  cache.cross_values.assign(layers, {});
  cache.self_attention.assign(layers, {});
  cache.cross_attention.assign(layers, {});
  for (std::size_t p = 0; p < positions; ++p) cache.hidden[0].push_back(embed(inputs[p], p));

  for (std::size_t l = 0; l < layers; ++l) {
    const Block& block = w.decoder[l];
    project_kv(block.self, &block.ln_self, cache.hidden[l], cache.self_keys[l], cache.self_values[l]);
    if (enc_dec) project_kv(block.cross, nullptr, encoded, cache.cross_keys[l], cache.cross_values[l]);
    cache.hidden[l + 1].resize(positions);
    cache.self_attention[l].resize(positions);
    cache.cross_attention[l].resize(positions);
    for (std::size_t p = 0; p < positions; ++p) {
      const std::span<const std::vector<double>> keys(cache.self_keys[l].data(), p + 1);
      const std::span<const std::vector<double>> values(cache.self_values[l].data(), p + 1);
      KvContext self_ctx{keys, values, p};
      KvContext cross_ctx{cache.cross_keys[l], cache.cross_values[l]};
      const MaskSource mask = mask_for(1, l, p);
      AttentionRecord record;
      cache.hidden[l + 1][p] = apply_block<double>(block, heads, cache.hidden[l][p], self_ctx,
                                                   enc_dec ? &cross_ctx : nullptr, stochastic ? &mask : nullptr,
                                                   &record);
      cache.self_attention[l][p] = std::move(record.self);
      cache.cross_attention[l][p] = std::move(record.cross);
    }
  }
  return cache;
}

std::vector<double> DeskModel::logits(std::span<const double> hidden_state) const {
  const auto normed = weights_->final_norm.apply<double>(hidden_state);
  return matvec<double>(weights_->unembedding, normed);
}

std::vector<double> DeskModel::distribution(std::span<const double> hidden_state) const {
  return softmax(logits(hidden_state));
}

std::vector<double> DeskModel::next_token_distribution(std::span<const int> source_ids,
                                                       std::span<const int> target_prefix) const {
  std::vector<int> target(target_prefix.begin(), target_prefix.end());
  target.push_back(kFirstWordId);  // placeholder: the predicted slot is never an input
  const auto cache = run(source_ids, target);
  const auto layers = static_cast<std::size_t>(config_.num_layers);
  return distribution(cache.hidden[layers][cache.position_of_step(target_prefix.size())]);
}

GenerationTrace DeskModel::force_decode(const std::string& segment_id, std::span<const int> source_ids,
                                        std::span<const int> target_ids, int mcd_passes, std::uint64_t seed) const {
  if (mcd_passes < 0) throw InvalidInput("force_decode: negative number of dropout passes");
  const auto cache = run(source_ids, target_ids);
  const auto layers = static_cast<std::size_t>(config_.num_layers);
  const bool enc_dec = config_.architecture == Architecture::encoder_decoder;

  GenerationTrace trace;
  trace.segment_id = segment_id;
  trace.model_meta = meta();
  trace.tokens = render_desk_text(target_ids).tokens;
  trace.desk = DeskProvenance{config_, cache.source_ids, cache.target_ids};
  trace.steps.resize(target_ids.size());

  for (std::size_t i = 0; i < target_ids.size(); ++i) {
    const std::size_t pos = cache.position_of_step(i);
    auto& step = trace.steps[i];
    step.chosen_token_id = target_ids[i];
    step.final_dist = distribution(cache.hidden[layers][pos]);
    std::vector<std::vector<double>> lens;
    for (std::size_t l = 0; l + 1 < layers; ++l) lens.push_back(distribution(cache.hidden[l + 1][pos]));
    lens.push_back(step.final_dist);
    step.layer_dists = std::move(lens);

    std::vector<std::vector<std::vector<double>>> attention(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t h = 0; h < static_cast<std::size_t>(config_.num_heads); ++h) {
        std::vector<double> weights;
        if (enc_dec) weights = cache.cross_attention[l][pos][h];
        const auto& self = cache.self_attention[l][pos][h];
        weights.insert(weights.end(), self.begin(), self.end());
        const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (auto& v : weights) v /= total;
        attention[l].push_back(std::move(weights));
      }
    }
    step.attention = std::move(attention);
  }

  if (mcd_passes > 0) {
    for (auto& step : trace.steps) step.mcd_chosen_logprobs.emplace();
    const std::uint64_t segment_key = hash_string(segment_id);
    for (int t = 0; t < mcd_passes; ++t) {
      const DropoutPass pass{seed, segment_key, static_cast<std::uint64_t>(t)};
      const auto noisy = run(source_ids, target_ids, &pass);
      for (std::size_t i = 0; i < target_ids.size(); ++i) {
        const auto l = logits(noisy.hidden[layers][noisy.position_of_step(i)]);
        trace.steps[i].mcd_chosen_logprobs->push_back(
            std::min(0.0, log_softmax_at(l, static_cast<std::size_t>(target_ids[i]))));
      }
    }
  }
  return trace;
}

void DeskModel::check_step(const ForwardCache& cache, std::size_t step, int layer) const {
  if (layer < 0 || layer >= config_.num_layers) {
    throw InvalidInput("desk model: layer " + std::to_string(layer) + " outside [0, " +
                       std::to_string(config_.num_layers) + ")");
  }
  if (step >= cache.num_steps()) throw InvalidInput("desk model: step " + std::to_string(step) + " out of range");
}

std::vector<double> DeskModel::layer_input(const ForwardCache& cache, std::size_t step, int layer) const {
  check_step(cache, step, layer);
  return cache.hidden[static_cast<std::size_t>(layer)][cache.position_of_step(step)];
}

std::vector<double> DeskModel::layer_apply(const ForwardCache& cache, std::size_t step, int layer,
                                           std::span<const double> x) const {
  check_step(cache, step, layer);
  if (x.size() != static_cast<std::size_t>(config_.model_dim)) throw ShapeMismatch("layer_apply: wrong state size");
  const auto l = static_cast<std::size_t>(layer);
  const std::size_t pos = cache.position_of_step(step);
  KvContext self_ctx{std::span(cache.self_keys[l].data(), pos + 1), std::span(cache.self_values[l].data(), pos + 1),
                     pos};
  KvContext cross_ctx{cache.cross_keys[l], cache.cross_values[l]};
  const bool enc_dec = config_.architecture == Architecture::encoder_decoder;
  return apply_block<double>(weights_->decoder[l], config_.num_heads, x, self_ctx, enc_dec ? &cross_ctx : nullptr,
                             nullptr, nullptr);
}

std::vector<double> DeskModel::layer_jvp(const ForwardCache& cache, std::size_t step, int layer,
                                         std::span<const double> direction) const {
  check_step(cache, step, layer);
  if (direction.size() != static_cast<std::size_t>(config_.model_dim)) {
    throw ShapeMismatch("layer_jvp: direction has wrong size");
  }
  const auto l = static_cast<std::size_t>(layer);
  const std::size_t pos = cache.position_of_step(step);
  const auto& x = cache.hidden[l][pos];
  std::vector<Dual> input(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) input[i] = {x[i], direction[i]};
  KvContext self_ctx{std::span(cache.self_keys[l].data(), pos + 1), std::span(cache.self_values[l].data(), pos + 1),
                     pos};
  KvContext cross_ctx{cache.cross_keys[l], cache.cross_values[l]};
  const bool enc_dec = config_.architecture == Architecture::encoder_decoder;
  const auto out = apply_block<Dual>(weights_->decoder[l], config_.num_heads, std::span<const Dual>(input), self_ctx,
                                     enc_dec ? &cross_ctx : nullptr, nullptr, nullptr);
  std::vector<double> tangent(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) tangent[i] = out[i].d;
  return tangent;
}

}  // namespace wqe
