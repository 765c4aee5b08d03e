#pragma once

// Minimal decoder-only causal transformer with a visual-token front end.
//
// The input sequence is [visual block | prompt block | generated tokens].
// Positions are absolute and assigned once at ingestion; pruning removes
// visual rows but never renumbers the survivors. Attention is streamed to an
// AttentionSink one (layer, head) at a time and is never kept across layers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cprune/matrix.hpp"

namespace cprune {

using TokenId = std::uint32_t;

// Reserved end-of-sequence id.
inline constexpr TokenId kEosId = 0;

struct ModelSpec {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t model_dim = 0;
  std::size_t head_dim = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;

  std::size_t ffn_dim() const { return 4 * model_dim; }

  // Throws ConstructionError on inconsistent dimensions.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

// Weights use the "x * W" convention: a projection from `in` to `out`
// features is stored as an in x out row-major matrix.
struct LayerWeights {
  Matrix wq, wk, wv, wo;  // C x C
  Matrix w1;              // C x 4C
  Matrix w2;              // 4C x C

  bool operator==(const LayerWeights&) const = default;
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed, Matrix token_embedding, Matrix position_embedding,
        std::vector<LayerWeights> layers, Matrix unembedding);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const Matrix& token_embedding() const { return tok_; }     // V x C
  const Matrix& position_embedding() const { return pos_; }  // max_seq_len x C
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Matrix& unembedding() const { return unembed_; }     // C x V

  bool operator==(const Model&) const = default;

 private:
  ModelSpec spec_;
  std::uint64_t seed_ = 0;
  Matrix tok_;
  Matrix pos_;
  std::vector<LayerWeights> layers_;
  Matrix unembed_;
};

struct RandomRecipe {
  double init_scale = 1.0;  // projections ~ N(0, init_scale^2 / fan_in)
};

Model build_model(const ModelSpec& spec, std::uint64_t seed, const RandomRecipe& recipe = {});

struct TokenLayout {
  std::size_t n_visual = 0;
  std::size_t n_prompt = 0;
  std::vector<TokenId> token_ids;  // visual block first, then prompt

  std::size_t size() const { return n_visual + n_prompt; }
  void validate(const ModelSpec& spec) const;
};

// Row-stochastic lower-triangular attention over the rows currently alive in
// a prefill pass. positions[i] is the absolute position of row/column i.
struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t n = 0;
  std::span<const double> probs;  // n x n row-major
  std::span<const std::size_t> positions;

  double at(std::size_t r, std::size_t c) const { return probs[r * n + c]; }
};

// Attention of one newly decoded token over every cached position of a layer
// (itself included, last).
struct AttentionRow {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t query_position = 0;
  std::span<const double> probs;
  std::span<const std::size_t> positions;
};

class AttentionSink {
 public:
  virtual ~AttentionSink() = default;
  virtual void on_prefill(const AttentionMap&) {}
  virtual void on_decode(const AttentionRow&) {}
};

// Fans attention out to several sinks.
class SinkList : public AttentionSink {
 public:
  void add(AttentionSink* sink) {
    if (sink) sinks_.push_back(sink);
  }
  void on_prefill(const AttentionMap& m) override {
    for (auto* s : sinks_) s->on_prefill(m);
  }
  void on_decode(const AttentionRow& r) override {
    for (auto* s : sinks_) s->on_decode(r);
  }

 private:
  std::vector<AttentionSink*> sinks_;
};

struct LayerCache {
  std::vector<std::size_t> positions;  // strictly increasing
  std::vector<double> keys;            // positions.size() x C
  std::vector<double> values;
};

struct KvCache {
  std::vector<LayerCache> layers;
  std::size_t n_visual = 0;
  std::size_t n_prompt = 0;
  std::size_t next_position = 0;

  // Positions alive in the top layer.
  const std::vector<std::size_t>& retained_positions() const { return layers.back().positions; }
};

// Hidden rows of a forward pass between two layers.
struct ForwardState {
  Matrix hidden;                       // rows x C
  std::vector<std::size_t> positions;  // absolute position of each row
  std::size_t n_visual = 0;
};

// Removes every visual row not listed in kept_visual from the state, and from
// cache layers >= layer if they already exist. kept_visual must be a
// nonempty strictly increasing subset of [0, n_visual); 0 <= layer < L.
void prune_at_layer(ForwardState& state, KvCache* cache, std::span<const std::size_t> kept_visual,
                    std::size_t layer, std::size_t num_layers);

// Mid-stack pruning request: before engine layer `cut` runs, `select` is asked
// for the visual indices to keep. Attention of layers < cut has already been
// delivered to the sink at that point, which lets single-layer rankers decide
// in-flight.
struct PrunePlan {
  std::size_t cut = 0;
  std::function<std::vector<std::size_t>()> select;

  static PrunePlan fixed(std::size_t cut, std::vector<std::size_t> kept);
};

// Hidden states entering engine layer `layer`, for every position that
// reached it (prefill rows first, then one row per decode step).
struct HiddenCheckpoint {
  std::size_t layer = 0;
  std::vector<std::size_t> positions;
  std::vector<double> rows;  // positions.size() x C
};

// Sequence lengths a pass actually touched, for cost accounting.
struct PassShape {
  std::vector<std::size_t> layer_lengths;  // rows alive per layer; 0 for skipped layers
  std::size_t logits_rows = 0;
};

struct DecodeShape {
  std::vector<std::size_t> context_lengths;  // attention length per layer (self included)
};

struct PrefillResult {
  KvCache cache;
  std::vector<double> logits;  // next-token logits at the last prompt position
  PassShape shape;
};

struct ForwardOptions {
  AttentionSink* sink = nullptr;
  const PrunePlan* prune = nullptr;
  HiddenCheckpoint* checkpoint = nullptr;  // checkpoint->layer selects the capture point
};

PrefillResult prefill(const Model& model, const TokenLayout& layout,
                      const ForwardOptions& opts = {});

struct DecodeResult {
  std::vector<double> logits;
  DecodeShape shape;
};

// Appends token_id at cache.next_position and returns the logits there.
DecodeResult decode_step(const Model& model, KvCache& cache, TokenId token_id,
                         const ForwardOptions& opts = {});

struct GenerationResult {
  std::vector<TokenId> generated_ids;
  std::vector<double> step_probs;
  std::vector<std::vector<double>> step_distributions;  // full softmax per step
  PassShape prefill_shape;
  std::vector<DecodeShape> decode_shapes;
};

// Greedy decoding. Every generated token (the last one included) is fed back
// through decode_step so its attention reaches the sink; generation stops
// after emitting kEosId or max_new tokens.
GenerationResult generate(const Model& model, const TokenLayout& layout, std::size_t max_new,
                          const ForwardOptions& opts = {});

struct TeacherForcedResult {
  std::vector<double> probs;
  std::vector<std::vector<double>> distributions;
  PassShape shape;
};

// One parallel pass over [visual | prompt | forced_ids]; probs[i] is the
// probability of forced_ids[i] given everything before it.
TeacherForcedResult teacher_forced_probs(const Model& model, const TokenLayout& layout,
                                         std::span<const TokenId> forced_ids,
                                         const PrunePlan* prune = nullptr,
                                         AttentionSink* sink = nullptr);

// Same result as teacher_forced_probs with a fixed prune at checkpoint.layer,
// but resumes from hidden states captured while generating forced_ids, so
// only layers >= checkpoint.layer are recomputed, over the pruned sequence.
// The checkpoint must come from generating exactly forced_ids on `layout`.
TeacherForcedResult teacher_forced_resume(const Model& model, const HiddenCheckpoint& checkpoint,
                                          std::size_t n_visual, std::size_t n_prompt,
                                          std::span<const TokenId> forced_ids,
                                          std::span<const std::size_t> kept_visual);

// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> v);

}  // namespace cprune
