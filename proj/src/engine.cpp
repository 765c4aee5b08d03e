#include "cprune/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "cprune/error.hpp"
#include "cprune/kernels.hpp"

namespace cprune {

void ModelSpec::validate() const {
  if (num_layers < 1) throw ConstructionError("num_layers must be >= 1");
  if (num_heads < 1 || head_dim < 1) throw ConstructionError("num_heads and head_dim must be >= 1");
  if (model_dim != num_heads * head_dim)
    throw ConstructionError("model_dim (" + std::to_string(model_dim) +
                            ") must equal num_heads * head_dim (" +
                            std::to_string(num_heads * head_dim) + ")");
  if (vocab_size < 2) throw ConstructionError("vocab_size must be >= 2");
  if (max_seq_len < 2) throw ConstructionError("max_seq_len must be >= 2");
}

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows != rows || m.cols != cols || m.data.size() != rows * cols)
    throw ConstructionError(std::string("weight '") + name + "' has shape " +
                            std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                            ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  if (!m.all_finite()) throw ConstructionError(std::string("weight '") + name + "' is not finite");
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed, Matrix token_embedding,
             Matrix position_embedding, std::vector<LayerWeights> layers, Matrix unembedding)
    : spec_(spec),
      seed_(seed),
      tok_(std::move(token_embedding)),
      pos_(std::move(position_embedding)),
      layers_(std::move(layers)),
      unembed_(std::move(unembedding)) {
  spec_.validate();
  const std::size_t c = spec_.model_dim;
  const std::size_t f = spec_.ffn_dim();
  expect_shape(tok_, spec_.vocab_size, c, "token_embedding");
  expect_shape(pos_, spec_.max_seq_len, c, "position_embedding");
  expect_shape(unembed_, c, spec_.vocab_size, "unembedding");
  if (layers_.size() != spec_.num_layers)
    throw ConstructionError("expected " + std::to_string(spec_.num_layers) + " layers, got " +
                            std::to_string(layers_.size()));
  for (const auto& l : layers_) {
    expect_shape(l.wq, c, c, "wq");
    expect_shape(l.wk, c, c, "wk");
    expect_shape(l.wv, c, c, "wv");
    expect_shape(l.wo, c, c, "wo");
    expect_shape(l.w1, c, f, "w1");
    expect_shape(l.w2, f, c, "w2");
  }
}

Model build_model(const ModelSpec& spec, std::uint64_t seed, const RandomRecipe& recipe) {
  spec.validate();
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Matrix& m, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : m.data) v = dist(rng);
  };
  const std::size_t c = spec.model_dim;
  const std::size_t f = spec.ffn_dim();
  const double proj = recipe.init_scale / std::sqrt(static_cast<double>(c));
  const double down = recipe.init_scale / std::sqrt(static_cast<double>(f));

  Matrix tok(spec.vocab_size, c), pos(spec.max_seq_len, c), unembed(c, spec.vocab_size);
  fill(tok, 1.0);
  fill(pos, 0.5);
  std::vector<LayerWeights> layers(spec.num_layers);
  for (auto& l : layers) {
    l.wq = Matrix(c, c);
    l.wk = Matrix(c, c);
    l.wv = Matrix(c, c);
    l.wo = Matrix(c, c);
    l.w1 = Matrix(c, f);
    l.w2 = Matrix(f, c);
    fill(l.wq, proj);
    fill(l.wk, proj);
    fill(l.wv, proj);
    fill(l.wo, proj);
    fill(l.w1, proj);
    fill(l.w2, down);
  }
  fill(unembed, proj);
  return Model(spec, seed, std::move(tok), std::move(pos), std::move(layers), std::move(unembed));
}

void TokenLayout::validate(const ModelSpec& spec) const {
  if (n_visual < 1) throw std::invalid_argument("layout needs at least one visual token");
  if (n_prompt < 1) throw std::invalid_argument("layout needs at least one prompt token");
  if (token_ids.size() != n_visual + n_prompt)
    throw std::invalid_argument("layout token count " + std::to_string(token_ids.size()) +
                                " != n_visual + n_prompt");
  for (TokenId t : token_ids)
    if (t >= spec.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
}

PrunePlan PrunePlan::fixed(std::size_t cut, std::vector<std::size_t> kept) {
  return PrunePlan{cut, [kept = std::move(kept)] { return kept; }};
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

namespace {

void validate_kept(std::span<const std::size_t> kept, std::size_t n_visual) {
  if (kept.empty()) throw DirectiveError("kept visual set is empty");
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= n_visual)
      throw DirectiveError("kept index " + std::to_string(kept[i]) + " outside visual block of " +
                           std::to_string(n_visual));
    if (i > 0 && kept[i] <= kept[i - 1])
      throw DirectiveError("kept visual indices must be strictly increasing");
  }
}

void embed_row(const Model& m, TokenId id, std::size_t pos, std::span<double> out) {
  const auto t = m.token_embedding().row(id);
  const auto p = m.position_embedding().row(pos);
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = t[d] + p[d];
}

void capture(HiddenCheckpoint* ck, std::size_t layer, const Matrix& hidden,
             const std::vector<std::size_t>& positions) {
  if (!ck || ck->layer != layer) return;
  ck->positions.insert(ck->positions.end(), positions.begin(), positions.end());
  ck->rows.insert(ck->rows.end(), hidden.data.begin(), hidden.data.end());
}

void feed_forward(const LayerWeights& w, Matrix& hidden, std::size_t ffn) {
  const std::size_t n = hidden.rows;
  const std::size_t c = hidden.cols;
  std::vector<double> up(n * ffn), down(n * c);
  kernels::matmul(hidden.data.data(), w.w1.data.data(), up.data(), n, c, ffn);
  kernels::relu(up);
  kernels::matmul(up.data(), w.w2.data.data(), down.data(), n, ffn, c);
  for (std::size_t i = 0; i < n * c; ++i) hidden.data[i] += down[i];
}

// One prefill layer over every alive row; K/V land in `lc`.
void prefill_layer(const Model& model, std::size_t j, ForwardState& state, LayerCache& lc,
                   AttentionSink* sink) {
  const ModelSpec& s = model.spec();
  const LayerWeights& w = model.layers()[j];
  const std::size_t n = state.hidden.rows;
  const std::size_t c = s.model_dim;
  std::vector<double> q(n * c), k(n * c), v(n * c), mixed(n * c), proj(n * c), probs(n * n);
  kernels::matmul(state.hidden.data.data(), w.wq.data.data(), q.data(), n, c, c);
  kernels::matmul(state.hidden.data.data(), w.wk.data.data(), k.data(), n, c, c);
  kernels::matmul(state.hidden.data.data(), w.wv.data.data(), v.data(), n, c, c);
  for (std::size_t h = 0; h < s.num_heads; ++h) {
    kernels::attention_head(q.data(), k.data(), v.data(), n, n, c, h * s.head_dim, s.head_dim, 0,
                            probs.data(), mixed.data());
    if (sink) sink->on_prefill(AttentionMap{j, h, n, probs, state.positions});
  }
  kernels::matmul(mixed.data(), w.wo.data.data(), proj.data(), n, c, c);
  for (std::size_t i = 0; i < n * c; ++i) state.hidden.data[i] += proj[i];
  feed_forward(w, state.hidden, s.ffn_dim());

  lc.positions = state.positions;
  lc.keys = std::move(k);
  lc.values = std::move(v);
}

// Runs layers [first, L) on `state`, applying `prune` at its cut.
PassShape run_layers(const Model& model, ForwardState& state, std::size_t first, KvCache& cache,
                     const ForwardOptions& opts) {
  const std::size_t L = model.spec().num_layers;
  PassShape shape;
  shape.layer_lengths.assign(L, 0);
  if (opts.prune && opts.prune->cut >= L)
    throw DirectiveError("prune layer " + std::to_string(opts.prune->cut) +
                         " outside model with " + std::to_string(L) + " layers");
  for (std::size_t j = first; j < L; ++j) {
    if (opts.prune && opts.prune->cut == j) {
      const auto kept = opts.prune->select();
      prune_at_layer(state, &cache, kept, j, L);
    }
    capture(opts.checkpoint, j, state.hidden, state.positions);
    prefill_layer(model, j, state, cache.layers[j], opts.sink);
    shape.layer_lengths[j] = state.hidden.rows;
  }
  capture(opts.checkpoint, L, state.hidden, state.positions);
  return shape;
}

ForwardState embed_sequence(const Model& model, std::span<const TokenId> ids,
                            std::size_t n_visual) {
  const std::size_t c = model.spec().model_dim;
  ForwardState st;
  st.hidden = Matrix(ids.size(), c);
  st.n_visual = n_visual;
  st.positions.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    st.positions[i] = i;
    embed_row(model, ids[i], i, st.hidden.row(i));
  }
  return st;
}

std::size_t row_of(const std::vector<std::size_t>& positions, std::size_t pos) {
  const auto it = std::lower_bound(positions.begin(), positions.end(), pos);
  if (it == positions.end() || *it != pos)
    throw std::logic_error("position " + std::to_string(pos) + " not alive");
  return static_cast<std::size_t>(it - positions.begin());
}

// Softmax probabilities of forced_ids[i] at the position just before it.
TeacherForcedResult score_forced(const Model& model, const ForwardState& state,
                                 std::size_t prefix_len, std::span<const TokenId> forced_ids,
                                 PassShape shape) {
  const ModelSpec& s = model.spec();
  const std::size_t g = forced_ids.size();
  Matrix rows(g, s.model_dim);
  for (std::size_t i = 0; i < g; ++i) {
    const auto src = state.hidden.row(row_of(state.positions, prefix_len - 1 + i));
    std::copy(src.begin(), src.end(), rows.row(i).begin());
  }
  std::vector<double> logits(g * s.vocab_size);
  kernels::matmul(rows.data.data(), model.unembedding().data.data(), logits.data(), g,
                  s.model_dim, s.vocab_size);
  TeacherForcedResult out;
  out.shape = std::move(shape);
  out.shape.logits_rows = g;
  for (std::size_t i = 0; i < g; ++i) {
    std::vector<double> dist(logits.begin() + i * s.vocab_size,
                             logits.begin() + (i + 1) * s.vocab_size);
    kernels::softmax(dist);
    out.probs.push_back(dist[forced_ids[i]]);
    out.distributions.push_back(std::move(dist));
  }
  return out;
}

}  // namespace

void prune_at_layer(ForwardState& state, KvCache* cache, std::span<const std::size_t> kept_visual,
                    std::size_t layer, std::size_t num_layers) {
  if (layer >= num_layers)
    throw DirectiveError("prune layer " + std::to_string(layer) + " outside [0, " +
                         std::to_string(num_layers) + ")");
  validate_kept(kept_visual, state.n_visual);

  auto keep = [&](std::size_t pos) {
    return pos >= state.n_visual ||
           std::binary_search(kept_visual.begin(), kept_visual.end(), pos);
  };

  const std::size_t c = state.hidden.cols;
  std::size_t out = 0;
  for (std::size_t i = 0; i < state.positions.size(); ++i) {
    if (!keep(state.positions[i])) continue;
    if (out != i) {
      std::copy_n(state.hidden.data.begin() + i * c, c, state.hidden.data.begin() + out * c);
      state.positions[out] = state.positions[i];
    }
    ++out;
  }
  state.positions.resize(out);
  state.hidden.rows = out;
  state.hidden.data.resize(out * c);

  if (!cache) return;
  for (std::size_t j = layer; j < cache->layers.size(); ++j) {
    LayerCache& lc = cache->layers[j];
    std::size_t w = 0;
    for (std::size_t i = 0; i < lc.positions.size(); ++i) {
      if (!keep(lc.positions[i])) continue;
      if (w != i) {
        std::copy_n(lc.keys.begin() + i * c, c, lc.keys.begin() + w * c);
        std::copy_n(lc.values.begin() + i * c, c, lc.values.begin() + w * c);
        lc.positions[w] = lc.positions[i];
      }
      ++w;
    }
    lc.positions.resize(w);
    lc.keys.resize(w * c);
    lc.values.resize(w * c);
  }
}

PrefillResult prefill(const Model& model, const TokenLayout& layout, const ForwardOptions& opts) {
  const ModelSpec& s = model.spec();
  layout.validate(s);
  if (layout.size() > s.max_seq_len)
    throw CapacityError("sequence of " + std::to_string(layout.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(s.max_seq_len));

  PrefillResult res;
  res.cache.layers.resize(s.num_layers);
  res.cache.n_visual = layout.n_visual;
  res.cache.n_prompt = layout.n_prompt;
  res.cache.next_position = layout.size();

  ForwardState st = embed_sequence(model, layout.token_ids, layout.n_visual);
  res.shape = run_layers(model, st, 0, res.cache, opts);

  res.logits.resize(s.vocab_size);
  kernels::matmul(st.hidden.row(st.hidden.rows - 1).data(), model.unembedding().data.data(),
                  res.logits.data(), 1, s.model_dim, s.vocab_size);
  res.shape.logits_rows = 1;
  return res;
}

DecodeResult decode_step(const Model& model, KvCache& cache, TokenId token_id,
                         const ForwardOptions& opts) {
  const ModelSpec& s = model.spec();
  if (cache.layers.size() != s.num_layers) throw std::invalid_argument("cache/model mismatch");
  if (token_id >= s.vocab_size) throw std::invalid_argument("token id outside vocabulary");
  const std::size_t pos = cache.next_position;
  if (pos >= s.max_seq_len)
    throw CapacityError("decode position " + std::to_string(pos) + " exceeds max_seq_len " +
                        std::to_string(s.max_seq_len));

  const std::size_t c = s.model_dim;
  Matrix h(1, c);
  embed_row(model, token_id, pos, h.row(0));
  const std::vector<std::size_t> self{pos};

  DecodeResult res;
  res.shape.context_lengths.resize(s.num_layers);
  std::vector<double> q(c), k(c), v(c), mixed(c), proj(c);
  for (std::size_t j = 0; j < s.num_layers; ++j) {
    capture(opts.checkpoint, j, h, self);
    const LayerWeights& w = model.layers()[j];
    LayerCache& lc = cache.layers[j];
    kernels::matmul(h.data.data(), w.wq.data.data(), q.data(), 1, c, c);
    kernels::matmul(h.data.data(), w.wk.data.data(), k.data(), 1, c, c);
    kernels::matmul(h.data.data(), w.wv.data.data(), v.data(), 1, c, c);
    lc.positions.push_back(pos);
    lc.keys.insert(lc.keys.end(), k.begin(), k.end());
    lc.values.insert(lc.values.end(), v.begin(), v.end());
    const std::size_t m = lc.positions.size();
    std::vector<double> probs(m);
    for (std::size_t hd = 0; hd < s.num_heads; ++hd) {
      kernels::attention_head(q.data(), lc.keys.data(), lc.values.data(), 1, m, c,
                              hd * s.head_dim, s.head_dim, m - 1, probs.data(), mixed.data());
      if (opts.sink) opts.sink->on_decode(AttentionRow{j, hd, pos, probs, lc.positions});
    }
    kernels::matmul(mixed.data(), w.wo.data.data(), proj.data(), 1, c, c);
    for (std::size_t d = 0; d < c; ++d) h.data[d] += proj[d];
    feed_forward(w, h, s.ffn_dim());
    res.shape.context_lengths[j] = m;
  }
  capture(opts.checkpoint, s.num_layers, h, self);

  res.logits.resize(s.vocab_size);
  kernels::matmul(h.data.data(), model.unembedding().data.data(), res.logits.data(), 1, c,
                  s.vocab_size);
  cache.next_position = pos + 1;
  return res;
}

GenerationResult generate(const Model& model, const TokenLayout& layout, std::size_t max_new,
                          const ForwardOptions& opts) {
  if (max_new < 1) throw std::invalid_argument("max_new must be >= 1");
  const ModelSpec& s = model.spec();
  layout.validate(s);
  if (layout.size() + max_new > s.max_seq_len)
    throw CapacityError("layout of " + std::to_string(layout.size()) + " tokens plus " +
                        std::to_string(max_new) + " new tokens exceeds max_seq_len " +
                        std::to_string(s.max_seq_len));

  PrefillResult pre = prefill(model, layout, opts);
  GenerationResult out;
  out.prefill_shape = pre.shape;
  // Decode steps never prune; the cut already happened in prefill.
  ForwardOptions step_opts = opts;
  step_opts.prune = nullptr;

  std::vector<double> logits = std::move(pre.logits);
  for (std::size_t i = 0; i < max_new; ++i) {
    std::vector<double> dist = logits;
    kernels::softmax(dist);
    const auto tok = static_cast<TokenId>(argmax(dist));
    out.generated_ids.push_back(tok);
    out.step_probs.push_back(dist[tok]);
    out.step_distributions.push_back(std::move(dist));
    DecodeResult d = decode_step(model, pre.cache, tok, step_opts);
    out.decode_shapes.push_back(std::move(d.shape));
    logits = std::move(d.logits);
    if (tok == kEosId) break;
  }
  return out;
}

TeacherForcedResult teacher_forced_probs(const Model& model, const TokenLayout& layout,
                                         std::span<const TokenId> forced_ids,
                                         const PrunePlan* prune, AttentionSink* sink) {
  const ModelSpec& s = model.spec();
  layout.validate(s);
  if (forced_ids.empty()) throw std::invalid_argument("forced_ids must be nonempty");
  for (TokenId t : forced_ids)
    if (t >= s.vocab_size) throw std::invalid_argument("forced id outside vocabulary");
  const std::size_t total = layout.size() + forced_ids.size();
  if (total > s.max_seq_len)
    throw CapacityError("teacher-forced sequence of " + std::to_string(total) +
                        " tokens exceeds max_seq_len " + std::to_string(s.max_seq_len));

  std::vector<TokenId> ids = layout.token_ids;
  ids.insert(ids.end(), forced_ids.begin(), forced_ids.end());
  ForwardState st = embed_sequence(model, ids, layout.n_visual);
  KvCache scratch;
  scratch.layers.resize(s.num_layers);
  ForwardOptions opts;
  opts.sink = sink;
  opts.prune = prune;
  PassShape shape = run_layers(model, st, 0, scratch, opts);
  return score_forced(model, st, layout.size(), forced_ids, std::move(shape));
}

TeacherForcedResult teacher_forced_resume(const Model& model, const HiddenCheckpoint& checkpoint,
                                          std::size_t n_visual, std::size_t n_prompt,
                                          std::span<const TokenId> forced_ids,
                                          std::span<const std::size_t> kept_visual) {
  const ModelSpec& s = model.spec();
  if (forced_ids.empty()) throw std::invalid_argument("forced_ids must be nonempty");
  if (checkpoint.layer > s.num_layers) throw std::invalid_argument("checkpoint layer outside model");
  validate_kept(kept_visual, n_visual);
  const std::size_t c = s.model_dim;
  if (checkpoint.rows.size() != checkpoint.positions.size() * c)
    throw std::invalid_argument("checkpoint rows do not match model width");

  auto find = [&](std::size_t pos) -> std::size_t {
    for (std::size_t i = 0; i < checkpoint.positions.size(); ++i)
      if (checkpoint.positions[i] == pos) return i;
    throw std::invalid_argument("checkpoint is missing position " + std::to_string(pos));
  };

  const std::size_t prefix = n_visual + n_prompt;
  ForwardState st;
  st.n_visual = n_visual;
  for (std::size_t v : kept_visual) st.positions.push_back(v);
  for (std::size_t p = n_visual; p < prefix + forced_ids.size(); ++p) st.positions.push_back(p);
  st.hidden = Matrix(st.positions.size(), c);
  for (std::size_t i = 0; i < st.positions.size(); ++i) {
    const std::size_t src = find(st.positions[i]);
    std::copy_n(checkpoint.rows.begin() + src * c, c, st.hidden.data.begin() + i * c);
  }

  KvCache scratch;
  scratch.layers.resize(s.num_layers);
  PassShape shape = run_layers(model, st, checkpoint.layer, scratch, ForwardOptions{});
  return score_forced(model, st, prefix, forced_ids, std::move(shape));
}

}  // namespace cprune
