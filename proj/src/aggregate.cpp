#include "cprune/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cprune/error.hpp"

namespace cprune {

namespace {
constexpr double kRowTolerance = 1e-6;
}

std::string_view to_string(TokenSubset s) {
  switch (s) {
    case TokenSubset::last_prompt_token: return "last_prompt_token";
    case TokenSubset::prompt_only: return "prompt_only";
    case TokenSubset::generated_only: return "generated_only";
    case TokenSubset::prompt_and_generated: return "prompt_and_generated";
  }
  return "?";
}

TokenSubset token_subset_from_string(std::string_view name) {
  for (auto s : {TokenSubset::last_prompt_token, TokenSubset::prompt_only,
                 TokenSubset::generated_only, TokenSubset::prompt_and_generated})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown token subset '" + std::string(name) + "'");
}

std::vector<std::size_t> first_layers(std::size_t num_layers, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ConfigError("layer fraction must be in (0, 1]");
  auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(num_layers)));
  count = std::clamp<std::size_t>(count, 1, num_layers);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = i;
  return out;
}

AttentionTrace::AttentionTrace(std::size_t n_visual, std::size_t n_prompt,
                               std::optional<std::vector<std::size_t>> layer_filter)
    : n_visual_(n_visual),
      n_prompt_(n_prompt),
      filter_(std::move(layer_filter)),
      a_prefill_(n_visual, 0.0),
      a_decode_(n_visual, 0.0),
      a_last_prompt_(n_visual, 0.0) {
  if (n_visual == 0 || n_prompt == 0) throw TraceError("trace needs N_I >= 1 and N_T >= 1");
  if (filter_) std::sort(filter_->begin(), filter_->end());
}

bool AttentionTrace::includes_layer(std::size_t layer) const {
  return !filter_ || std::binary_search(filter_->begin(), filter_->end(), layer);
}

std::size_t AttentionTrace::included_layer_count(std::size_t num_layers) const {
  if (!filter_) return num_layers;
  return static_cast<std::size_t>(
      std::count_if(filter_->begin(), filter_->end(), [&](std::size_t l) { return l < num_layers; }));
}

void AttentionTrace::accumulate_prefill(const AttentionMap& map) {
  if (!includes_layer(map.layer))
    throw TraceError("layer " + std::to_string(map.layer) + " is outside the trace's layer filter");
  if (map.positions.size() != map.n || map.probs.size() != map.n * map.n)
    throw TraceError("attention map dimensions are inconsistent");

  const std::size_t prompt_begin = n_visual_;
  const std::size_t prompt_end = n_visual_ + n_prompt_;
  std::size_t prompt_rows = 0;
  for (std::size_t r = 0; r < map.n; ++r) {
    const std::size_t pos = map.positions[r];
    if (pos < prompt_begin || pos >= prompt_end) continue;
    ++prompt_rows;
    double row_sum = 0.0;
    for (std::size_t c = 0; c <= r; ++c) row_sum += map.at(r, c);
    if (std::abs(row_sum - 1.0) > kRowTolerance)
      throw TraceError("attention row does not sum to 1 (got " + std::to_string(row_sum) + ")");
    for (std::size_t c = 0; c < r; ++c) {
      const std::size_t vis = map.positions[c];
      if (vis >= n_visual_) break;  // columns are position-ordered
      a_prefill_[vis] += map.at(r, c);
      if (pos == prompt_end - 1) a_last_prompt_[vis] += map.at(r, c);
    }
  }
  if (prompt_rows != n_prompt_)
    throw TraceError("attention map covers " + std::to_string(prompt_rows) + " of " +
                     std::to_string(n_prompt_) + " prompt positions");

  ++prefill_maps_;
  if (map.head == 0) ++layers_seen_;
  heads_seen_ = std::max(heads_seen_, map.head + 1);
}

void AttentionTrace::accumulate_decode(const AttentionRow& row) {
  if (!includes_layer(row.layer))
    throw TraceError("layer " + std::to_string(row.layer) + " is outside the trace's layer filter");
  if (row.positions.size() != row.probs.size() || row.positions.empty())
    throw TraceError("decode attention row dimensions are inconsistent");
  if (row.query_position < n_visual_ + n_prompt_ || row.positions.back() != row.query_position)
    throw TraceError("decode row does not belong to a generated token");
  if (row.positions.size() < n_prompt_ + 1)
    throw TraceError("decode row is shorter than the prompt block");
  for (std::size_t i = 0; i < row.positions.size(); ++i) {
    const std::size_t pos = row.positions[i];
    if (pos >= n_visual_) break;
    a_decode_[pos] += row.probs[i];
  }
  if (!last_decode_position_ || *last_decode_position_ != row.query_position) {
    ++decode_steps_;
    last_decode_position_ = row.query_position;
  }
  ++decode_rows_;
}

void AttentionTrace::on_prefill(const AttentionMap& map) {
  if (includes_layer(map.layer)) accumulate_prefill(map);
}

void AttentionTrace::on_decode(const AttentionRow& row) {
  if (includes_layer(row.layer)) accumulate_decode(row);
}

std::vector<double> AttentionTrace::finalize(double decode_weight) const {
  if (prefill_maps_ == 0) throw TraceError("trace is empty: no prefill attention accumulated");
  std::vector<double> out(n_visual_);
  for (std::size_t i = 0; i < n_visual_; ++i) out[i] = a_prefill_[i] + decode_weight * a_decode_[i];
  return out;
}

std::vector<double> AttentionTrace::subset_importance(TokenSubset mode) const {
  switch (mode) {
    case TokenSubset::last_prompt_token:
    case TokenSubset::prompt_only:
      if (prefill_maps_ == 0) throw TraceError("prompt accumulator is empty");
      return mode == TokenSubset::prompt_only ? a_prefill_ : a_last_prompt_;
    case TokenSubset::generated_only:
      if (decode_rows_ == 0) throw TraceError("generated-token accumulator is empty");
      return a_decode_;
    case TokenSubset::prompt_and_generated:
      return finalize();
  }
  throw TraceError("unknown token subset");
}

nlohmann::json AttentionTrace::to_json() const {
  nlohmann::json j;
  j["n_visual"] = n_visual_;
  j["n_prompt"] = n_prompt_;
  j["a_prefill"] = a_prefill_;
  j["a_decode"] = a_decode_;
  j["a_last_prompt"] = a_last_prompt_;
  j["counters"] = {{"prefill_maps_seen", prefill_maps_},
                   {"layers_seen", layers_seen_},
                   {"heads_seen", heads_seen_},
                   {"decode_steps_seen", decode_steps_}};
  if (filter_) j["layer_filter"] = *filter_;
  return j;
}

}  // namespace cprune
