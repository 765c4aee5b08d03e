#pragma once

// Streaming accumulation of visual-token importance from every attention map
// a forward pass delivers. Memory is O(N_I) regardless of depth, heads or
// generated length: maps are folded in as they arrive and dropped.

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cprune/engine.hpp"

namespace cprune {

enum class TokenSubset { last_prompt_token, prompt_only, generated_only, prompt_and_generated };

std::string_view to_string(TokenSubset s);
TokenSubset token_subset_from_string(std::string_view name);

// Engine layer indices [0, max(1, floor(fraction * num_layers))).
std::vector<std::size_t> first_layers(std::size_t num_layers, double fraction);

class AttentionTrace : public AttentionSink {
 public:
  AttentionTrace(std::size_t n_visual, std::size_t n_prompt,
                 std::optional<std::vector<std::size_t>> layer_filter = std::nullopt);

  // Adds the column sums of the prompt-rows x visual-columns block.
  void accumulate_prefill(const AttentionMap& map);
  // Adds the visual prefix of a generated token's attention row.
  void accumulate_decode(const AttentionRow& row);

  // Sink interface: maps from layers outside the filter are ignored.
  void on_prefill(const AttentionMap& map) override;
  void on_decode(const AttentionRow& row) override;

  bool includes_layer(std::size_t layer) const;

  // a_prefill + decode_weight * a_decode.
  std::vector<double> finalize(double decode_weight = 1.0) const;
  std::vector<double> subset_importance(TokenSubset mode) const;

  const std::vector<double>& a_prefill() const { return a_prefill_; }
  const std::vector<double>& a_decode() const { return a_decode_; }
  const std::vector<double>& a_last_prompt() const { return a_last_prompt_; }
  std::size_t n_visual() const { return n_visual_; }
  std::size_t n_prompt() const { return n_prompt_; }
  std::size_t prefill_maps_seen() const { return prefill_maps_; }
  std::size_t layers_seen() const { return layers_seen_; }
  std::size_t heads_seen() const { return heads_seen_; }
  std::size_t decode_steps_seen() const { return decode_steps_; }
  std::size_t included_layer_count(std::size_t num_layers) const;

  nlohmann::json to_json() const;

 private:
  std::size_t n_visual_;
  std::size_t n_prompt_;
  std::optional<std::vector<std::size_t>> filter_;
  std::vector<double> a_prefill_;
  std::vector<double> a_decode_;
  std::vector<double> a_last_prompt_;
  std::size_t prefill_maps_ = 0;
  std::size_t layers_seen_ = 0;
  std::size_t heads_seen_ = 0;
  std::size_t decode_steps_ = 0;
  std::size_t decode_rows_ = 0;
  std::optional<std::size_t> last_decode_position_;
};

}  // namespace cprune
