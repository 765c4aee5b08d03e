#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cprune/aggregate.hpp"
#include "cprune/engine.hpp"

namespace cprune {

enum class RankingSource { aggregated, fastv_single_layer, random, oracle_large };

std::string_view to_string(RankingSource s);
RankingSource ranking_source_from_string(std::string_view name);

struct PruneDirective {
  std::size_t prune_layer = 1;  // k, 1-indexed: layers 1..k see every token
  double retain_fraction = 1.0;
  std::vector<std::size_t> ranking;  // permutation of [0, N_I), most important first
  std::vector<std::size_t> kept;     // ascending
  RankingSource source = RankingSource::aggregated;

  nlohmann::json to_json() const;
};

// Indices by descending importance; ties go to the lower index.
std::vector<std::size_t> rank_tokens(std::span<const double> importance);

// max(1, round_half_up(R * N_I)).
std::size_t kept_count(double retain_fraction, std::size_t n_visual);

PruneDirective make_directive(std::vector<std::size_t> ranking, double retain_fraction,
                              std::size_t prune_layer, std::size_t n_visual,
                              RankingSource source, std::optional<std::size_t> num_layers = {});

// Engine plan for a directive on a model with num_layers layers; empty when
// the cut falls after the last layer (k == L).
std::optional<PrunePlan> to_plan(const PruneDirective& d, std::size_t num_layers);

// (k + (L - k) * R) / L.
double avg_retention(std::size_t num_layers, std::size_t prune_layer, double retain_fraction);

// Ranking from one layer's last-prompt-token attention row.
std::vector<std::size_t> fastv_rank(const AttentionTrace& single_layer_trace);

std::vector<std::size_t> random_rank(std::size_t n_visual, std::uint64_t seed);

}  // namespace cprune
