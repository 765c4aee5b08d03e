#include "cprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "cprune/error.hpp"

namespace cprune {

std::string_view to_string(RankingSource s) {
  switch (s) {
    case RankingSource::aggregated: return "aggregated";
    case RankingSource::fastv_single_layer: return "fastv_single_layer";
    case RankingSource::random: return "random";
    case RankingSource::oracle_large: return "oracle_large";
  }
  return "?";
}

RankingSource ranking_source_from_string(std::string_view name) {
  for (auto s : {RankingSource::aggregated, RankingSource::fastv_single_layer,
                 RankingSource::random, RankingSource::oracle_large})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown ranking source '" + std::string(name) + "'");
}

nlohmann::json PruneDirective::to_json() const {
  return {{"source", std::string(to_string(source))},
          {"k", prune_layer},
          {"R", retain_fraction},
          {"kept", kept}};
}

std::vector<std::size_t> rank_tokens(std::span<const double> importance) {
  for (double v : importance)
    if (!std::isfinite(v)) throw RankingError("importance vector contains a non-finite entry");
  std::vector<std::size_t> idx(importance.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
  return idx;
}

std::size_t kept_count(double retain_fraction, std::size_t n_visual) {
  const double raw = std::floor(retain_fraction * static_cast<double>(n_visual) + 0.5);
  return std::clamp<std::size_t>(static_cast<std::size_t>(raw), 1, n_visual);
}

PruneDirective make_directive(std::vector<std::size_t> ranking, double retain_fraction,
                              std::size_t prune_layer, std::size_t n_visual, RankingSource source,
                              std::optional<std::size_t> num_layers) {
  if (!(retain_fraction > 0.0) || retain_fraction > 1.0)
    throw DirectiveError("retain fraction must be in (0, 1], got " +
                         std::to_string(retain_fraction));
  if (prune_layer < 1 || (num_layers && prune_layer > *num_layers))
    throw DirectiveError("prune layer " + std::to_string(prune_layer) + " out of range");
  if (ranking.size() != n_visual) throw DirectiveError("ranking length differs from N_I");
  std::vector<bool> seen(n_visual, false);
  for (std::size_t r : ranking) {
    if (r >= n_visual || seen[r]) throw DirectiveError("ranking is not a permutation");
    seen[r] = true;
  }
  PruneDirective d;
  d.prune_layer = prune_layer;
  d.retain_fraction = retain_fraction;
  d.source = source;
  const std::size_t n = kept_count(retain_fraction, n_visual);
  d.kept.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(d.kept.begin(), d.kept.end());
  d.ranking = std::move(ranking);
  return d;
}

std::optional<PrunePlan> to_plan(const PruneDirective& d, std::size_t num_layers) {
  if (d.prune_layer >= num_layers) return std::nullopt;
  return PrunePlan::fixed(d.prune_layer, d.kept);
}

double avg_retention(std::size_t num_layers, std::size_t prune_layer, double retain_fraction) {
  const auto L = static_cast<double>(num_layers);
  const auto k = static_cast<double>(prune_layer);
  return (k + (L - k) * retain_fraction) / L;
}

std::vector<std::size_t> fastv_rank(const AttentionTrace& single_layer_trace) {
  if (single_layer_trace.prefill_maps_seen() == 0)
    throw RankingError("single-layer attention was not captured");
  return rank_tokens(single_layer_trace.a_last_prompt());
}

std::vector<std::size_t> random_rank(std::size_t n_visual, std::uint64_t seed) {
  std::vector<std::size_t> idx(n_visual);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n_visual; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

}  // namespace cprune
