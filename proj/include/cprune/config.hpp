#pragma once

// Run configuration document. Every object is checked against a fixed key
// set; unknown keys and wrongly typed values raise ConfigError naming the
// offending path (e.g. "sweep.points[1].R").
//
// {
//   "seed": 7,
//   "parallel": 1,
//   "recipe": {"grid": [8, 8], "num_symbols": 8, "faint_levels": [0.15, 0.3, 0.62],
//              "prompt_len": 4, "filler_tokens": 4, "concentration": 0.95,
//              "small_concentration": 0.6, "small_relevance_layers": [],
//              "large_relevance_layers": [], "answer_fidelity": "faithful",
//              "answer_gain": 12, "random_scale": 0.02},
//   "small_model": {"num_layers": 24, "num_heads": 4, "head_dim": 16, "max_seq_len": 128},
//   "large_model": {"num_layers": 48, ...},
//   "dataset": {"n_instances": 200, "distractors": 4, "hard_distractors": 64, "hard_fraction": 0.3},
//   "cascade": {"max_new_tokens": 1, "fastv_layer": 2, "decode_weight": 1,
//               "token_subset": "prompt_and_generated", "trace_layer_fraction": 1,
//               "consistency": {"k": 2, "R": 0.05, "length_normalized": false}},
//   "sweep": {"points": [{"k": 19, "R": 0.4}, ...], "ranking_sources": ["aggregated"],
//             "criteria": ["combined"], "thresholds": [], "exit_ratios": [0.4]},
//   "ablation": {"k": 2, "R": 0.05, "layer_fractions": [0.1, 0.3, 0.5, 0.7, 1.0],
//                "exit_ratios": [0, 0.1, ..., 1]},
//   "export_traces": 4
// }

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"

#include "cprune/cascade.hpp"
#include "cprune/synth.hpp"

namespace cprune {

struct ModelShape {
  std::size_t num_layers = 24;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::size_t max_seq_len = 128;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t parallel = 1;
  PlantedRecipe recipe;
  ModelShape small_model{24, 4, 16, 128};
  ModelShape large_model{48, 4, 16, 128};
  std::size_t n_instances = 200;
  std::size_t distractors = 4;
  std::size_t hard_distractors = 64;
  double hard_fraction = 0.3;

  std::size_t max_new_tokens = 1;
  std::size_t fastv_layer = 2;
  double decode_weight = 1.0;
  TokenSubset token_subset = TokenSubset::prompt_and_generated;
  double trace_layer_fraction = 1.0;
  ConsistencyDirective consistency;

  struct Point {
    std::size_t k = 2;
    double R = 0.05;
  };
  std::vector<Point> points{{19, 0.40}, {9, 0.20}, {2, 0.05}};
  std::vector<RankingSource> ranking_sources{RankingSource::aggregated};
  std::vector<ExitCriterion> criteria{ExitCriterion::combined};
  std::vector<double> thresholds;
  std::vector<double> exit_ratios{0.4};

  // Prune point used by ablations and by the base cascade configuration.
  std::size_t ablation_k = 2;
  double ablation_R = 0.05;
  std::vector<double> layer_fractions{0.1, 0.3, 0.5, 0.7, 1.0};
  std::vector<double> ablation_exit_ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                           0.6, 0.7, 0.8, 0.9, 1.0};
  std::size_t export_traces = 4;

  ModelSpec small_spec() const;
  ModelSpec large_spec() const;
  // Recipe with relevance layers filled in for the configured depths.
  PlantedRecipe resolved_recipe() const;
  DatasetOptions dataset_options() const;
  std::vector<SweepPoint> sweep_points() const;
  CascadeConfig cascade_base(const Model& small, const Model& large) const;

  nlohmann::json to_json() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace cprune
