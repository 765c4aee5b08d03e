#pragma once

// Ablation grids: which small-model layers feed the importance map, which
// tokens' attention is summed, and which score drives the exit gate.

#include <cstddef>
#include <string>
#include <vector>

#include "cprune/cascade.hpp"

namespace cprune {

struct AblationRow {
  std::string label;
  std::size_t layers = 0;  // small-model layers feeding the ranking (0 for oracle)
  double accuracy = 0;
  double score_ratio = 0;
  double mean_flops = 0;  // large-model pass plus any ranking overhead
  double avg_retention = 1;
};

struct CriterionPoint {
  ExitCriterion criterion = ExitCriterion::combined;
  double target_exit_ratio = 0;
  double exit_ratio = 0;
  double threshold = 0;
  double accuracy = 0;
  double mean_flops = 0;
};

struct CriterionArea {
  ExitCriterion criterion = ExitCriterion::combined;
  double area = 0;  // trapezoid area of (accuracy - small-only accuracy) over exit ratio
};

struct CriteriaAblation {
  double small_only_accuracy = 0;
  std::vector<CriterionPoint> curves;
  std::vector<CriterionArea> areas;
};

inline const std::vector<double> kDefaultLayerFractions{0.1, 0.3, 0.5, 0.7, 1.0};

// One row per fraction of the small model's first layers, then an
// oracle_large row. Pure pruning: no early exit.
std::vector<AblationRow> ablate_layers(const std::vector<NeedleInstance>& dataset,
                                       const CascadeConfig& base,
                                       const std::vector<double>& fractions,
                                       std::size_t parallel = 1);

// One row per token subset.
std::vector<AblationRow> ablate_tokens(const std::vector<NeedleInstance>& dataset,
                                       const CascadeConfig& base, std::size_t parallel = 1);

CriteriaAblation ablate_criteria(const std::vector<NeedleInstance>& dataset,
                                 const CascadeConfig& base,
                                 const std::vector<double>& exit_ratios,
                                 std::size_t parallel = 1);

// Trapezoid rule over points sorted by x.
double trapezoid_area(std::vector<std::pair<double, double>> points);

std::string ablation_rows_csv(const std::vector<AblationRow>& rows);
std::string criteria_curves_csv(const CriteriaAblation& a);
std::string criteria_areas_csv(const CriteriaAblation& a);

}  // namespace cprune
