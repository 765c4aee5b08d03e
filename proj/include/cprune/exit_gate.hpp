#pragma once

// Early-exit decision scores computed from the small model's own generation.
// Every score lives in [0, 1] so one threshold domain serves all criteria.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace cprune {

enum class ExitCriterion {
  combined,
  confidence,
  consistency,
  quantile_q1,
  quantile_q2,
  quantile_q3,
  entropy,
};

inline constexpr ExitCriterion kAllCriteria[] = {
    ExitCriterion::combined,    ExitCriterion::confidence,  ExitCriterion::consistency,
    ExitCriterion::quantile_q1, ExitCriterion::quantile_q2, ExitCriterion::quantile_q3,
    ExitCriterion::entropy,
};

std::string_view to_string(ExitCriterion c);
ExitCriterion exit_criterion_from_string(std::string_view name);

// Geometric mean of the step probabilities; 0 if any step is 0.
double confidence_score(std::span<const double> step_probs);

// Product of the teacher-forced probabilities. The length-normalized variant
// takes the N_G-th root.
double consistency_score(std::span<const double> forced_probs, bool length_normalized = false);

double decision_score(double s_confidence, double s_consistency);

// Linear interpolation between order statistics, q in [0, 1].
double quantile_score(std::span<const double> step_probs, double q);

// exp(-mean Shannon entropy). Throws ScoreError if a distribution does not
// sum to 1 within 1e-6 or has a negative entry.
double entropy_score(std::span<const std::vector<double>> distributions);

// Threshold t such that the number of scores >= t is round(target * n).
double calibrate_threshold(std::span<const double> scores, double target_exit_ratio);

// Every per-criterion score of one small-model generation.
struct ScoreSet {
  double confidence = 0;
  double consistency = 0;
  double combined = 0;
  double q1 = 0, q2 = 0, q3 = 0;
  double entropy = 0;

  double get(ExitCriterion c) const;
};

ScoreSet compute_scores(std::span<const double> step_probs,
                        std::span<const std::vector<double>> distributions,
                        std::span<const double> forced_probs, bool length_normalized = false);

struct ExitDecision {
  double s_confidence = 0;
  double s_consistency = 0;
  double s = 0;  // score of `criterion`
  double threshold = 0;
  bool exit = false;
  ExitCriterion criterion = ExitCriterion::combined;

  nlohmann::json to_json() const;
};

ExitDecision decide(const ScoreSet& scores, ExitCriterion criterion, double threshold);

}  // namespace cprune
