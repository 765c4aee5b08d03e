#include "cprune/exit_gate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cprune/error.hpp"

namespace cprune {

std::string_view to_string(ExitCriterion c) {
  switch (c) {
    case ExitCriterion::combined: return "combined";
    case ExitCriterion::confidence: return "confidence";
    case ExitCriterion::consistency: return "consistency";
    case ExitCriterion::quantile_q1: return "quantile_q1";
    case ExitCriterion::quantile_q2: return "quantile_q2";
    case ExitCriterion::quantile_q3: return "quantile_q3";
    case ExitCriterion::entropy: return "entropy";
  }
  return "?";
}

ExitCriterion exit_criterion_from_string(std::string_view name) {
  for (auto c : kAllCriteria)
    if (to_string(c) == name) return c;
  throw ConfigError("unknown exit criterion '" + std::string(name) + "'");
}

double confidence_score(std::span<const double> step_probs) {
  if (step_probs.empty()) throw ScoreError("confidence needs at least one step");
  double log_sum = 0;
  for (double p : step_probs) {
    if (!(p > 0)) return 0.0;
    log_sum += std::log(p);
  }
  return std::exp(log_sum / static_cast<double>(step_probs.size()));
}

double consistency_score(std::span<const double> forced_probs, bool length_normalized) {
  if (forced_probs.empty()) throw ScoreError("consistency needs at least one step");
  if (length_normalized) return confidence_score(forced_probs);
  double prod = 1;
  for (double p : forced_probs) prod *= p;
  return prod;
}

double decision_score(double s_confidence, double s_consistency) {
  return 0.5 * (s_confidence + s_consistency);
}

double quantile_score(std::span<const double> step_probs, double q) {
  if (step_probs.empty()) throw ScoreError("quantile needs at least one step");
  if (q < 0 || q > 1) throw ScoreError("quantile level outside [0, 1]");
  std::vector<double> v(step_probs.begin(), step_probs.end());
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double entropy_score(std::span<const std::vector<double>> distributions) {
  if (distributions.empty()) throw ScoreError("entropy needs at least one step");
  double total = 0;
  for (const auto& d : distributions) {
    double sum = 0, h = 0;
    for (double p : d) {
      if (!(p >= 0)) throw ScoreError("distribution has a negative or NaN entry");
      sum += p;
      if (p > 0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ScoreError("distribution does not sum to 1");
    total += h;
  }
  return std::exp(-total / static_cast<double>(distributions.size()));
}

double calibrate_threshold(std::span<const double> scores, double target_exit_ratio) {
  if (scores.empty()) throw ScoreError("calibration needs at least one score");
  if (!(target_exit_ratio >= 0 && target_exit_ratio <= 1))
    throw ScoreError("target exit ratio outside [0, 1]");
  std::vector<double> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end(), std::greater<>());
  const std::size_t n = v.size();
  const auto m = static_cast<std::size_t>(
      std::floor(target_exit_ratio * static_cast<double>(n) + 0.5));
  if (m == 0) return std::nextafter(v.front(), std::numeric_limits<double>::infinity());
  if (m >= n) return v.back();
  // v[m-1] must pass and v[m] must not; with ties the closest achievable count wins.
  if (v[m - 1] > v[m]) return 0.5 * (v[m - 1] + v[m]);
  const double tied = v[m];
  const auto first = static_cast<std::size_t>(
      std::find(v.begin(), v.end(), tied) - v.begin());  // count strictly above
  const auto last = static_cast<std::size_t>(
      std::find_if(v.begin(), v.end(), [&](double x) { return x < tied; }) - v.begin());
  if (m - first <= last - m) {
    return first == 0 ? std::nextafter(tied, std::numeric_limits<double>::infinity())
                      : 0.5 * (v[first - 1] + tied);
  }
  return tied;
}

double ScoreSet::get(ExitCriterion c) const {
  switch (c) {
    case ExitCriterion::combined: return combined;
    case ExitCriterion::confidence: return confidence;
    case ExitCriterion::consistency: return consistency;
    case ExitCriterion::quantile_q1: return q1;
    case ExitCriterion::quantile_q2: return q2;
    case ExitCriterion::quantile_q3: return q3;
    case ExitCriterion::entropy: return entropy;
  }
  return 0;
}

ScoreSet compute_scores(std::span<const double> step_probs,
                        std::span<const std::vector<double>> distributions,
                        std::span<const double> forced_probs, bool length_normalized) {
  ScoreSet s;
  s.confidence = confidence_score(step_probs);
  s.consistency = consistency_score(forced_probs, length_normalized);
  s.combined = decision_score(s.confidence, s.consistency);
  s.q1 = quantile_score(step_probs, 0.25);
  s.q2 = quantile_score(step_probs, 0.50);
  s.q3 = quantile_score(step_probs, 0.75);
  s.entropy = entropy_score(distributions);
  return s;
}

nlohmann::json ExitDecision::to_json() const {
  return {{"s_confidence", s_confidence}, {"s_consistency", s_consistency}, {"s", s},
          {"threshold", threshold},       {"exit", exit},
          {"criterion", std::string(to_string(criterion))}};
}

ExitDecision decide(const ScoreSet& scores, ExitCriterion criterion, double threshold) {
  ExitDecision d;
  d.s_confidence = scores.confidence;
  d.s_consistency = scores.consistency;
  d.s = scores.get(criterion);
  d.threshold = threshold;
  d.exit = d.s >= threshold;
  d.criterion = criterion;
  return d;
}

}  // namespace cprune
