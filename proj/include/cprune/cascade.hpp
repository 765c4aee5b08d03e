#pragma once

// Small-model generation with trace capture, exit decision, and conditional
// pruned large-model inference, with analytic cost accounting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cprune/aggregate.hpp"
#include "cprune/engine.hpp"
#include "cprune/exit_gate.hpp"
#include "cprune/pruner.hpp"
#include "cprune/synth.hpp"

namespace cprune {

struct ConsistencyDirective {
  std::size_t prune_layer = 2;  // 1-indexed
  double retain_fraction = 0.05;
  bool length_normalized = false;
};

struct CascadeConfig {
  const Model* small = nullptr;
  const Model* large = nullptr;
  std::size_t prune_layer = 2;  // 1-indexed, in the large model
  double retain_fraction = 0.05;
  RankingSource ranking_source = RankingSource::aggregated;
  ExitCriterion exit_criterion = ExitCriterion::combined;
  double threshold = 0.5;
  ConsistencyDirective consistency;
  std::size_t max_new_tokens = 1;
  std::size_t fastv_layer = 2;  // 1-indexed
  double decode_weight = 1.0;
  TokenSubset token_subset = TokenSubset::prompt_and_generated;
  std::optional<std::vector<std::size_t>> trace_layers;  // engine indices in the small model
  std::uint64_t seed = 0;                                // random ranking
  bool export_trace = false;

  // Throws ConfigError on missing or incompatible models, DirectiveError on
  // out-of-range k / R.
  void validate(std::size_t n_visual) const;
};

struct CostReport {
  double small_prefill_flops = 0;
  double small_decode_flops = 0;
  double consistency_flops = 0;
  double large_prefill_flops = 0;
  double large_decode_flops = 0;
  double ranking_flops = 0;  // extra passes a ranking source needs (oracle_large)
  double total_flops = 0;
  double avg_retention = 1.0;
  bool exited_early = false;

  void sum();
  nlohmann::json to_json() const;
};

enum class AnswerSource { small, large };

struct CascadeOutcome {
  std::vector<TokenId> answer_ids;
  AnswerSource source = AnswerSource::small;
  ExitDecision decision;
  ScoreSet scores;
  CostReport cost;
  std::optional<PruneDirective> directive;  // large-model directive when invoked
  std::optional<nlohmann::json> trace_export;
};

// Everything the small model contributes, independent of k, R and threshold.
struct SmallStage {
  GenerationResult generation;
  AttentionTrace trace{1, 1};
  std::vector<double> importance;
  std::vector<double> forced_probs;
  ScoreSet scores;
  double prefill_flops = 0;
  double decode_flops = 0;
  double consistency_flops = 0;
};

struct LargeStage {
  std::vector<TokenId> answer_ids;
  PruneDirective directive;
  double prefill_flops = 0;
  double decode_flops = 0;
  double ranking_flops = 0;
};

SmallStage run_small(const TokenLayout& layout, const CascadeConfig& cfg);

// Unpruned large-model generation (answers, cost, and its own trace).
struct LargeBaseline {
  std::vector<TokenId> answer_ids;
  std::vector<double> importance;
  double flops = 0;
};
LargeBaseline run_large_unpruned(const Model& large, const TokenLayout& layout,
                                 std::size_t max_new);

// Large model pruned at prune_layer keeping `kept`.
LargeStage run_large_pruned(const Model& large, const TokenLayout& layout,
                            const PruneDirective& directive, std::size_t max_new);

// Large-model stage for the configured ranking source. `baseline` supplies
// the oracle ranking when already computed.
LargeStage run_large(const TokenLayout& layout, const SmallStage& small, const CascadeConfig& cfg,
                     std::uint64_t instance_seed, const LargeBaseline* baseline = nullptr);

CascadeOutcome combine(const SmallStage& small, const std::optional<LargeStage>& large,
                       const CascadeConfig& cfg);

CascadeOutcome run_cascade(const NeedleInstance& instance, const CascadeConfig& cfg);

struct SweepPoint {
  std::size_t prune_layer = 2;
  double retain_fraction = 0.05;
  RankingSource ranking_source = RankingSource::aggregated;
  ExitCriterion criterion = ExitCriterion::combined;
  // Exactly one of the two is set.
  std::optional<double> threshold;
  std::optional<double> target_exit_ratio;

  std::string id() const;
};

struct MetricsRow {
  std::string config_id;
  std::size_t k = 0;
  double R = 1;
  std::optional<double> threshold;  // empty for the baseline row
  std::string criterion;
  double accuracy = 0;
  double exit_ratio = 0;
  double avg_retention = 1;
  double mean_flops = 0;
  double score_ratio = 0;
};

struct InstanceRecord {
  std::string config_id;
  std::size_t instance = 0;
  TokenId answer_id = 0;
  std::vector<TokenId> answer_ids;
  bool correct = false;
  AnswerSource source = AnswerSource::small;
  ExitDecision decision;
  CostReport cost;

  nlohmann::json to_json() const;
};

struct EvalResult {
  std::vector<MetricsRow> rows;  // baseline row first
  std::vector<InstanceRecord> records;
  std::vector<SmallStage> small;  // per instance, dataset order
};

struct EvalOptions {
  std::size_t parallel = 1;
  bool include_baseline = true;
};

// Runs each instance's small stage once and each large stage once per
// (source, k, R); aggregation follows dataset order, so the result does not
// depend on the degree of parallelism.
EvalResult evaluate(const std::vector<NeedleInstance>& dataset, const CascadeConfig& base,
                    const std::vector<SweepPoint>& sweep, const EvalOptions& opts = {});

bool answers_match(const std::vector<TokenId>& answer_ids, TokenId truth);

std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
void write_records_jsonl(const std::vector<InstanceRecord>& records,
                         const std::filesystem::path& path);

// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace cprune
