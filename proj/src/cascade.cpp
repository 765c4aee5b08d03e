#include "cprune/cascade.hpp"

#include <omp.h>

#include <charconv>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <tuple>

#include "cprune/cost.hpp"
#include "cprune/error.hpp"

namespace cprune {

void CascadeConfig::validate(std::size_t n_visual) const {
  if (!small || !large) throw ConfigError("cascade needs both a small and a large model");
  if (small->spec().vocab_size != large->spec().vocab_size)
    throw ConfigError("small and large models have different vocabularies");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (n_visual < 1) throw ConfigError("instance has no visual tokens");
  const std::size_t L = large->spec().num_layers;
  if (prune_layer < 1 || prune_layer > L)
    throw DirectiveError("prune layer " + std::to_string(prune_layer) + " outside [1, " +
                         std::to_string(L) + "]");
  if (!(retain_fraction > 0 && retain_fraction <= 1))
    throw DirectiveError("retain fraction must be in (0, 1]");
  if (consistency.prune_layer < 1 || consistency.prune_layer > small->spec().num_layers)
    throw DirectiveError("consistency prune layer outside the small model");
  if (!(consistency.retain_fraction > 0 && consistency.retain_fraction <= 1))
    throw DirectiveError("consistency retain fraction must be in (0, 1]");
  if (ranking_source == RankingSource::fastv_single_layer &&
      (fastv_layer < 1 || (prune_layer < L && fastv_layer > prune_layer)))
    throw ConfigError("fastv layer " + std::to_string(fastv_layer) +
                      " must lie in [1, k] so its attention is seen before the cut");
}

void CostReport::sum() {
  total_flops = small_prefill_flops + small_decode_flops + consistency_flops +
                large_prefill_flops + large_decode_flops + ranking_flops;
}

nlohmann::json CostReport::to_json() const {
  return {{"small_prefill_flops", small_prefill_flops},
          {"small_decode_flops", small_decode_flops},
          {"consistency_flops", consistency_flops},
          {"large_prefill_flops", large_prefill_flops},
          {"large_decode_flops", large_decode_flops},
          {"ranking_flops", ranking_flops},
          {"total_flops", total_flops},
          {"avg_retention", avg_retention},
          {"exited_early", exited_early}};
}

SmallStage run_small(const TokenLayout& layout, const CascadeConfig& cfg) {
  const Model& small = *cfg.small;
  const ModelSpec& spec = small.spec();
  SmallStage st;
  st.trace = AttentionTrace(layout.n_visual, layout.n_prompt, cfg.trace_layers);

  HiddenCheckpoint ck;
  ck.layer = cfg.consistency.prune_layer;
  ForwardOptions opts;
  opts.sink = &st.trace;
  opts.checkpoint = &ck;
  st.generation = generate(small, layout, cfg.max_new_tokens, opts);

  st.importance = cfg.token_subset == TokenSubset::prompt_and_generated
                      ? st.trace.finalize(cfg.decode_weight)
                      : st.trace.subset_importance(cfg.token_subset);

  const PruneDirective cd =
      make_directive(rank_tokens(st.importance), cfg.consistency.retain_fraction,
                     cfg.consistency.prune_layer, layout.n_visual, RankingSource::aggregated,
                     spec.num_layers);
  const TeacherForcedResult forced = teacher_forced_resume(
      small, ck, layout.n_visual, layout.n_prompt, st.generation.generated_ids, cd.kept);
  st.forced_probs = forced.probs;
  st.scores = compute_scores(st.generation.step_probs, st.generation.step_distributions,
                             st.forced_probs, cfg.consistency.length_normalized);
  st.prefill_flops = flops_pass(spec, st.generation.prefill_shape);
  st.decode_flops = flops_decode(spec, st.generation.decode_shapes);
  st.consistency_flops = flops_pass(spec, forced.shape);
  return st;
}

LargeBaseline run_large_unpruned(const Model& large, const TokenLayout& layout,
                                 std::size_t max_new) {
  AttentionTrace trace(layout.n_visual, layout.n_prompt);
  ForwardOptions opts;
  opts.sink = &trace;
  const GenerationResult g = generate(large, layout, max_new, opts);
  LargeBaseline b;
  b.answer_ids = g.generated_ids;
  b.importance = trace.finalize();
  b.flops = flops_pass(large.spec(), g.prefill_shape) + flops_decode(large.spec(), g.decode_shapes);
  return b;
}

LargeStage run_large_pruned(const Model& large, const TokenLayout& layout,
                            const PruneDirective& directive, std::size_t max_new) {
  const auto plan = to_plan(directive, large.spec().num_layers);
  ForwardOptions opts;
  if (plan) opts.prune = &*plan;
  const GenerationResult g = generate(large, layout, max_new, opts);
  LargeStage st;
  st.answer_ids = g.generated_ids;
  st.directive = directive;
  st.prefill_flops = flops_pass(large.spec(), g.prefill_shape);
  st.decode_flops = flops_decode(large.spec(), g.decode_shapes);
  return st;
}

namespace {

LargeStage run_large_fastv(const TokenLayout& layout, const CascadeConfig& cfg) {
  const Model& large = *cfg.large;
  const std::size_t L = large.spec().num_layers;
  AttentionTrace single(layout.n_visual, layout.n_prompt,
                        std::vector<std::size_t>{cfg.fastv_layer - 1});
  auto resolve = [&] {
    return make_directive(fastv_rank(single), cfg.retain_fraction, cfg.prune_layer,
                          layout.n_visual, RankingSource::fastv_single_layer, L);
  };
  std::optional<PruneDirective> directive;
  PrunePlan plan{cfg.prune_layer, [&] {
                   directive = resolve();
                   return directive->kept;
                 }};
  ForwardOptions opts;
  opts.sink = &single;
  if (cfg.prune_layer < L) opts.prune = &plan;
  const GenerationResult g = generate(large, layout, cfg.max_new_tokens, opts);
  if (!directive) directive = resolve();

  LargeStage st;
  st.answer_ids = g.generated_ids;
  st.directive = std::move(*directive);
  st.prefill_flops = flops_pass(large.spec(), g.prefill_shape);
  st.decode_flops = flops_decode(large.spec(), g.decode_shapes);
  return st;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

LargeStage run_large(const TokenLayout& layout, const SmallStage& small, const CascadeConfig& cfg,
                     std::uint64_t instance_seed, const LargeBaseline* baseline) {
  const std::size_t L = cfg.large->spec().num_layers;
  const std::size_t n = layout.n_visual;
  switch (cfg.ranking_source) {
    case RankingSource::fastv_single_layer:
      return run_large_fastv(layout, cfg);
    case RankingSource::aggregated:
      return run_large_pruned(*cfg.large, layout,
                              make_directive(rank_tokens(small.importance), cfg.retain_fraction,
                                             cfg.prune_layer, n, cfg.ranking_source, L),
                              cfg.max_new_tokens);
    case RankingSource::random:
      return run_large_pruned(*cfg.large, layout,
                              make_directive(random_rank(n, instance_seed), cfg.retain_fraction,
                                             cfg.prune_layer, n, cfg.ranking_source, L),
                              cfg.max_new_tokens);
    case RankingSource::oracle_large: {
      std::optional<LargeBaseline> own;
      if (!baseline) own = run_large_unpruned(*cfg.large, layout, cfg.max_new_tokens);
      const LargeBaseline& b = baseline ? *baseline : *own;
      LargeStage st = run_large_pruned(
          *cfg.large, layout,
          make_directive(rank_tokens(b.importance), cfg.retain_fraction, cfg.prune_layer, n,
                         cfg.ranking_source, L),
          cfg.max_new_tokens);
      st.ranking_flops = b.flops;
      return st;
    }
  }
  throw ConfigError("unknown ranking source");
}

CascadeOutcome combine(const SmallStage& small, const std::optional<LargeStage>& large,
                       const CascadeConfig& cfg) {
  CascadeOutcome out;
  out.scores = small.scores;
  out.decision = decide(small.scores, cfg.exit_criterion, cfg.threshold);
  out.cost.small_prefill_flops = small.prefill_flops;
  out.cost.small_decode_flops = small.decode_flops;
  out.cost.consistency_flops = small.consistency_flops;
  out.cost.avg_retention = avg_retention(cfg.large->spec().num_layers, cfg.prune_layer,
                                         cfg.retain_fraction);
  out.cost.exited_early = out.decision.exit;
  if (out.decision.exit) {
    out.source = AnswerSource::small;
    out.answer_ids = small.generation.generated_ids;
  } else {
    if (!large) throw std::logic_error("large stage required for a non-exiting instance");
    out.source = AnswerSource::large;
    out.answer_ids = large->answer_ids;
    out.cost.large_prefill_flops = large->prefill_flops;
    out.cost.large_decode_flops = large->decode_flops;
    out.cost.ranking_flops = large->ranking_flops;
    out.directive = large->directive;
  }
  out.cost.sum();
  if (cfg.export_trace) {
    nlohmann::json j;
    j["trace"] = small.trace.to_json();
    j["importance"] = small.importance;
    if (out.directive) j["directive"] = out.directive->to_json();
    out.trace_export = std::move(j);
  }
  return out;
}

CascadeOutcome run_cascade(const NeedleInstance& instance, const CascadeConfig& cfg) {
  cfg.validate(instance.layout.n_visual);
  const SmallStage small = run_small(instance.layout, cfg);
  std::optional<LargeStage> large;
  if (!decide(small.scores, cfg.exit_criterion, cfg.threshold).exit)
    large = run_large(instance.layout, small, cfg, mix_seed(cfg.seed, instance.index));
  return combine(small, large, cfg);
}

bool answers_match(const std::vector<TokenId>& answer_ids, TokenId truth) {
  return !answer_ids.empty() && answer_ids.front() == truth;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string SweepPoint::id() const {
  std::string s = std::string(to_string(ranking_source)) + "_k" + std::to_string(prune_layer) +
                  "_R" + format_double(retain_fraction) + "_" + std::string(to_string(criterion));
  if (target_exit_ratio) s += "_e" + format_double(*target_exit_ratio);
  if (threshold) s += "_t" + format_double(*threshold);
  return s;
}

nlohmann::json InstanceRecord::to_json() const {
  return {{"config_id", config_id},
          {"instance", instance},
          {"answer_id", answer_id},
          {"answer_ids", answer_ids},
          {"correct", correct},
          {"source", source == AnswerSource::small ? "small" : "large"},
          {"decision", decision.to_json()},
          {"cost", cost.to_json()}};
}

namespace {

// Runs fn(i) for i in [0, n) on `threads` threads; rethrows the first failure
// in index order.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const int t = static_cast<int>(std::max<std::size_t>(1, threads));
#pragma omp parallel for schedule(dynamic) num_threads(t)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

EvalResult evaluate(const std::vector<NeedleInstance>& dataset, const CascadeConfig& base,
                    const std::vector<SweepPoint>& sweep, const EvalOptions& opts) {
  if (dataset.empty()) throw ConfigError("evaluation needs a nonempty dataset");
  for (const auto& inst : dataset) base.validate(inst.layout.n_visual);
  for (const auto& p : sweep) {
    if (p.threshold.has_value() == p.target_exit_ratio.has_value())
      throw ConfigError("sweep point needs exactly one of threshold / target exit ratio");
    CascadeConfig c = base;
    c.prune_layer = p.prune_layer;
    c.retain_fraction = p.retain_fraction;
    c.ranking_source = p.ranking_source;
    c.validate(dataset.front().layout.n_visual);
  }
  const std::size_t n = dataset.size();
  EvalResult out;
  out.small.resize(n);
  parallel_for(n, opts.parallel, [&](std::size_t i) {
    out.small[i] = run_small(dataset[i].layout, base);
  });

  std::vector<LargeBaseline> baseline(n);
  parallel_for(n, opts.parallel, [&](std::size_t i) {
    baseline[i] = run_large_unpruned(*base.large, dataset[i].layout, base.max_new_tokens);
  });
  double base_correct = 0, base_flops = 0;
  for (std::size_t i = 0; i < n; ++i) {
    base_correct += answers_match(baseline[i].answer_ids, dataset[i].answer_id) ? 1 : 0;
    base_flops += baseline[i].flops;
  }
  const double base_acc = base_correct / static_cast<double>(n);
  auto score_ratio = [&](double acc) {
    return base_acc > 0 ? acc / base_acc : std::numeric_limits<double>::quiet_NaN();
  };
  if (opts.include_baseline) {
    MetricsRow row;
    row.config_id = "large_unpruned";
    row.k = base.large->spec().num_layers;
    row.R = 1.0;
    row.criterion = "none";
    row.accuracy = base_acc;
    row.exit_ratio = 0;
    row.avg_retention = 1.0;
    row.mean_flops = base_flops / static_cast<double>(n);
    row.score_ratio = 1.0;
    out.rows.push_back(row);
  }

  using Key = std::tuple<RankingSource, std::size_t, double>;
  std::map<Key, std::vector<LargeStage>> large_cache;
  for (const auto& p : sweep) {
    const Key key{p.ranking_source, p.prune_layer, p.retain_fraction};
    if (large_cache.count(key)) continue;
    CascadeConfig c = base;
    c.prune_layer = p.prune_layer;
    c.retain_fraction = p.retain_fraction;
    c.ranking_source = p.ranking_source;
    auto& stages = large_cache[key];
    stages.resize(n);
    parallel_for(n, opts.parallel, [&](std::size_t i) {
      stages[i] = run_large(dataset[i].layout, out.small[i], c,
                            mix_seed(base.seed, dataset[i].index), &baseline[i]);
    });
  }

  for (const auto& p : sweep) {
    CascadeConfig c = base;
    c.prune_layer = p.prune_layer;
    c.retain_fraction = p.retain_fraction;
    c.ranking_source = p.ranking_source;
    c.exit_criterion = p.criterion;
    if (p.threshold) {
      c.threshold = *p.threshold;
    } else {
      std::vector<double> scores(n);
      for (std::size_t i = 0; i < n; ++i) scores[i] = out.small[i].scores.get(p.criterion);
      c.threshold = calibrate_threshold(scores, *p.target_exit_ratio);
    }
    const auto& stages = large_cache.at(Key{p.ranking_source, p.prune_layer, p.retain_fraction});
    const std::string id = p.id();
    double correct = 0, exited = 0, flops = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const CascadeOutcome o = combine(out.small[i], stages[i], c);
      InstanceRecord r;
      r.config_id = id;
      r.instance = dataset[i].index;
      r.answer_id = dataset[i].answer_id;
      r.answer_ids = o.answer_ids;
      r.correct = answers_match(o.answer_ids, dataset[i].answer_id);
      r.source = o.source;
      r.decision = o.decision;
      r.cost = o.cost;
      correct += r.correct ? 1 : 0;
      exited += o.decision.exit ? 1 : 0;
      flops += o.cost.total_flops;
      out.records.push_back(std::move(r));
    }
    MetricsRow row;
    row.config_id = id;
    row.k = p.prune_layer;
    row.R = p.retain_fraction;
    row.threshold = c.threshold;
    row.criterion = std::string(to_string(p.criterion));
    row.accuracy = correct / static_cast<double>(n);
    row.exit_ratio = exited / static_cast<double>(n);
    row.avg_retention = avg_retention(base.large->spec().num_layers, p.prune_layer,
                                      p.retain_fraction);
    row.mean_flops = flops / static_cast<double>(n);
    row.score_ratio = score_ratio(row.accuracy);
    out.rows.push_back(row);
  }
  return out;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s =
      "config_id,k,R,threshold,criterion,accuracy,exit_ratio,avg_retention,mean_flops,"
      "score_ratio\n";
  for (const auto& r : rows) {
    s += r.config_id + "," + std::to_string(r.k) + "," + format_double(r.R) + "," +
         (r.threshold ? format_double(*r.threshold) : std::string()) + "," + r.criterion + "," +
         format_double(r.accuracy) + "," + format_double(r.exit_ratio) + "," +
         format_double(r.avg_retention) + "," + format_double(r.mean_flops) + "," +
         format_double(r.score_ratio) + "\n";
  }
  return s;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << metrics_csv(rows);
  if (!f) throw IoError("failed writing " + path.string());
}

void write_records_jsonl(const std::vector<InstanceRecord>& records,
                         const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& r : records) f << r.to_json().dump() << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace cprune
