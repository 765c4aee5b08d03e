#include "cprune/ablation.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>

#include "cprune/cost.hpp"
#include "cprune/error.hpp"

namespace cprune {

namespace {

template <class Fn>
void for_each_instance(std::size_t n, std::size_t threads, Fn&& fn) {
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

struct Accumulator {
  double correct = 0;
  double flops = 0;
};

// Accuracy of the pruned large model for each ranking in rankings[i][v].
std::vector<Accumulator> score_rankings(const std::vector<NeedleInstance>& dataset,
                                        const CascadeConfig& base,
                                        const std::vector<std::vector<std::vector<std::size_t>>>& rankings,
                                        std::size_t variants, std::size_t parallel) {
  const std::size_t n = dataset.size();
  const std::size_t L = base.large->spec().num_layers;
  std::vector<std::vector<LargeStage>> stages(n, std::vector<LargeStage>(variants));
  for_each_instance(n, parallel, [&](std::size_t i) {
    for (std::size_t v = 0; v < variants; ++v) {
      const auto d = make_directive(rankings[i][v], base.retain_fraction, base.prune_layer,
                                    dataset[i].layout.n_visual, RankingSource::aggregated, L);
      stages[i][v] = run_large_pruned(*base.large, dataset[i].layout, d, base.max_new_tokens);
    }
  });
  std::vector<Accumulator> acc(variants);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < variants; ++v) {
      acc[v].correct += answers_match(stages[i][v].answer_ids, dataset[i].answer_id) ? 1 : 0;
      acc[v].flops += stages[i][v].prefill_flops + stages[i][v].decode_flops;
    }
  return acc;
}

std::vector<LargeBaseline> baselines(const std::vector<NeedleInstance>& dataset,
                                     const CascadeConfig& base, std::size_t parallel) {
  std::vector<LargeBaseline> out(dataset.size());
  for_each_instance(dataset.size(), parallel, [&](std::size_t i) {
    out[i] = run_large_unpruned(*base.large, dataset[i].layout, base.max_new_tokens);
  });
  return out;
}

double baseline_accuracy(const std::vector<NeedleInstance>& dataset,
                         const std::vector<LargeBaseline>& b) {
  double c = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    c += answers_match(b[i].answer_ids, dataset[i].answer_id) ? 1 : 0;
  return c / static_cast<double>(dataset.size());
}

void check(const std::vector<NeedleInstance>& dataset, const CascadeConfig& base) {
  if (dataset.empty()) throw ConfigError("ablation needs a nonempty dataset");
  for (const auto& inst : dataset) base.validate(inst.layout.n_visual);
}

AblationRow make_row(std::string label, std::size_t layers, const Accumulator& a, double n,
                     double base_acc, const CascadeConfig& base) {
  AblationRow r;
  r.label = std::move(label);
  r.layers = layers;
  r.accuracy = a.correct / n;
  r.score_ratio = base_acc > 0 ? r.accuracy / base_acc : std::numeric_limits<double>::quiet_NaN();
  r.mean_flops = a.flops / n;
  r.avg_retention =
      avg_retention(base.large->spec().num_layers, base.prune_layer, base.retain_fraction);
  return r;
}

std::string percent_label(double f) {
  return std::to_string(static_cast<int>(std::lround(f * 100))) + "%_layers";
}

}  // namespace

std::vector<AblationRow> ablate_layers(const std::vector<NeedleInstance>& dataset,
                                       const CascadeConfig& base,
                                       const std::vector<double>& fractions,
                                       std::size_t parallel) {
  check(dataset, base);
  const std::size_t n = dataset.size();
  const std::size_t Ls = base.small->spec().num_layers;
  std::vector<std::vector<std::size_t>> filters;
  for (double f : fractions) filters.push_back(first_layers(Ls, f));

  std::vector<std::vector<std::vector<std::size_t>>> rankings(n);
  for_each_instance(n, parallel, [&](std::size_t i) {
    const auto& layout = dataset[i].layout;
    std::vector<AttentionTrace> traces;
    for (const auto& f : filters) traces.emplace_back(layout.n_visual, layout.n_prompt, f);
    SinkList sinks;
    for (auto& t : traces) sinks.add(&t);
    ForwardOptions opts;
    opts.sink = &sinks;
    generate(*base.small, layout, base.max_new_tokens, opts);
    for (const auto& t : traces) rankings[i].push_back(rank_tokens(t.finalize(base.decode_weight)));
  });

  const auto base_runs = baselines(dataset, base, parallel);
  const double base_acc = baseline_accuracy(dataset, base_runs);
  for (std::size_t i = 0; i < n; ++i) rankings[i].push_back(rank_tokens(base_runs[i].importance));

  const auto acc = score_rankings(dataset, base, rankings, fractions.size() + 1, parallel);
  std::vector<AblationRow> rows;
  const double dn = static_cast<double>(n);
  for (std::size_t v = 0; v < fractions.size(); ++v)
    rows.push_back(make_row(percent_label(fractions[v]), filters[v].size(), acc[v], dn, base_acc,
                            base));
  Accumulator oracle = acc.back();
  for (const auto& b : base_runs) oracle.flops += b.flops;
  rows.push_back(make_row("oracle_large", 0, oracle, dn, base_acc, base));
  return rows;
}

std::vector<AblationRow> ablate_tokens(const std::vector<NeedleInstance>& dataset,
                                       const CascadeConfig& base, std::size_t parallel) {
  check(dataset, base);
  const std::size_t n = dataset.size();
  const TokenSubset subsets[] = {TokenSubset::last_prompt_token, TokenSubset::prompt_only,
                                 TokenSubset::generated_only, TokenSubset::prompt_and_generated};
  std::vector<std::vector<std::vector<std::size_t>>> rankings(n);
  for_each_instance(n, parallel, [&](std::size_t i) {
    const auto& layout = dataset[i].layout;
    AttentionTrace trace(layout.n_visual, layout.n_prompt, base.trace_layers);
    ForwardOptions opts;
    opts.sink = &trace;
    generate(*base.small, layout, base.max_new_tokens, opts);
    for (TokenSubset s : subsets) rankings[i].push_back(rank_tokens(trace.subset_importance(s)));
  });
  const auto base_runs = baselines(dataset, base, parallel);
  const double base_acc = baseline_accuracy(dataset, base_runs);
  const auto acc = score_rankings(dataset, base, rankings, std::size(subsets), parallel);
  const std::size_t layers = base.trace_layers ? base.trace_layers->size()
                                               : base.small->spec().num_layers;
  std::vector<AblationRow> rows;
  for (std::size_t v = 0; v < std::size(subsets); ++v)
    rows.push_back(make_row(std::string(to_string(subsets[v])), layers, acc[v],
                            static_cast<double>(n), base_acc, base));
  return rows;
}

double trapezoid_area(std::vector<std::pair<double, double>> points) {
  std::stable_sort(points.begin(), points.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  double area = 0;
  for (std::size_t i = 1; i < points.size(); ++i)
    area += (points[i].first - points[i - 1].first) * (points[i].second + points[i - 1].second) / 2;
  return area;
}

CriteriaAblation ablate_criteria(const std::vector<NeedleInstance>& dataset,
                                 const CascadeConfig& base, const std::vector<double>& exit_ratios,
                                 std::size_t parallel) {
  check(dataset, base);
  if (exit_ratios.empty()) throw ConfigError("criteria ablation needs exit ratios");
  std::vector<SweepPoint> sweep;
  for (ExitCriterion c : kAllCriteria)
    for (double e : exit_ratios) {
      SweepPoint p;
      p.prune_layer = base.prune_layer;
      p.retain_fraction = base.retain_fraction;
      p.ranking_source = base.ranking_source;
      p.criterion = c;
      p.target_exit_ratio = e;
      sweep.push_back(p);
    }
  EvalOptions eo;
  eo.parallel = parallel;
  eo.include_baseline = false;
  const EvalResult res = evaluate(dataset, base, sweep, eo);

  CriteriaAblation out;
  double small_correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    small_correct +=
        answers_match(res.small[i].generation.generated_ids, dataset[i].answer_id) ? 1 : 0;
  out.small_only_accuracy = small_correct / static_cast<double>(dataset.size());

  std::size_t row = 0;
  for (ExitCriterion c : kAllCriteria) {
    std::vector<std::pair<double, double>> pts;
    for (double e : exit_ratios) {
      const MetricsRow& m = res.rows[row++];
      out.curves.push_back(
          CriterionPoint{c, e, m.exit_ratio, m.threshold.value_or(0), m.accuracy, m.mean_flops});
      pts.emplace_back(m.exit_ratio, m.accuracy - out.small_only_accuracy);
    }
    out.areas.push_back(CriterionArea{c, trapezoid_area(pts)});
  }
  return out;
}

std::string ablation_rows_csv(const std::vector<AblationRow>& rows) {
  std::string s = "label,layers,accuracy,score_ratio,mean_flops,avg_retention\n";
  for (const auto& r : rows)
    s += r.label + "," + std::to_string(r.layers) + "," + format_double(r.accuracy) + "," +
         format_double(r.score_ratio) + "," + format_double(r.mean_flops) + "," +
         format_double(r.avg_retention) + "\n";
  return s;
}

std::string criteria_curves_csv(const CriteriaAblation& a) {
  std::string s = "criterion,target_exit_ratio,exit_ratio,threshold,accuracy,mean_flops\n";
  for (const auto& p : a.curves)
    s += std::string(to_string(p.criterion)) + "," + format_double(p.target_exit_ratio) + "," +
         format_double(p.exit_ratio) + "," + format_double(p.threshold) + "," +
         format_double(p.accuracy) + "," + format_double(p.mean_flops) + "\n";
  return s;
}

std::string criteria_areas_csv(const CriteriaAblation& a) {
  std::string s = "criterion,area,small_only_accuracy\n";
  for (const auto& r : a.areas)
    s += std::string(to_string(r.criterion)) + "," + format_double(r.area) + "," +
         format_double(a.small_only_accuracy) + "\n";
  return s;
}

}  // namespace cprune
