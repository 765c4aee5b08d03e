// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "cprune/aggregate.hpp"
#include "cprune/cascade.hpp"
#include "cprune/commands.hpp"
#include "cprune/cost.hpp"
#include "cprune/engine.hpp"
#include "cprune/exit_gate.hpp"
#include "cprune/pruner.hpp"
#include "planted.hpp"
#include "reference.hpp"

using namespace cprune;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;
  std::function<Verdict()> body;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

TokenLayout random_layout(std::size_t nv, std::size_t np, std::size_t vocab, std::mt19937_64& rng) {
  TokenLayout l{nv, np, {}};
  for (std::size_t i = 0; i < l.size(); ++i) l.token_ids.push_back(1 + rng() % (vocab - 1));
  return l;
}

Verdict retention_arithmetic() {
  struct Case {
    std::size_t k;
    double R, want;
  } cases[] = {{19, 0.40, 0.6375}, {9, 0.20, 0.3500}, {2, 0.05, 0.0896}};
  Verdict v{true, ""};
  for (const auto& c : cases) {
    const double got = avg_retention(48, c.k, c.R);
    // reported to four decimals
    const bool ok = std::round(got * 1e4) == std::round(c.want * 1e4);
    v.pass = v.pass && ok;
    v.detail += fmt("%.6f ", got);
  }
  return v;
}

Verdict aggregation_oracle() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  const int models = 60;
  for (int m = 0; m < models; ++m) {
    const std::size_t L = 1 + rng() % 4, H = 1 + rng() % 4;
    const std::size_t n_total = 2 + rng() % 63, nv = 1 + rng() % (n_total - 1), np = n_total - nv;
    const std::size_t ng = 1 + rng() % 8;
    const Model model = build_model(reference::toy_spec(L, H, 4, 24, 80), m);
    const TokenLayout l = random_layout(nv, np, 24, rng);
    AttentionTrace trace(nv, np);
    ForwardOptions o;
    o.sink = &trace;
    const GenerationResult g = generate(model, l, ng, o);
    std::vector<TokenId> ids = l.token_ids;
    ids.insert(ids.end(), g.generated_ids.begin(), g.generated_ids.end());
    std::vector<std::size_t> layers(L);
    for (std::size_t j = 0; j < L; ++j) layers[j] = j;
    const auto want =
        reference::brute_force_importance(reference::forward(model, ids, nv), nv, np, layers);
    const auto got = trace.finalize();
    for (std::size_t i = 0; i < nv; ++i)
      worst = std::max(worst, std::abs(got[i] - (want.prefill[i] + want.decode[i])));
  }
  return {worst <= 1e-9, std::to_string(models) + " models, max |diff| " + fmt("%.3g", worst)};
}

Verdict teacher_forcing() {
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int s = 0; s < 100; ++s) {
    const std::size_t L = 1 + rng() % 4, H = 1 + rng() % 4;
    const Model model = build_model(reference::toy_spec(L, H, 4, 24, 96), 1000 + s);
    const TokenLayout l = random_layout(1 + rng() % 40, 1 + rng() % 10, 24, rng);
    const GenerationResult g = generate(model, l, 1 + rng() % 8);
    const auto tf = teacher_forced_probs(model, l, g.generated_ids);
    if (tf.probs.size() != g.step_probs.size()) return {false, "length mismatch"};
    for (std::size_t i = 0; i < tf.probs.size(); ++i)
      worst = std::max(worst, std::abs(tf.probs[i] - g.step_probs[i]));
  }
  return {worst <= 1e-6, "100 generations, max |diff| " + fmt("%.3g", worst)};
}

SweepPoint never_exit(RankingSource src) {
  SweepPoint p;
  p.prune_layer = 2;
  p.retain_fraction = 0.05;
  p.ranking_source = src;
  p.threshold = 1.0 + 1e-9;
  return p;
}

Verdict aggregated_vs_fastv() {
  const auto& s = planted::suite();
  const auto opts = s.config.dataset_options();
  const auto data = gen_needle_dataset(s.recipe, opts);
  const auto base = s.config.cascade_base(s.pair.small, s.pair.large);
  const auto r = evaluate(data, base,
                          {never_exit(RankingSource::aggregated),
                           never_exit(RankingSource::fastv_single_layer)},
                          {1, false});
  const double agg = r.rows[0].accuracy, fastv = r.rows[1].accuracy;
  return {data.size() == 200 && agg >= 0.95 && fastv <= 0.50 &&
              std::abs(r.rows[0].avg_retention - 0.0896) < 5e-4,
          std::to_string(data.size()) + " instances, retention " + fmt("%.4f", r.rows[0].avg_retention) +
              ", aggregated " + fmt("%.3f", agg) + ", fastv " + fmt("%.3f", fastv)};
}

Verdict corrupted_small_models() {
  const auto& s = planted::suite(AnswerFidelity::corrupted);
  auto opts = s.config.dataset_options();
  opts.n_instances = 100;
  const auto data = gen_needle_dataset(s.recipe, opts);
  auto base = s.config.cascade_base(s.pair.small, s.pair.large);
  const auto r = evaluate(data, base, {never_exit(RankingSource::aggregated)}, {1, true});

  double overlap = 0;
  std::size_t small_wrong = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t m = data[i].planted_cells.size();
    const auto small_rank = rank_tokens(r.small[i].importance);
    const auto large = run_large_unpruned(s.pair.large, data[i].layout, base.max_new_tokens);
    const auto large_rank = rank_tokens(large.importance);
    const std::set<std::size_t> a(small_rank.begin(), small_rank.begin() + m),
        b(large_rank.begin(), large_rank.begin() + m);
    std::size_t common = 0;
    for (auto x : a) common += b.count(x);
    overlap += double(common) / m;
    small_wrong += !answers_match(r.small[i].generation.generated_ids, data[i].answer_id);
  }
  overlap /= data.size();
  const double acc = r.rows[1].accuracy;
  return {overlap >= 0.90 && acc >= 0.95,
          "small wrong " + std::to_string(small_wrong) + "/100, overlap " + fmt("%.3f", overlap) +
              ", cascade accuracy " + fmt("%.3f", acc) + " at retention " +
              fmt("%.4f", r.rows[1].avg_retention)};
}

Verdict calibration() {
  std::mt19937_64 rng(500);
  std::uniform_real_distribution<double> u;
  std::vector<double> pool(500);
  for (double& x : pool) x = u(rng);
  auto ratio = [&](double t) {
    return double(std::count_if(pool.begin(), pool.end(), [&](double v) { return v >= t; })) /
           pool.size();
  };
  double worst = 0;
  for (double target : {0.2, 0.4, 0.6})
    worst = std::max(worst, std::abs(ratio(calibrate_threshold(pool, target)) - target));
  bool monotone = true;
  double prev = 2;
  for (int i = 0; i < 100; ++i) {
    const double r = ratio(i / 99.0);
    monotone = monotone && r <= prev;
    prev = r;
  }
  return {worst <= 1.0 / 500 + 1e-12 && monotone,
          "max |realized - target| " + fmt("%.4f", worst) + (monotone ? ", monotone" : ", NOT monotone")};
}

Verdict consistency_cost() {
  const ModelSpec small = planted::suite().pair.small.spec();
  const std::size_t kept = kept_count(0.05, 1000);
  const double gen = flops_generation(small, 1000, 20, 8);
  const double cons = flops_consistency(small, kept, 20, 8, 2);
  return {cons < 0.10 * gen, "consistency / generation = " + fmt("%.5f", cons / gen)};
}

struct NormCheck : AttentionSink {
  double worst = 0;
  void on_prefill(const AttentionMap& m) override {
    for (std::size_t r = 0; r < m.n; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < m.n; ++c) s += m.at(r, c);
      worst = std::max(worst, std::abs(s - 1));
    }
  }
  void on_decode(const AttentionRow& r) override {
    double s = 0;
    for (double p : r.probs) s += p;
    worst = std::max(worst, std::abs(s - 1));
  }
};

Verdict invariants() {
  const auto& s = planted::suite();
  const auto data = planted::dataset(s, 30, 99, 0.3);
  bool identity = true;
  NormCheck norm;
  std::vector<std::size_t> all(64);
  for (std::size_t i = 0; i < 64; ++i) all[i] = i;
  for (const auto& inst : data)
    for (const Model* m : {&s.pair.small, &s.pair.large}) {
      ForwardOptions plain;
      plain.sink = &norm;
      const auto a = generate(*m, inst.layout, 3, plain);
      const auto d = make_directive(all, 1.0, 2, 64, RankingSource::aggregated);
      const auto plan = to_plan(d, m->spec().num_layers);
      ForwardOptions pruned;
      pruned.prune = &*plan;
      const auto b = generate(*m, inst.layout, 3, pruned);
      identity = identity && a.generated_ids == b.generated_ids &&
                 a.step_distributions == b.step_distributions;
    }

  auto cfg = s.config.cascade_base(s.pair.small, s.pair.large);
  bool degenerate = true;
  for (const auto& inst : data) {
    cfg.threshold = 0.0;
    const auto lo = run_cascade(inst, cfg);
    cfg.threshold = 1.0 + 1e-9;
    const auto hi = run_cascade(inst, cfg);
    degenerate = degenerate && lo.source == AnswerSource::small &&
                 lo.cost.large_prefill_flops + lo.cost.large_decode_flops == 0 &&
                 hi.source == AnswerSource::large && !hi.decision.exit;
  }
  return {identity && degenerate && norm.worst <= 1e-6,
          std::string("R=1 ") + (identity ? "bitwise" : "DIFFERS") + ", thresholds " +
              (degenerate ? "pure" : "MIXED") + ", max row |sum-1| " + fmt("%.2g", norm.worst)};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "cprune_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg_path = dir / "config.json";
  std::ofstream(cfg_path) << nlohmann::json{
      {"dataset", {{"n_instances", 40}}},
      {"sweep",
       {{"ranking_sources", {"aggregated", "fastv_single_layer", "random", "oracle_large"}},
        {"criteria", {"combined", "confidence"}},
        {"thresholds", {0.5}},
        {"exit_ratios", {0.2, 0.4}}}}}
                                 .dump();
  CommandOptions o;
  o.config = cfg_path;
  o.out = dir / "out";
  cmd_build(o);
  o.parallel = 1;
  cmd_run(o);
  const std::string a = slurp(o.out / "results.csv");
  cmd_run(o);
  const std::string b = slurp(o.out / "results.csv");
  o.parallel = 8;
  cmd_run(o);
  const std::string c = slurp(o.out / "results.csv");
  const auto rows = std::count(a.begin(), a.end(), '\n') - 1;
  fs::remove_all(dir);
  return {!a.empty() && a == b && a == c,
          std::to_string(rows) + " rows; rerun " + (a == b ? "identical" : "DIFFERS") +
              "; parallel 1 vs 8 " + (a == c ? "identical" : "DIFFERS")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "retention-ratio arithmetic", 0.001, retention_arithmetic},
      {2, "aggregation oracle equivalence", 10, aggregation_oracle},
      {3, "teacher-forcing soundness", 10, teacher_forcing},
      {4, "aggregated vs single-layer ranking at 9% retention", 60, aggregated_vs_fastv},
      {5, "corrupted small models: ranking overlap and fallback accuracy", 60, corrupted_small_models},
      {6, "exit-gate calibration", 5, calibration},
      {7, "consistency-pass cost", 0.001, consistency_cost},
      {8, "identity and degenerate invariants", 30, invariants},
      {9, "determinism of cmd_run", 0, determinism},
  };
  // Build the planted pairs up front so their one-time cost is not charged to one criterion.
  const auto t0 = std::chrono::steady_clock::now();
  planted::suite(AnswerFidelity::faithful);
  planted::suite(AnswerFidelity::corrupted);
  std::printf("setup: planted model pairs built in %.2f s\n",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  int failures = 0;
  for (const auto& c : criteria) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = c.body();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.limit_seconds <= 0 || secs < c.limit_seconds;
    const bool pass = v.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d: %s | %s | %.4f s%s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                v.detail.c_str(), secs,
                in_time ? "" : (" (limit " + fmt("%g", c.limit_seconds) + " s)").c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
