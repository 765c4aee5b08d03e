#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "cprune/aggregate.hpp"
#include "cprune/error.hpp"
#include "cprune/pruner.hpp"
#include "cprune/synth.hpp"
#include "planted.hpp"

using namespace cprune;

namespace {

// Decodes a visual token without PlantedVocab: returns (symbol, is_strong).
struct Decoded {
  std::size_t symbol;
  bool strong;
};
Decoded decode_visual(TokenId id, std::size_t S, std::size_t levels) {
  EXPECT_GE(id, 1u);
  const std::size_t off = id - 1;
  EXPECT_LT(off, S * (1 + levels));
  return {off % S, off < S};
}

std::size_t decode_query(TokenId id, std::size_t S, std::size_t levels, std::size_t cells) {
  const std::size_t base = 1 + S * (1 + levels);
  EXPECT_GE(id, base);
  EXPECT_LT(id, base + cells);
  return id - base;
}

}  // namespace

TEST(PlantedScale, ClosedFormGivesTargetMass) {
  const GridShape g{8, 8};
  for (double p : {0.6, 0.8, 0.95}) {
    const double b = planted_logit_scale(g, 4, p);
    // Query row: target e^{2b}, 14 row/column mates e^{b}, the rest e^0.
    const double X = 14, Y = 64 - 14 - 1 + 4;
    const double mass = std::exp(2 * b) / (std::exp(2 * b) + X * std::exp(b) + Y);
    EXPECT_NEAR(mass, p, 1e-9);
  }
  EXPECT_THROW(planted_logit_scale(g, 4, 0.5), ConstructionError);
  EXPECT_THROW(planted_logit_scale(g, 4, 1.0), ConstructionError);
}

TEST(PlantedPairTest, ConcentrationSelfCheck) {
  const auto& s = planted::suite();
  for (const auto& inst : planted::dataset(s, 10, 3, 0.3)) {
    EXPECT_GE(measured_concentration(s.pair.small, inst, s.recipe.small_relevance_layers),
              s.recipe.small_p() - 0.02);
    EXPECT_GE(measured_concentration(s.pair.large, inst, s.recipe.large_relevance_layers),
              s.recipe.concentration - 0.02);
  }
}

TEST(PlantedPairTest, FaithfulModelsAnswerCorrectly) {
  const auto& s = planted::suite();
  for (const auto& inst : planted::dataset(s, 100, 5, 0.0)) {
    EXPECT_EQ(generate(s.pair.small, inst.layout, 1).generated_ids[0], inst.answer_id);
    EXPECT_EQ(generate(s.pair.large, inst.layout, 1).generated_ids[0], inst.answer_id);
  }
}

TEST(PlantedPairTest, LargeModelSolvesHardInstances) {
  const auto& s = planted::suite();
  for (const auto& inst : planted::dataset(s, 40, 6, 1.0))
    EXPECT_EQ(generate(s.pair.large, inst.layout, 1).generated_ids[0], inst.answer_id);
}

TEST(PlantedPairTest, CorruptedSmallModelIsWrongButAttendsCorrectly) {
  const auto& s = planted::suite(AnswerFidelity::corrupted);
  for (const auto& inst : planted::dataset(s, 50, 7, 0.0)) {
    AttentionTrace trace(inst.layout.n_visual, inst.layout.n_prompt);
    ForwardOptions o;
    o.sink = &trace;
    const auto g = generate(s.pair.small, inst.layout, 1, o);
    EXPECT_NE(g.generated_ids[0], inst.answer_id);
    const auto rank = rank_tokens(trace.finalize());
    const std::set<std::size_t> top(rank.begin(), rank.begin() + inst.planted_cells.size());
    for (auto c : inst.planted_cells) EXPECT_TRUE(top.count(c));
  }
}

TEST(PlantedPairTest, PruningToPlantedTokenKeepsAnswer) {
  const auto& s = planted::suite();
  for (const auto& inst : planted::dataset(s, 20, 8, 0.0)) {
    const auto full = generate(s.pair.large, inst.layout, 1);
    const PrunePlan plan = PrunePlan::fixed(1, inst.planted_cells);
    ForwardOptions o;
    o.prune = &plan;
    EXPECT_EQ(generate(s.pair.large, inst.layout, 1, o).generated_ids, full.generated_ids);
  }
}

TEST(Dataset, DeterministicForSeed) {
  const auto& s = planted::suite();
  const auto a = planted::dataset(s, 30, 9, 0.3), b = planted::dataset(s, 30, 9, 0.3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].to_json(), b[i].to_json());
  const auto c = planted::dataset(s, 30, 10, 0.3);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].to_json() == c[i].to_json();
  EXPECT_LT(same, a.size());
}

TEST(Dataset, IndependentDecoderRoundTrip) {
  const auto& s = planted::suite();
  const std::size_t S = s.recipe.num_symbols, levels = s.recipe.faint_levels.size();
  std::size_t hard = 0;
  for (const auto& inst : planted::dataset(s, 200, 11, 0.3)) {
    const auto& ids = inst.layout.token_ids;
    ASSERT_EQ(inst.layout.n_visual, 64u);
    ASSERT_EQ(ids.size(), 64u + s.recipe.prompt_len);
    const std::size_t q = decode_query(ids.back(), S, levels, 64);
    EXPECT_EQ(q, inst.query_cell);
    const Decoded target = decode_visual(ids[q], S, levels);
    EXPECT_EQ(inst.answer_id, 1 + target.symbol);
    EXPECT_EQ(target.strong, !inst.hard);
    hard += inst.hard;
    for (std::size_t c = 0; c < 64; ++c)
      if (c != q) {
        const Decoded d = decode_visual(ids[c], S, levels);
        EXPECT_TRUE(d.strong);
        EXPECT_NE(d.symbol, target.symbol);  // the answer symbol is unique
      }
  }
  EXPECT_GT(hard, 30u);
  EXPECT_LT(hard, 90u);
}

TEST(Dataset, OneByOneGrid) {
  PlantedRecipe r;
  r.grid = {1, 1};
  r.num_symbols = 2;
  DatasetOptions o;
  o.n_instances = 5;
  const auto data = gen_needle_dataset(r, o);
  for (const auto& inst : data) {
    EXPECT_EQ(inst.layout.n_visual, 1u);
    EXPECT_EQ(inst.planted_cells, (std::vector<std::size_t>{0}));
    for (double R : {0.01, 0.5, 1.0})
      EXPECT_EQ(make_directive({0}, R, 1, 1, RankingSource::aggregated).kept,
                (std::vector<std::size_t>{0}));
  }
}

TEST(Dataset, JsonlRoundTrip) {
  const auto& s = planted::suite();
  const auto data = planted::dataset(s, 12, 12, 0.5);
  const auto path = std::filesystem::temp_directory_path() / "cprune_synth_roundtrip.jsonl";
  write_dataset(data, path);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].layout.token_ids, data[i].layout.token_ids);
    EXPECT_EQ(back[i].answer_id, data[i].answer_id);
    EXPECT_EQ(back[i].hard, data[i].hard);
  }
  std::filesystem::remove(path);
}

TEST(Heatmap, ReshapeAndErrors) {
  const Matrix m = heatmap_matrix(std::vector<double>{1, 2, 3, 4}, GridShape{2, 2});
  EXPECT_EQ(m(0, 0), 1);
  EXPECT_EQ(m(0, 1), 2);
  EXPECT_EQ(m(1, 0), 3);
  EXPECT_EQ(m(1, 1), 4);
  const Matrix u = heatmap_matrix(std::vector<double>(6, 0.5), GridShape{2, 3});
  for (double v : u.data) EXPECT_EQ(v, 0.5);
  EXPECT_THROW(heatmap_matrix(std::vector<double>{1, 2, 3}, GridShape{2, 2}), std::invalid_argument);
}

TEST(Heatmap, ArgmaxOnPlantedCell) {
  const auto& s = planted::suite();
  for (const auto& inst : planted::dataset(s, 10, 13, 0.3)) {
    AttentionTrace trace(inst.layout.n_visual, inst.layout.n_prompt);
    ForwardOptions o;
    o.sink = &trace;
    generate(s.pair.small, inst.layout, 1, o);
    const Matrix m = heatmap_matrix(trace.finalize(), inst.grid);
    const auto best = std::max_element(m.data.begin(), m.data.end()) - m.data.begin();
    EXPECT_EQ(std::size_t(best), inst.planted_cells[0]);
  }
}

TEST(Construction, RejectsInfeasibleShapes) {
  PlantedRecipe r;
  r = with_default_layers(r, 24, 48);
  ModelSpec narrow = default_small_spec(r);
  narrow.head_dim = 8;
  narrow.model_dim = 8 * narrow.num_heads;
  EXPECT_THROW(build_planted_model(narrow, r, r.small_relevance_layers, 0.6,
                                   AnswerFidelity::faithful, 1),
               ConstructionError);
  ModelSpec short_seq = default_small_spec(r);
  short_seq.max_seq_len = 10;
  EXPECT_THROW(build_planted_model(short_seq, r, r.small_relevance_layers, 0.6,
                                   AnswerFidelity::faithful, 1),
               ConstructionError);
  EXPECT_THROW(build_planted_model(default_small_spec(r), r, r.small_relevance_layers, 0.4,
                                   AnswerFidelity::faithful, 1),
               ConstructionError);
}

TEST(Construction, DefaultLayerSets) {
  const PlantedRecipe r = with_default_layers(PlantedRecipe{}, 24, 48);
  EXPECT_EQ(r.small_relevance_layers.front(), 9u);
  EXPECT_EQ(r.small_relevance_layers.back(), 24u);
  EXPECT_EQ(r.large_relevance_layers.front(), 25u);
  EXPECT_EQ(r.large_relevance_layers.size(), 24u);
}
