#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "cprune/aggregate.hpp"
#include "cprune/error.hpp"
#include "reference.hpp"

using namespace cprune;

namespace {

// Builds a lower-triangular map whose rows are given (padded with zeros).
struct MapFixture {
  std::vector<double> probs;
  std::vector<std::size_t> positions;
  std::size_t n;

  MapFixture(std::vector<std::vector<double>> rows) : n(rows.size()) {
    probs.assign(n * n, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < rows[r].size(); ++c) probs[r * n + c] = rows[r][c];
    positions.resize(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  }
  AttentionMap map(std::size_t layer = 0, std::size_t head = 0) const {
    return AttentionMap{layer, head, n, probs, positions};
  }
};

TokenLayout random_layout(std::size_t nv, std::size_t np, std::size_t vocab, std::mt19937_64& rng) {
  TokenLayout l{nv, np, {}};
  for (std::size_t i = 0; i < l.size(); ++i) l.token_ids.push_back(1 + rng() % (vocab - 1));
  return l;
}

}  // namespace

TEST(AccumulatePrefill, SingleRowBlock) {
  MapFixture f({{1.0}, {0.5, 0.3, 0.2}, {}});
  f = MapFixture({{1.0}, {0.6, 0.4}, {0.5, 0.3, 0.2}});
  AttentionTrace t(2, 1);
  t.accumulate_prefill(f.map());
  EXPECT_DOUBLE_EQ(t.a_prefill()[0], 0.5);
  EXPECT_DOUBLE_EQ(t.a_prefill()[1], 0.3);
}

TEST(AccumulatePrefill, HandColumnSum) {
  const MapFixture f({{1.0},
                      {0.5, 0.5},
                      {0.3, 0.3, 0.4},
                      {0.2, 0.1, 0.4, 0.3},
                      {0.3, 0.3, 0.1, 0.2, 0.1}});
  AttentionTrace t(3, 2);
  t.accumulate_prefill(f.map());
  EXPECT_NEAR(t.a_prefill()[0], 0.5, 1e-15);
  EXPECT_NEAR(t.a_prefill()[1], 0.4, 1e-15);
  EXPECT_NEAR(t.a_prefill()[2], 0.5, 1e-15);
  EXPECT_NEAR(t.a_last_prompt()[0], 0.3, 1e-15);
}

TEST(AccumulatePrefill, LinearOverLayersAndHeads) {
  const MapFixture f({{1.0}, {0.6, 0.4}, {0.5, 0.3, 0.2}});
  AttentionTrace one(2, 1), four(2, 1);
  one.accumulate_prefill(f.map());
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) four.accumulate_prefill(f.map(l, h));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(four.a_prefill()[i], 4 * one.a_prefill()[i]);
  EXPECT_EQ(four.layers_seen(), 2u);
  EXPECT_EQ(four.heads_seen(), 2u);
}

TEST(AccumulatePrefill, Errors) {
  const MapFixture f({{1.0}, {0.6, 0.4}, {0.5, 0.3, 0.2}});
  AttentionTrace wrong_prompt(1, 3);
  EXPECT_THROW(wrong_prompt.accumulate_prefill(f.map()), TraceError);  // only two prompt rows in map
  MapFixture unnorm({{1.0}, {0.6, 0.4}, {0.5, 0.3, 0.1}});
  AttentionTrace t(2, 1);
  EXPECT_THROW(t.accumulate_prefill(unnorm.map()), TraceError);
  AttentionTrace filtered(2, 1, std::vector<std::size_t>{1});
  EXPECT_THROW(filtered.accumulate_prefill(f.map(0, 0)), TraceError);
  std::vector<std::size_t> short_pos{0, 1};
  EXPECT_THROW(t.accumulate_prefill(AttentionMap{0, 0, 3, f.probs, short_pos}), TraceError);
}

TEST(AccumulateDecode, PrefixExtraction) {
  AttentionTrace t(2, 1);
  const std::vector<double> p{0.4, 0.1, 0.3, 0.2};
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  t.accumulate_decode(AttentionRow{0, 0, 3, p, pos});
  EXPECT_DOUBLE_EQ(t.a_decode()[0], 0.4);
  EXPECT_DOUBLE_EQ(t.a_decode()[1], 0.1);
  EXPECT_EQ(t.decode_steps_seen(), 1u);
}

TEST(AccumulateDecode, TwoGeneratedTokensSum) {
  AttentionTrace t(2, 1);
  const std::vector<double> p1{0.4, 0.1, 0.3, 0.2}, p2{0.2, 0.2, 0.3, 0.2, 0.1};
  const std::vector<std::size_t> pos1{0, 1, 2, 3}, pos2{0, 1, 2, 3, 4};
  t.accumulate_decode(AttentionRow{0, 0, 3, p1, pos1});
  t.accumulate_decode(AttentionRow{0, 0, 4, p2, pos2});
  EXPECT_NEAR(t.a_decode()[0], 0.6, 1e-15);
  EXPECT_NEAR(t.a_decode()[1], 0.3, 1e-15);
  EXPECT_EQ(t.decode_steps_seen(), 2u);
}

TEST(AccumulateDecode, ZeroVisualAttentionIsIdentity) {
  AttentionTrace t(2, 1);
  const std::vector<double> p{0.0, 0.0, 0.5, 0.5};
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  t.accumulate_decode(AttentionRow{0, 0, 3, p, pos});
  EXPECT_EQ(t.a_decode(), (std::vector<double>{0.0, 0.0}));
}

TEST(AccumulateDecode, Errors) {
  AttentionTrace t(2, 1);
  const std::vector<double> p{0.5, 0.5};
  const std::vector<std::size_t> pos{0, 1};
  EXPECT_THROW(t.accumulate_decode(AttentionRow{0, 0, 1, p, pos}), TraceError);  // not generated
  const std::vector<std::size_t> pos3{0, 1, 2};
  EXPECT_THROW(t.accumulate_decode(AttentionRow{0, 0, 2, p, pos3}), TraceError);  // size mismatch
}

TEST(Finalize, SumAndPurity) {
  const MapFixture f({{1.0}, {0.0, 1.0}, {1.0, 0.0, 0.0}});
  AttentionTrace t(2, 1);
  t.accumulate_prefill(f.map());
  const std::vector<double> p{0.0, 2.0 / 2, 0.0};
  const std::vector<std::size_t> pos{0, 1, 3};
  t.accumulate_decode(AttentionRow{0, 0, 3, p, pos});
  t.accumulate_decode(AttentionRow{0, 1, 3, p, pos});
  EXPECT_EQ(t.finalize(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(t.finalize(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(t.finalize(0.5), (std::vector<double>{1.0, 1.0}));
}

TEST(Finalize, EmptyTraceIsError) {
  AttentionTrace t(3, 2);
  EXPECT_THROW(t.finalize(), TraceError);
  EXPECT_THROW(t.subset_importance(TokenSubset::prompt_only), TraceError);
  EXPECT_THROW(t.subset_importance(TokenSubset::generated_only), TraceError);
}

TEST(Finalize, MatchesBruteForceOracle) {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t L = 1 + rng() % 4, H = 1 + rng() % 4;
    const Model m = build_model(reference::toy_spec(L, H, 4, 20, 64), trial);
    const TokenLayout l = random_layout(3 + rng() % 20, 1 + rng() % 6, 20, rng);
    AttentionTrace t(l.n_visual, l.n_prompt);
    ForwardOptions o;
    o.sink = &t;
    const GenerationResult g = generate(m, l, 1 + rng() % 6, o);
    std::vector<TokenId> ids = l.token_ids;
    ids.insert(ids.end(), g.generated_ids.begin(), g.generated_ids.end());
    const auto run = reference::forward(m, ids, l.n_visual);
    std::vector<std::size_t> all(L);
    for (std::size_t j = 0; j < L; ++j) all[j] = j;
    const auto want = reference::brute_force_importance(run, l.n_visual, l.n_prompt, all);
    const auto got = t.finalize();
    for (std::size_t i = 0; i < l.n_visual; ++i) {
      EXPECT_NEAR(got[i], want.prefill[i] + want.decode[i], 1e-9);
      EXPECT_NEAR(t.a_last_prompt()[i], want.last_prompt[i], 1e-9);
    }
  }
}

TEST(Finalize, LayerFilterMatchesRestrictedOracle) {
  const Model m = build_model(reference::toy_spec(2, 2, 4, 20, 64), 8);
  std::mt19937_64 rng(4);
  const TokenLayout l = random_layout(10, 3, 20, rng);
  AttentionTrace t(l.n_visual, l.n_prompt, std::vector<std::size_t>{0});
  ForwardOptions o;
  o.sink = &t;
  const GenerationResult g = generate(m, l, 3, o);
  std::vector<TokenId> ids = l.token_ids;
  ids.insert(ids.end(), g.generated_ids.begin(), g.generated_ids.end());
  const auto want =
      reference::brute_force_importance(reference::forward(m, ids, l.n_visual), l.n_visual, l.n_prompt, {0});
  const auto got = t.finalize();
  for (std::size_t i = 0; i < l.n_visual; ++i)
    EXPECT_NEAR(got[i], want.prefill[i] + want.decode[i], 1e-9);
  EXPECT_EQ(t.layers_seen(), 1u);
}

TEST(SubsetImportance, Definitions) {
  const Model m = build_model(reference::toy_spec(2, 2, 4, 20, 64), 9);
  std::mt19937_64 rng(5);
  const TokenLayout l = random_layout(8, 3, 20, rng);
  AttentionTrace t(l.n_visual, l.n_prompt);
  ForwardOptions o;
  o.sink = &t;
  generate(m, l, 2, o);
  EXPECT_EQ(t.subset_importance(TokenSubset::prompt_only), t.a_prefill());
  EXPECT_EQ(t.subset_importance(TokenSubset::generated_only), t.a_decode());
  EXPECT_EQ(t.subset_importance(TokenSubset::prompt_and_generated), t.finalize());
  EXPECT_EQ(t.subset_importance(TokenSubset::last_prompt_token), t.a_last_prompt());
}

TEST(SubsetImportance, LastPromptCollapsesForOnePromptToken) {
  const Model m = build_model(reference::toy_spec(2, 2, 4, 20, 64), 10);
  std::mt19937_64 rng(6);
  const TokenLayout l = random_layout(8, 1, 20, rng);
  AttentionTrace t(l.n_visual, l.n_prompt);
  ForwardOptions o;
  o.sink = &t;
  generate(m, l, 2, o);
  EXPECT_EQ(t.subset_importance(TokenSubset::last_prompt_token),
            t.subset_importance(TokenSubset::prompt_only));
}

TEST(TraceInvariants, BoundsAndOrderIndependence) {
  std::mt19937_64 rng(7);
  const std::size_t L = 3, H = 2;
  const Model m = build_model(reference::toy_spec(L, H, 4, 20, 64), 11);
  const TokenLayout l = random_layout(12, 4, 20, rng);
  struct Capture : AttentionSink {
    std::vector<std::pair<std::vector<double>, std::vector<std::size_t>>> maps;
    std::vector<AttentionMap> meta;
    void on_prefill(const AttentionMap& mp) override {
      maps.emplace_back(std::vector<double>(mp.probs.begin(), mp.probs.end()),
                        std::vector<std::size_t>(mp.positions.begin(), mp.positions.end()));
      meta.push_back(mp);
    }
  } cap;
  AttentionTrace forward_order(l.n_visual, l.n_prompt);
  SinkList sinks;
  sinks.add(&cap);
  sinks.add(&forward_order);
  ForwardOptions o;
  o.sink = &sinks;
  const GenerationResult g = generate(m, l, 3, o);

  AttentionTrace reversed(l.n_visual, l.n_prompt);
  for (std::size_t i = cap.maps.size(); i-- > 0;)
    reversed.accumulate_prefill(AttentionMap{cap.meta[i].layer, cap.meta[i].head, cap.meta[i].n,
                                             cap.maps[i].first, cap.maps[i].second});
  for (std::size_t i = 0; i < l.n_visual; ++i) {
    EXPECT_NEAR(forward_order.a_prefill()[i], reversed.a_prefill()[i], 1e-9);
    EXPECT_GE(forward_order.a_prefill()[i], 0.0);
    EXPECT_LE(forward_order.a_prefill()[i], double(l.n_prompt * L * H));
    EXPECT_GE(forward_order.a_decode()[i], 0.0);
    EXPECT_LE(forward_order.a_decode()[i], double(forward_order.decode_steps_seen() * L * H));
  }
  EXPECT_EQ(forward_order.decode_steps_seen(), g.generated_ids.size());
}

TEST(TraceExport, JsonFields) {
  const MapFixture f({{1.0}, {0.6, 0.4}, {0.5, 0.3, 0.2}});
  AttentionTrace t(2, 1);
  t.accumulate_prefill(f.map());
  const auto j = t.to_json();
  EXPECT_EQ(j["n_visual"], 2);
  EXPECT_EQ(j["a_prefill"].size(), 2u);
  EXPECT_EQ(j["a_decode"].size(), 2u);
  EXPECT_TRUE(j.contains("counters"));
}

TEST(FirstLayers, FloorWithMinimumOne) {
  EXPECT_EQ(first_layers(24, 0.1), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(first_layers(4, 0.1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(first_layers(24, 0.3).size(), 7u);
  EXPECT_EQ(first_layers(24, 1.0).size(), 24u);
  EXPECT_THROW(first_layers(24, 0.0), ConfigError);
}
