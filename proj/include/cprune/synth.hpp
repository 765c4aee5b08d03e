#pragma once

// Planted model pairs and synthetic needle tasks.
//
// The residual stream is split into disjoint subspaces:
//   ROW, COL    one-hot row / column of a visual position (position embedding)
//   QROW, QCOL  one-hot row / column of the queried cell (query token embedding)
//   SYM         one-hot symbol of a visual token, scaled by its intensity
//   ANS         answer accumulator written by the designated head
//   SCRATCH     everything else; random heads and FFNs write only here
// In every relevance layer, head 0 attends from the query token to the cell
// whose (ROW, COL) match its (QROW, QCOL), with a closed-form logit gap that
// puts exactly `concentration` of the mass on it, and copies SYM into ANS.
// The unembedding reads ANS only.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cprune/engine.hpp"
#include "cprune/matrix.hpp"

namespace cprune {

struct GridShape {
  std::size_t rows = 8;
  std::size_t cols = 8;

  std::size_t cells() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

enum class AnswerFidelity { faithful, corrupted };

std::string_view to_string(AnswerFidelity f);
AnswerFidelity answer_fidelity_from_string(std::string_view name);

struct PlantedRecipe {
  GridShape grid;
  std::size_t num_symbols = 8;
  std::vector<double> faint_levels{0.15, 0.3, 0.62};
  std::size_t prompt_len = 4;     // filler tokens, then the query token
  std::size_t filler_tokens = 4;  // distinct filler ids in the vocabulary
  // 1-indexed layers whose head 0 carries the planted pattern.
  std::vector<std::size_t> small_relevance_layers;
  std::vector<std::size_t> large_relevance_layers;
  double concentration = 0.95;
  std::optional<double> small_concentration = 0.6;
  AnswerFidelity answer_fidelity = AnswerFidelity::faithful;  // small model only
  double answer_gain = 12.0;
  double random_scale = 0.02;

  double small_p() const { return small_concentration.value_or(concentration); }
};

// Token id layout: EOS, strong symbols, faint symbols (one block of
// num_symbols per level), one query token per cell, fillers.
struct PlantedVocab {
  std::size_t num_symbols = 0;
  std::size_t num_levels = 0;
  std::size_t num_cells = 0;
  std::size_t num_fillers = 0;

  explicit PlantedVocab(const PlantedRecipe& r);

  TokenId strong(std::size_t symbol) const { return static_cast<TokenId>(1 + symbol); }
  TokenId faint(std::size_t symbol, std::size_t level) const {
    return static_cast<TokenId>(1 + num_symbols * (1 + level) + symbol);
  }
  TokenId query(std::size_t cell) const {
    return static_cast<TokenId>(1 + num_symbols * (1 + num_levels) + cell);
  }
  TokenId filler(std::size_t f) const {
    return static_cast<TokenId>(1 + num_symbols * (1 + num_levels) + num_cells + f);
  }
  std::size_t size() const { return 1 + num_symbols * (1 + num_levels) + num_cells + num_fillers; }
};

// Default pair for a recipe: small 24 layers, large 48, 4 heads of width 16.
ModelSpec default_small_spec(const PlantedRecipe& r);
ModelSpec default_large_spec(const PlantedRecipe& r);

// Fills empty relevance sets: small gets its upper two thirds, large its upper half.
PlantedRecipe with_default_layers(PlantedRecipe r, std::size_t small_layers,
                                  std::size_t large_layers);

// Logit scale b that gives the target cell mass p on the query row.
double planted_logit_scale(const GridShape& grid, std::size_t prompt_len, double p);

Model build_planted_model(const ModelSpec& spec, const PlantedRecipe& recipe,
                          const std::vector<std::size_t>& relevance_layers, double concentration,
                          AnswerFidelity fidelity, std::uint64_t seed);

struct PlantedPair {
  Model small;
  Model large;
};

// Builds both models and checks the concentration on a probe instance.
PlantedPair build_planted_pair(const ModelSpec& small_spec, const ModelSpec& large_spec,
                               const PlantedRecipe& recipe, std::uint64_t seed);

struct NeedleInstance {
  std::size_t index = 0;
  GridShape grid;
  TokenLayout layout;
  std::size_t query_cell = 0;
  TokenId answer_id = 0;
  std::vector<std::size_t> planted_cells;
  bool hard = false;  // target carries a faint symbol

  nlohmann::json to_json() const;
  static NeedleInstance from_json(const nlohmann::json& j);
};

struct DatasetOptions {
  std::size_t n_instances = 200;
  std::uint64_t seed = 0;
  std::size_t distractors = 4;  // lure cells in the query's row/column
  std::size_t hard_distractors = 64;  // the same, on hard instances
  double hard_fraction = 0.0;
};

// Every cell carries one symbol; the answer symbol appears only at the
// queried cell. Lures carry symbol (answer + 1) mod S.
std::vector<NeedleInstance> gen_needle_dataset(const PlantedRecipe& recipe,
                                               const DatasetOptions& opts);

// Minimum of mass on planted cells over the query row of head 0 in each
// relevance layer (1-indexed).
double measured_concentration(const Model& model, const NeedleInstance& inst,
                              const std::vector<std::size_t>& relevance_layers);

Matrix heatmap_matrix(std::span<const double> importance, const GridShape& grid);

void write_dataset(const std::vector<NeedleInstance>& data, const std::filesystem::path& path);
std::vector<NeedleInstance> read_dataset(const std::filesystem::path& path);

}  // namespace cprune
