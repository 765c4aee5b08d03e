#include "cprune/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "cprune/error.hpp"

namespace cprune {

std::string_view to_string(AnswerFidelity f) {
  return f == AnswerFidelity::faithful ? "faithful" : "corrupted";
}

AnswerFidelity answer_fidelity_from_string(std::string_view name) {
  if (name == "faithful") return AnswerFidelity::faithful;
  if (name == "corrupted") return AnswerFidelity::corrupted;
  throw ConfigError("unknown answer fidelity '" + std::string(name) + "'");
}

PlantedVocab::PlantedVocab(const PlantedRecipe& r)
    : num_symbols(r.num_symbols),
      num_levels(r.faint_levels.size()),
      num_cells(r.grid.cells()),
      num_fillers(r.filler_tokens) {}

namespace {

constexpr std::size_t kHeads = 4;
constexpr std::size_t kHeadDim = 16;

// Offsets of the residual subspaces.
struct Residual {
  std::size_t row, col, qrow, qcol, sym, ans, scratch, width;

  Residual(const PlantedRecipe& r, std::size_t model_dim) {
    row = 0;
    col = row + r.grid.rows;
    qrow = col + r.grid.cols;
    qcol = qrow + r.grid.rows;
    sym = qcol + r.grid.cols;
    ans = sym + r.num_symbols;
    scratch = ans + r.num_symbols;
    width = model_dim;
  }
  std::size_t scratch_dims() const { return width - scratch; }
};

void check_recipe(const PlantedRecipe& r) {
  if (r.grid.rows < 1 || r.grid.cols < 1) throw ConstructionError("grid must be at least 1x1");
  if (r.num_symbols < 2) throw ConstructionError("need at least 2 symbols");
  if (r.prompt_len < 1) throw ConstructionError("prompt_len must be >= 1");
  if (r.prompt_len > 1 && r.filler_tokens < 1)
    throw ConstructionError("prompts longer than 1 need filler tokens");
  for (double a : r.faint_levels)
    if (!(a > 0 && a < 1)) throw ConstructionError("faint levels must lie in (0, 1)");
  if (!(r.answer_gain > 0)) throw ConstructionError("answer_gain must be positive");
  if (!(r.random_scale >= 0)) throw ConstructionError("random_scale must be >= 0");
}

void check_spec(const ModelSpec& spec, const PlantedRecipe& r) {
  spec.validate();
  const PlantedVocab vocab(r);
  if (spec.vocab_size != vocab.size())
    throw ConstructionError("vocab_size " + std::to_string(spec.vocab_size) +
                            " does not match the planted vocabulary of " +
                            std::to_string(vocab.size()));
  const std::size_t pos_dims = r.grid.rows + r.grid.cols;
  if (spec.head_dim < std::max(pos_dims, r.num_symbols))
    throw ConstructionError("head_dim " + std::to_string(spec.head_dim) +
                            " cannot hold the position code (" + std::to_string(pos_dims) +
                            ") or the symbol code (" + std::to_string(r.num_symbols) + ")");
  const std::size_t need = 2 * pos_dims + 2 * r.num_symbols;
  if (spec.model_dim < need)
    throw ConstructionError("model_dim " + std::to_string(spec.model_dim) +
                            " below the planted subspaces' " + std::to_string(need));
  if (spec.max_seq_len < r.grid.cells() + r.prompt_len + 1)
    throw ConstructionError("max_seq_len too short for the grid and prompt");
}

}  // namespace

ModelSpec default_small_spec(const PlantedRecipe& r) {
  return ModelSpec{24, kHeads, kHeads * kHeadDim, kHeadDim, PlantedVocab(r).size(),
                   r.grid.cells() + r.prompt_len + 60};
}

ModelSpec default_large_spec(const PlantedRecipe& r) {
  ModelSpec s = default_small_spec(r);
  s.num_layers = 48;
  return s;
}

PlantedRecipe with_default_layers(PlantedRecipe r, std::size_t small_layers,
                                  std::size_t large_layers) {
  if (r.small_relevance_layers.empty())
    for (std::size_t l = small_layers / 3 + 1; l <= small_layers; ++l)
      r.small_relevance_layers.push_back(l);
  if (r.large_relevance_layers.empty())
    for (std::size_t l = large_layers / 2 + 1; l <= large_layers; ++l)
      r.large_relevance_layers.push_back(l);
  return r;
}

double planted_logit_scale(const GridShape& grid, std::size_t prompt_len, double p) {
  if (!(p > 0.5 && p < 1))
    throw ConstructionError("concentration must lie in (0.5, 1), got " + std::to_string(p));
  // Keys seen by the query row: target (logit 2b), X cells sharing its row or
  // column (logit b), Y others (logit 0). Solve x^2 / (x^2 + X x + Y) = p.
  const double X = static_cast<double>(grid.rows + grid.cols - 2);
  const double Y = static_cast<double>(grid.cells()) - X - 1 + static_cast<double>(prompt_len);
  const double x = (p * X + std::sqrt(p * p * X * X + 4 * (1 - p) * p * Y)) / (2 * (1 - p));
  return std::log(x);
}

Model build_planted_model(const ModelSpec& spec, const PlantedRecipe& recipe,
                          const std::vector<std::size_t>& relevance_layers, double concentration,
                          AnswerFidelity fidelity, std::uint64_t seed) {
  check_recipe(recipe);
  check_spec(spec, recipe);
  if (relevance_layers.empty()) throw ConstructionError("relevance layer set is empty");
  for (std::size_t l : relevance_layers)
    if (l < 1 || l > spec.num_layers)
      throw ConstructionError("relevance layer " + std::to_string(l) + " outside [1, " +
                              std::to_string(spec.num_layers) + "]");
  const double b = planted_logit_scale(recipe.grid, recipe.prompt_len, concentration);

  const Residual R(recipe, spec.model_dim);
  const PlantedVocab vocab(recipe);
  const std::size_t C = spec.model_dim, F = spec.ffn_dim(), hd = spec.head_dim;
  const std::size_t S = recipe.num_symbols, cols = recipe.grid.cols;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double rs = recipe.random_scale;

  Matrix tok(spec.vocab_size, C), pos(spec.max_seq_len, C), unembed(C, spec.vocab_size);
  for (std::size_t t = 0; t < spec.vocab_size; ++t)
    for (std::size_t d = R.scratch; d < C; ++d) tok(t, d) = unit(rng);
  for (std::size_t s = 0; s < S; ++s) {
    tok(vocab.strong(s), R.sym + s) = 1.0;
    for (std::size_t l = 0; l < vocab.num_levels; ++l)
      tok(vocab.faint(s, l), R.sym + s) = recipe.faint_levels[l];
  }
  for (std::size_t cell = 0; cell < recipe.grid.cells(); ++cell) {
    tok(vocab.query(cell), R.qrow + cell / cols) = 1.0;
    tok(vocab.query(cell), R.qcol + cell % cols) = 1.0;
  }
  for (std::size_t p = 0; p < spec.max_seq_len; ++p) {
    for (std::size_t d = R.scratch; d < C; ++d) pos(p, d) = 0.5 * unit(rng);
    if (p < recipe.grid.cells()) {
      pos(p, R.row + p / cols) = 1.0;
      pos(p, R.col + p % cols) = 1.0;
    }
  }

  std::vector<bool> relevant(spec.num_layers, false);
  for (std::size_t l : relevance_layers) relevant[l - 1] = true;
  const double qscale = b * std::sqrt(static_cast<double>(hd));
  const std::size_t pos_dims = recipe.grid.rows + cols;

  std::vector<LayerWeights> layers(spec.num_layers);
  for (std::size_t j = 0; j < spec.num_layers; ++j) {
    LayerWeights& w = layers[j];
    w.wq = Matrix(C, C);
    w.wk = Matrix(C, C);
    w.wv = Matrix(C, C);
    w.wo = Matrix(C, C);
    w.w1 = Matrix(C, F);
    w.w2 = Matrix(F, C);
    for (std::size_t h = 0; h < spec.num_heads; ++h) {
      const std::size_t base = h * hd;
      if (h == 0 && relevant[j]) {
        for (std::size_t i = 0; i < pos_dims; ++i) {
          w.wq(R.qrow + i, base + i) = qscale;  // QROW,QCOL are contiguous
          w.wk(R.row + i, base + i) = 1.0;      // ROW,COL likewise
        }
        for (std::size_t s = 0; s < S; ++s) {
          w.wv(R.sym + s, base + s) = 1.0;
          w.wo(base + s, R.ans + s) = 1.0;
        }
        continue;
      }
      for (std::size_t r = 0; r < C; ++r)
        for (std::size_t c = base; c < base + hd; ++c) {
          w.wq(r, c) = rs * unit(rng);
          w.wk(r, c) = rs * unit(rng);
          w.wv(r, c) = rs * unit(rng);
        }
      for (std::size_t r = base; r < base + hd; ++r)
        for (std::size_t c = R.scratch; c < C; ++c) w.wo(r, c) = rs * unit(rng);
    }
    for (double& v : w.w1.data) v = rs * unit(rng);
    for (std::size_t r = 0; r < F; ++r)
      for (std::size_t c = R.scratch; c < C; ++c) w.w2(r, c) = rs * unit(rng);
  }

  const double gain = recipe.answer_gain / static_cast<double>(relevance_layers.size());
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t out = fidelity == AnswerFidelity::faithful ? s : (s + 1) % S;
    unembed(R.ans + s, vocab.strong(out)) = gain;
  }
  return Model(spec, seed, std::move(tok), std::move(pos), std::move(layers), std::move(unembed));
}

namespace {

class QueryRowProbe : public AttentionSink {
 public:
  QueryRowProbe(std::vector<bool> layers, std::size_t query_row, std::vector<std::size_t> cells)
      : layers_(std::move(layers)), query_row_(query_row), cells_(std::move(cells)) {}

  void on_prefill(const AttentionMap& m) override {
    if (m.head != 0 || m.layer >= layers_.size() || !layers_[m.layer]) return;
    double mass = 0;
    for (std::size_t c = 0; c < m.n; ++c)
      if (std::find(cells_.begin(), cells_.end(), m.positions[c]) != cells_.end())
        mass += m.at(query_row_, c);
    min_mass = std::min(min_mass, mass);
  }

  double min_mass = 1.0;

 private:
  std::vector<bool> layers_;
  std::size_t query_row_;
  std::vector<std::size_t> cells_;
};

}  // namespace

double measured_concentration(const Model& model, const NeedleInstance& inst,
                              const std::vector<std::size_t>& relevance_layers) {
  std::vector<bool> mask(model.spec().num_layers, false);
  for (std::size_t l : relevance_layers)
    if (l >= 1 && l <= mask.size()) mask[l - 1] = true;
  QueryRowProbe probe(mask, inst.layout.size() - 1, inst.planted_cells);
  ForwardOptions opts;
  opts.sink = &probe;
  prefill(model, inst.layout, opts);
  return probe.min_mass;
}

PlantedPair build_planted_pair(const ModelSpec& small_spec, const ModelSpec& large_spec,
                               const PlantedRecipe& recipe, std::uint64_t seed) {
  if (small_spec.vocab_size != large_spec.vocab_size)
    throw ConstructionError("small and large vocabularies differ");
  if (large_spec.num_layers <= small_spec.num_layers)
    throw ConstructionError("the large model must be deeper than the small one");
  const PlantedRecipe r =
      with_default_layers(recipe, small_spec.num_layers, large_spec.num_layers);
  PlantedPair pair{
      build_planted_model(small_spec, r, r.small_relevance_layers, r.small_p(),
                          r.answer_fidelity, seed),
      build_planted_model(large_spec, r, r.large_relevance_layers, r.concentration,
                          AnswerFidelity::faithful, seed ^ 0x9e3779b97f4a7c15ULL)};

  DatasetOptions probe_opts;
  probe_opts.n_instances = 2;
  probe_opts.seed = seed;
  for (const auto& inst : gen_needle_dataset(r, probe_opts)) {
    const double ms = measured_concentration(pair.small, inst, r.small_relevance_layers);
    const double ml = measured_concentration(pair.large, inst, r.large_relevance_layers);
    if (ms < r.small_p() - 0.02 || ml < r.concentration - 0.02)
      throw ConstructionError("planted concentration self-check failed (small " +
                              std::to_string(ms) + ", large " + std::to_string(ml) + ")");
  }
  return pair;
}

std::vector<NeedleInstance> gen_needle_dataset(const PlantedRecipe& recipe,
                                               const DatasetOptions& opts) {
  check_recipe(recipe);
  if (opts.n_instances < 1) throw ConfigError("dataset needs at least one instance");
  if (!(opts.hard_fraction >= 0 && opts.hard_fraction <= 1))
    throw ConfigError("hard_fraction must lie in [0, 1]");
  if (opts.hard_fraction > 0 && recipe.faint_levels.empty())
    throw ConfigError("hard instances need at least one faint level");

  const PlantedVocab vocab(recipe);
  const GridShape g = recipe.grid;
  const std::size_t S = recipe.num_symbols, N = g.cells();
  std::mt19937_64 rng(opts.seed);
  auto uniform = [&rng](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };
  std::bernoulli_distribution coin(opts.hard_fraction);

  std::vector<NeedleInstance> out;
  out.reserve(opts.n_instances);
  for (std::size_t i = 0; i < opts.n_instances; ++i) {
    NeedleInstance inst;
    inst.index = i;
    inst.grid = g;
    inst.query_cell = uniform(N);
    const std::size_t answer = uniform(S);
    const std::size_t lure = (answer + 1) % S;
    inst.answer_id = vocab.strong(answer);
    inst.planted_cells = {inst.query_cell};

    const std::size_t qr = inst.query_cell / g.cols, qc = inst.query_cell % g.cols;
    std::vector<std::size_t> line;
    for (std::size_t c = 0; c < N; ++c)
      if (c != inst.query_cell && (c / g.cols == qr || c % g.cols == qc)) line.push_back(c);
    inst.hard = coin(rng);
    std::shuffle(line.begin(), line.end(), rng);
    line.resize(std::min(line.size(), inst.hard ? opts.hard_distractors : opts.distractors));

    std::vector<std::size_t> filler_syms;
    for (std::size_t s = 0; s < S; ++s)
      if (s != answer && (s != lure || S < 3)) filler_syms.push_back(s);

    std::vector<TokenId> ids(N);
    for (std::size_t c = 0; c < N; ++c) {
      if (c == inst.query_cell) continue;
      const bool is_lure = std::find(line.begin(), line.end(), c) != line.end();
      ids[c] = vocab.strong(is_lure ? lure : filler_syms[uniform(filler_syms.size())]);
    }
    ids[inst.query_cell] = inst.hard
                               ? vocab.faint(answer, uniform(recipe.faint_levels.size()))
                               : vocab.strong(answer);
    for (std::size_t f = 0; f + 1 < recipe.prompt_len; ++f)
      ids.push_back(vocab.filler(uniform(recipe.filler_tokens)));
    ids.push_back(vocab.query(inst.query_cell));

    inst.layout = TokenLayout{N, recipe.prompt_len, std::move(ids)};
    out.push_back(std::move(inst));
  }
  return out;
}

Matrix heatmap_matrix(std::span<const double> importance, const GridShape& grid) {
  if (importance.size() != grid.cells())
    throw std::invalid_argument("importance length " + std::to_string(importance.size()) +
                                " does not match a " + std::to_string(grid.rows) + "x" +
                                std::to_string(grid.cols) + " grid");
  Matrix m(grid.rows, grid.cols);
  std::copy(importance.begin(), importance.end(), m.data.begin());
  return m;
}

nlohmann::json NeedleInstance::to_json() const {
  return {{"index", index},
          {"grid", {grid.rows, grid.cols}},
          {"n_visual", layout.n_visual},
          {"n_prompt", layout.n_prompt},
          {"token_ids", layout.token_ids},
          {"query_cell", query_cell},
          {"answer_id", answer_id},
          {"planted_cells", planted_cells},
          {"hard", hard}};
}

NeedleInstance NeedleInstance::from_json(const nlohmann::json& j) {
  try {
    NeedleInstance inst;
    inst.index = j.at("index").get<std::size_t>();
    const auto g = j.at("grid").get<std::vector<std::size_t>>();
    if (g.size() != 2) throw FormatError("grid must be [rows, cols]");
    inst.grid = GridShape{g[0], g[1]};
    inst.layout.n_visual = j.at("n_visual").get<std::size_t>();
    inst.layout.n_prompt = j.at("n_prompt").get<std::size_t>();
    inst.layout.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
    inst.query_cell = j.at("query_cell").get<std::size_t>();
    inst.answer_id = j.at("answer_id").get<TokenId>();
    inst.planted_cells = j.at("planted_cells").get<std::vector<std::size_t>>();
    inst.hard = j.value("hard", false);
    if (inst.layout.token_ids.size() != inst.layout.size() ||
        inst.layout.n_visual != inst.grid.cells() || inst.query_cell >= inst.grid.cells())
      throw FormatError("instance fields are inconsistent");
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed instance: ") + e.what());
  }
}

void write_dataset(const std::vector<NeedleInstance>& data, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& inst : data) f << inst.to_json().dump() << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

std::vector<NeedleInstance> read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<NeedleInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(NeedleInstance::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cprune
