#include "cprune/config.hpp"

#include <fstream>
#include <set>
#include <string>

#include "cprune/error.hpp"

namespace cprune {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object and rejects any it was not asked about.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + at(key) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::size_t as_count(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw ConfigError(path + " must be a nonnegative integer");
  return v.get<std::size_t>();
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + " must be a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + " must be a string");
  return v.get<std::string>();
}

template <class T, class Conv>
std::vector<T> as_list(const json& v, const std::string& path, Conv conv) {
  if (!v.is_array()) throw ConfigError(path + " must be an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(conv(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

void read(Fields& f, const std::string& key, std::size_t& out) {
  if (const json* v = f.find(key)) out = as_count(*v, f.at(key));
}
void read(Fields& f, const std::string& key, double& out) {
  if (const json* v = f.find(key)) out = as_number(*v, f.at(key));
}
void read(Fields& f, const std::string& key, bool& out) {
  if (const json* v = f.find(key)) {
    if (!v->is_boolean()) throw ConfigError(f.at(key) + " must be a boolean");
    out = v->get<bool>();
  }
}
void read(Fields& f, const std::string& key, std::vector<double>& out) {
  if (const json* v = f.find(key)) out = as_list<double>(*v, f.at(key), as_number);
}
void read(Fields& f, const std::string& key, std::vector<std::size_t>& out) {
  if (const json* v = f.find(key)) out = as_list<std::size_t>(*v, f.at(key), as_count);
}

void read_shape(Fields& parent, const std::string& key, ModelShape& s) {
  const json* v = parent.find(key);
  if (!v) return;
  Fields f(*v, parent.at(key));
  read(f, "num_layers", s.num_layers);
  read(f, "num_heads", s.num_heads);
  read(f, "head_dim", s.head_dim);
  read(f, "max_seq_len", s.max_seq_len);
  f.finish();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void check_fraction(double v, const std::string& path, bool allow_zero) {
  require(allow_zero ? (v >= 0 && v <= 1) : (v > 0 && v <= 1),
          path + (allow_zero ? " must lie in [0, 1]" : " must lie in (0, 1]"));
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Fields top(j, "");
  if (const json* v = top.find("seed")) c.seed = as_count(*v, "seed");
  read(top, "parallel", c.parallel);
  read(top, "export_traces", c.export_traces);

  if (const json* v = top.find("recipe")) {
    Fields f(*v, "recipe");
    PlantedRecipe& r = c.recipe;
    if (const json* g = f.find("grid")) {
      const auto dims = as_list<std::size_t>(*g, "recipe.grid", as_count);
      require(dims.size() == 2, "recipe.grid must be [rows, cols]");
      r.grid = GridShape{dims[0], dims[1]};
    }
    read(f, "num_symbols", r.num_symbols);
    read(f, "faint_levels", r.faint_levels);
    read(f, "prompt_len", r.prompt_len);
    read(f, "filler_tokens", r.filler_tokens);
    read(f, "concentration", r.concentration);
    if (const json* s = f.find("small_concentration")) {
      if (s->is_null())
        r.small_concentration.reset();
      else
        r.small_concentration = as_number(*s, "recipe.small_concentration");
    }
    read(f, "small_relevance_layers", r.small_relevance_layers);
    read(f, "large_relevance_layers", r.large_relevance_layers);
    if (const json* s = f.find("answer_fidelity"))
      r.answer_fidelity = answer_fidelity_from_string(as_string(*s, "recipe.answer_fidelity"));
    read(f, "answer_gain", r.answer_gain);
    read(f, "random_scale", r.random_scale);
    f.finish();
  }
  read_shape(top, "small_model", c.small_model);
  read_shape(top, "large_model", c.large_model);

  if (const json* v = top.find("dataset")) {
    Fields f(*v, "dataset");
    read(f, "n_instances", c.n_instances);
    read(f, "distractors", c.distractors);
    read(f, "hard_distractors", c.hard_distractors);
    read(f, "hard_fraction", c.hard_fraction);
    f.finish();
  }

  if (const json* v = top.find("cascade")) {
    Fields f(*v, "cascade");
    read(f, "max_new_tokens", c.max_new_tokens);
    read(f, "fastv_layer", c.fastv_layer);
    read(f, "decode_weight", c.decode_weight);
    read(f, "trace_layer_fraction", c.trace_layer_fraction);
    if (const json* s = f.find("token_subset"))
      c.token_subset = token_subset_from_string(as_string(*s, "cascade.token_subset"));
    if (const json* s = f.find("consistency")) {
      Fields g(*s, "cascade.consistency");
      read(g, "k", c.consistency.prune_layer);
      read(g, "R", c.consistency.retain_fraction);
      read(g, "length_normalized", c.consistency.length_normalized);
      g.finish();
    }
    f.finish();
  }

  if (const json* v = top.find("sweep")) {
    Fields f(*v, "sweep");
    if (const json* p = f.find("points")) {
      c.points = as_list<RunConfig::Point>(*p, "sweep.points", [](const json& e, const std::string& path) {
        Fields g(e, path);
        RunConfig::Point pt;
        const json* k = g.find("k");
        const json* R = g.find("R");
        require(k && R, path + " needs both k and R");
        pt.k = as_count(*k, g.at("k"));
        pt.R = as_number(*R, g.at("R"));
        g.finish();
        return pt;
      });
    }
    if (const json* s = f.find("ranking_sources"))
      c.ranking_sources = as_list<RankingSource>(*s, "sweep.ranking_sources",
                                                 [](const json& e, const std::string& path) {
                                                   return ranking_source_from_string(as_string(e, path));
                                                 });
    if (const json* s = f.find("criteria"))
      c.criteria = as_list<ExitCriterion>(*s, "sweep.criteria", [](const json& e, const std::string& path) {
        return exit_criterion_from_string(as_string(e, path));
      });
    read(f, "thresholds", c.thresholds);
    read(f, "exit_ratios", c.exit_ratios);
    f.finish();
  }

  if (const json* v = top.find("ablation")) {
    Fields f(*v, "ablation");
    read(f, "k", c.ablation_k);
    read(f, "R", c.ablation_R);
    read(f, "layer_fractions", c.layer_fractions);
    read(f, "exit_ratios", c.ablation_exit_ratios);
    f.finish();
  }
  top.finish();

  require(c.parallel >= 1, "parallel must be >= 1");
  require(c.n_instances >= 1, "dataset.n_instances must be >= 1");
  check_fraction(c.hard_fraction, "dataset.hard_fraction", true);
  require(c.max_new_tokens >= 1, "cascade.max_new_tokens must be >= 1");
  check_fraction(c.trace_layer_fraction, "cascade.trace_layer_fraction", false);
  require(c.decode_weight >= 0, "cascade.decode_weight must be >= 0");
  require(c.consistency.prune_layer >= 1 && c.consistency.prune_layer <= c.small_model.num_layers,
          "cascade.consistency.k must lie in [1, small_model.num_layers]");
  check_fraction(c.consistency.retain_fraction, "cascade.consistency.R", false);
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const std::string p = "sweep.points[" + std::to_string(i) + "]";
    require(c.points[i].k >= 1 && c.points[i].k <= c.large_model.num_layers,
            p + ".k must lie in [1, large_model.num_layers]");
    check_fraction(c.points[i].R, p + ".R", false);
  }
  require(c.ablation_k >= 1 && c.ablation_k <= c.large_model.num_layers,
          "ablation.k must lie in [1, large_model.num_layers]");
  check_fraction(c.ablation_R, "ablation.R", false);
  for (double t : c.thresholds) require(t >= 0, "sweep.thresholds must be >= 0");
  for (double e : c.exit_ratios) check_fraction(e, "sweep.exit_ratios entries", true);
  for (double e : c.ablation_exit_ratios) check_fraction(e, "ablation.exit_ratios entries", true);
  for (double fr : c.layer_fractions) check_fraction(fr, "ablation.layer_fractions entries", false);
  require(c.large_model.num_layers > c.small_model.num_layers,
          "large_model.num_layers must exceed small_model.num_layers");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  try {
    return parse_run_config(json::parse(f));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace {

ModelSpec spec_of(const ModelShape& s, const PlantedRecipe& r) {
  return ModelSpec{s.num_layers, s.num_heads, s.num_heads * s.head_dim, s.head_dim,
                   PlantedVocab(r).size(), s.max_seq_len};
}

}  // namespace

ModelSpec RunConfig::small_spec() const { return spec_of(small_model, recipe); }
ModelSpec RunConfig::large_spec() const { return spec_of(large_model, recipe); }

PlantedRecipe RunConfig::resolved_recipe() const {
  return with_default_layers(recipe, small_model.num_layers, large_model.num_layers);
}

DatasetOptions RunConfig::dataset_options() const {
  DatasetOptions o;
  o.n_instances = n_instances;
  o.seed = seed ^ 0x5eedda7aULL;
  o.distractors = distractors;
  o.hard_distractors = hard_distractors;
  o.hard_fraction = hard_fraction;
  return o;
}

std::vector<SweepPoint> RunConfig::sweep_points() const {
  std::vector<SweepPoint> out;
  for (const auto& p : points)
    for (RankingSource src : ranking_sources)
      for (ExitCriterion crit : criteria) {
        SweepPoint sp;
        sp.prune_layer = p.k;
        sp.retain_fraction = p.R;
        sp.ranking_source = src;
        sp.criterion = crit;
        for (double t : thresholds) {
          sp.threshold = t;
          sp.target_exit_ratio.reset();
          out.push_back(sp);
        }
        for (double e : exit_ratios) {
          sp.threshold.reset();
          sp.target_exit_ratio = e;
          out.push_back(sp);
        }
      }
  return out;
}

CascadeConfig RunConfig::cascade_base(const Model& small, const Model& large) const {
  CascadeConfig c;
  c.small = &small;
  c.large = &large;
  c.prune_layer = ablation_k;
  c.retain_fraction = ablation_R;
  if (!ranking_sources.empty()) c.ranking_source = ranking_sources.front();
  if (!criteria.empty()) c.exit_criterion = criteria.front();
  c.consistency = consistency;
  c.max_new_tokens = max_new_tokens;
  c.fastv_layer = fastv_layer;
  c.decode_weight = decode_weight;
  c.token_subset = token_subset;
  if (trace_layer_fraction < 1.0)
    c.trace_layers = first_layers(small.spec().num_layers, trace_layer_fraction);
  c.seed = seed;
  return c;
}

nlohmann::json RunConfig::to_json() const {
  json pts = json::array();
  for (const auto& p : points) pts.push_back({{"k", p.k}, {"R", p.R}});
  json sources = json::array(), crits = json::array();
  for (auto s : ranking_sources) sources.push_back(std::string(to_string(s)));
  for (auto c : criteria) crits.push_back(std::string(to_string(c)));
  auto shape = [](const ModelShape& s) {
    return json{{"num_layers", s.num_layers},
                {"num_heads", s.num_heads},
                {"head_dim", s.head_dim},
                {"max_seq_len", s.max_seq_len}};
  };
  json recipe_j = {{"grid", {recipe.grid.rows, recipe.grid.cols}},
                   {"num_symbols", recipe.num_symbols},
                   {"faint_levels", recipe.faint_levels},
                   {"prompt_len", recipe.prompt_len},
                   {"filler_tokens", recipe.filler_tokens},
                   {"concentration", recipe.concentration},
                   {"small_concentration", recipe.small_concentration
                                               ? json(*recipe.small_concentration)
                                               : json(nullptr)},
                   {"small_relevance_layers", recipe.small_relevance_layers},
                   {"large_relevance_layers", recipe.large_relevance_layers},
                   {"answer_fidelity", std::string(to_string(recipe.answer_fidelity))},
                   {"answer_gain", recipe.answer_gain},
                   {"random_scale", recipe.random_scale}};
  return {{"seed", seed},
          {"parallel", parallel},
          {"recipe", recipe_j},
          {"small_model", shape(small_model)},
          {"large_model", shape(large_model)},
          {"dataset",
           {{"n_instances", n_instances},
            {"distractors", distractors},
            {"hard_distractors", hard_distractors},
            {"hard_fraction", hard_fraction}}},
          {"cascade",
           {{"max_new_tokens", max_new_tokens},
            {"fastv_layer", fastv_layer},
            {"decode_weight", decode_weight},
            {"token_subset", std::string(to_string(token_subset))},
            {"trace_layer_fraction", trace_layer_fraction},
            {"consistency",
             {{"k", consistency.prune_layer},
              {"R", consistency.retain_fraction},
              {"length_normalized", consistency.length_normalized}}}}},
          {"sweep",
           {{"points", pts},
            {"ranking_sources", sources},
            {"criteria", crits},
            {"thresholds", thresholds},
            {"exit_ratios", exit_ratios}}},
          {"ablation",
           {{"k", ablation_k},
            {"R", ablation_R},
            {"layer_fractions", layer_fractions}, {"exit_ratios", ablation_exit_ratios}}},
          {"export_traces", export_traces}};
}

}  // namespace cprune
