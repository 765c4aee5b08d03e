#include "cprune/commands.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "cprune/ablation.hpp"
#include "cprune/error.hpp"
#include "cprune/model_io.hpp"
#include "cprune/report.hpp"

namespace cprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSmallFile = "small.cprm";
constexpr const char* kLargeFile = "large.cprm";
constexpr const char* kDatasetFile = "dataset.jsonl";
constexpr const char* kManifestFile = "manifest.json";

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

struct Artifacts {
  json manifest;
  RunConfig config;
  Model small;
  Model large;
  std::vector<NeedleInstance> dataset;
};

Artifacts load_artifacts(const CommandOptions& opts) {
  const fs::path manifest_path = opts.out / kManifestFile;
  if (!fs::exists(manifest_path))
    throw IoError("no build artifacts in " + opts.out.string() + " (missing " + kManifestFile +
                  "); run `cprune build --out " + opts.out.string() + "` first");
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  for (const char* name : {kSmallFile, kLargeFile, kDatasetFile}) {
    const fs::path p = opts.out / name;
    if (!fs::exists(p))
      throw IoError("missing artifact " + p.string() + "; run `cprune build --out " +
                    opts.out.string() + "` first");
    const std::string want = manifest.at("files").value(name, "");
    if (sha256_file(p) != want)
      throw FormatError("artifact " + p.string() + " does not match its manifest hash; rebuild");
  }
  RunConfig cfg;
  if (opts.config) {
    cfg = resolve_config(opts);
  } else {
    cfg = parse_run_config(manifest.at("config"));
    const char* env = std::getenv(kSeedEnv);
    cfg.seed = resolve_seed(opts.seed, env, cfg.seed);
    if (opts.parallel) cfg.parallel = *opts.parallel;
  }
  return Artifacts{std::move(manifest), std::move(cfg), load_model(opts.out / kSmallFile),
                   load_model(opts.out / kLargeFile), read_dataset(opts.out / kDatasetFile)};
}

std::string slug(const std::string& s) {
  static const std::regex bad("[^A-Za-z0-9._-]");
  return std::regex_replace(s, bad, "_");
}

}  // namespace

json CommandResult::to_json(std::string_view command) const {
  json outs = json::array();
  for (const auto& p : outputs) outs.push_back(p.string());
  return {{"command", std::string(command)}, {"outputs", outs}, {"warnings", warnings}};
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const char* env_value,
                           std::uint64_t config_seed) {
  if (flag) return *flag;
  if (env_value && *env_value) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(env_value, &end, 10);
    if (errno != 0 || *end != '\0' || env_value[0] == '-')
      throw ConfigError(std::string(kSeedEnv) + " is not a nonnegative integer: '" + env_value +
                        "'");
    return v;
  }
  return config_seed;
}

RunConfig resolve_config(const CommandOptions& opts) {
  RunConfig cfg = opts.config ? load_run_config(*opts.config) : RunConfig{};
  cfg.seed = resolve_seed(opts.seed, std::getenv(kSeedEnv), cfg.seed);
  if (opts.parallel) {
    if (*opts.parallel < 1) throw ConfigError("--parallel must be >= 1");
    cfg.parallel = *opts.parallel;
  }
  return cfg;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".cprune.lock") {
  ensure_dir(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw IoError("output directory " + dir.string() + " is locked by another cprune command (" +
                    path_.string() + "); remove the file if no command is running");
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

CommandResult cmd_build(const CommandOptions& opts) {
  const RunConfig cfg = resolve_config(opts);
  OutputLock lock(opts.out);
  const PlantedRecipe recipe = cfg.resolved_recipe();
  const std::size_t need = recipe.grid.cells() + recipe.prompt_len + cfg.max_new_tokens;
  if (need > cfg.small_model.max_seq_len || need > cfg.large_model.max_seq_len)
    throw ConfigError("max_seq_len must cover grid cells + prompt_len + max_new_tokens (" +
                      std::to_string(need) + ")");
  const PlantedPair pair = build_planted_pair(cfg.small_spec(), cfg.large_spec(), recipe, cfg.seed);
  const auto dataset = gen_needle_dataset(recipe, cfg.dataset_options());

  CommandResult res;
  save_model(pair.small, opts.out / kSmallFile);
  save_model(pair.large, opts.out / kLargeFile);
  write_dataset(dataset, opts.out / kDatasetFile);

  json files = json::object();
  for (const char* name : {kSmallFile, kLargeFile, kDatasetFile}) {
    files[name] = sha256_file(opts.out / name);
    res.outputs.push_back(opts.out / name);
  }
  json manifest = {{"format", 1},
                   {"seed", cfg.seed},
                   {"answer_fidelity", std::string(to_string(recipe.answer_fidelity))},
                   {"small_relevance_layers", recipe.small_relevance_layers},
                   {"large_relevance_layers", recipe.large_relevance_layers},
                   {"config", cfg.to_json()},
                   {"files", files}};
  write_text(opts.out / kManifestFile, manifest.dump(2) + "\n");
  res.outputs.push_back(opts.out / kManifestFile);
  return res;
}

CommandResult cmd_run(const CommandOptions& opts) {
  OutputLock lock(opts.out);
  const Artifacts a = load_artifacts(opts);
  const RunConfig& cfg = a.config;
  const auto sweep = cfg.sweep_points();
  CascadeConfig base = cfg.cascade_base(a.small, a.large);

  EvalOptions eo;
  eo.parallel = cfg.parallel;
  const EvalResult res = evaluate(a.dataset, base, sweep, eo);

  CommandResult out;
  if (sweep.empty()) out.warnings.push_back("sweep is empty; only the baseline row was written");
  write_metrics_csv(res.rows, opts.out / "results.csv");
  write_records_jsonl(res.records, opts.out / "results.jsonl");
  out.outputs.push_back(opts.out / "results.csv");
  out.outputs.push_back(opts.out / "results.jsonl");

  const fs::path traces = opts.out / "traces";
  std::error_code ec;
  fs::remove_all(traces, ec);
  const std::size_t n_export = std::min(cfg.export_traces, a.dataset.size());
  if (n_export > 0) ensure_dir(traces);
  for (std::size_t i = 0; i < n_export; ++i) {
    const NeedleInstance& inst = a.dataset[i];
    const SmallStage& st = res.small[i];
    json directives = json::array();
    std::set<std::pair<std::size_t, double>> seen;
    for (const auto& p : cfg.points) {
      if (!seen.insert({p.k, p.R}).second) continue;
      directives.push_back(make_directive(rank_tokens(st.importance), p.R, p.k,
                                          inst.layout.n_visual, RankingSource::aggregated,
                                          a.large.spec().num_layers)
                               .to_json());
    }
    json j = {{"instance", inst.index},
              {"grid", {inst.grid.rows, inst.grid.cols}},
              {"planted_cells", inst.planted_cells},
              {"importance", st.importance},
              {"trace", st.trace.to_json()},
              {"directives", directives}};
    const fs::path p = traces / ("instance_" + std::to_string(inst.index) + ".json");
    write_text(p, j.dump() + "\n");
    out.outputs.push_back(p);
  }
  return out;
}

CommandResult cmd_ablate(const CommandOptions& opts, std::string_view which) {
  if (which != "layers" && which != "tokens" && which != "criteria")
    throw ConfigError("unknown ablation '" + std::string(which) +
                      "' (expected layers, tokens or criteria)");
  OutputLock lock(opts.out);
  const Artifacts a = load_artifacts(opts);
  const RunConfig& cfg = a.config;
  const CascadeConfig base = cfg.cascade_base(a.small, a.large);
  CommandResult out;
  if (which == "layers") {
    const auto rows = ablate_layers(a.dataset, base, cfg.layer_fractions, cfg.parallel);
    write_text(opts.out / "ablation_layers.csv", ablation_rows_csv(rows));
    out.outputs.push_back(opts.out / "ablation_layers.csv");
  } else if (which == "tokens") {
    const auto rows = ablate_tokens(a.dataset, base, cfg.parallel);
    write_text(opts.out / "ablation_tokens.csv", ablation_rows_csv(rows));
    out.outputs.push_back(opts.out / "ablation_tokens.csv");
  } else {
    const auto abl = ablate_criteria(a.dataset, base, cfg.ablation_exit_ratios, cfg.parallel);
    write_text(opts.out / "ablation_criteria.csv", criteria_curves_csv(abl));
    write_text(opts.out / "ablation_criteria_area.csv", criteria_areas_csv(abl));
    out.outputs.push_back(opts.out / "ablation_criteria.csv");
    out.outputs.push_back(opts.out / "ablation_criteria_area.csv");
  }
  return out;
}

CommandResult cmd_plot(const CommandOptions& opts) {
  OutputLock lock(opts.out);
  const auto rows = read_metrics_csv(opts.out / "results.csv");
  const fs::path plots = opts.out / "plots";
  std::error_code ec;
  fs::remove_all(plots, ec);
  ensure_dir(plots);
  CommandResult out;

  const MetricsRow* baseline = nullptr;
  for (const auto& r : rows)
    if (r.config_id == "large_unpruned") baseline = &r;
  const auto families = group_families(rows);
  if (families.empty()) out.warnings.push_back("results contain no sweep rows; no curves written");
  for (const auto& [family, pts] : families) {
    const fs::path p = plots / ("curve_" + slug(family) + ".svg");
    write_text(p, curve_svg(family, pts, baseline));
    out.outputs.push_back(p);
  }

  const fs::path traces = opts.out / "traces";
  if (fs::is_directory(traces)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(traces))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      json j;
      try {
        j = json::parse(read_file(f));
        const auto grid = j.at("grid").get<std::vector<std::size_t>>();
        if (grid.size() != 2) throw FormatError("grid must be [rows, cols]");
        const auto importance = j.at("importance").get<std::vector<double>>();
        const auto planted = j.at("planted_cells").get<std::vector<std::size_t>>();
        const Matrix m = heatmap_matrix(importance, GridShape{grid[0], grid[1]});
        for (const auto& d : j.at("directives")) {
          const auto kept = d.at("kept").get<std::vector<std::size_t>>();
          const std::string tag = "k" + std::to_string(d.at("k").get<std::size_t>()) + "_R" +
                                  format_double(d.at("R").get<double>());
          const fs::path p = plots / ("heatmap_" + f.stem().string() + "_" + slug(tag) + ".svg");
          write_text(p, heatmap_svg(m, kept, planted, f.stem().string() + " " + tag));
          out.outputs.push_back(p);
        }
      } catch (const json::exception& e) {
        throw FormatError(f.string() + ": " + e.what());
      }
    }
  }
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  return 2;
}

}  // namespace cprune
