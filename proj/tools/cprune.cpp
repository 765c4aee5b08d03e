// cprune: build planted model pairs, run cascade sweeps, ablate, and plot.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cprune/commands.hpp"
#include "cprune/error.hpp"

namespace {

void report_error(bool as_json, std::string_view kind, const std::string& message) {
  if (as_json)
    std::cerr << nlohmann::json{{"error", std::string(kind)}, {"message", message}}.dump() << "\n";
  else
    std::cerr << "cprune: error: " << message << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small-model-guided visual-token pruning and early-exit cascades"};
  app.require_subcommand(1);
  cprune::CommandOptions opts;
  std::string config, out = opts.out.string();
  std::uint64_t seed = 0;
  std::size_t parallel = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed (overrides CASCADE_PRUNE_SEED and config)");
    sub->add_option("--out", out, "output directory")->capture_default_str();
    sub->add_option("--parallel", parallel, "instances evaluated concurrently")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--json", opts.json, "machine-readable stdout/stderr");
  };
  CLI::App* build = app.add_subcommand("build", "build the model pair, dataset and manifest");
  CLI::App* run = app.add_subcommand("run", "evaluate the configured sweep");
  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation grid");
  CLI::App* plot = app.add_subcommand("plot", "render SVG curves and heatmaps");
  std::string which;
  ablate->add_option("which", which, "layers | tokens | criteria")
      ->required()
      ->check(CLI::IsMember({"layers", "tokens", "criteria"}));
  for (CLI::App* sub : {build, run, ablate, plot}) add_common(sub);

  // --json may appear anywhere; honour it for parse errors too.
  for (int i = 1; i < argc; ++i)
    if (std::string_view(argv[i]) == "--json") opts.json = true;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(opts.json, "usage", e.what());
    return 1;
  }

  for (CLI::App* sub : {build, run, ablate, plot}) {
    if (!sub->parsed()) continue;
    if (sub->count("--config")) opts.config = config;
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->count("--parallel")) opts.parallel = parallel;
    opts.out = out;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    cprune::CommandResult res;
    if (command == "build") res = cprune::cmd_build(opts);
    else if (command == "run") res = cprune::cmd_run(opts);
    else if (command == "ablate") res = cprune::cmd_ablate(opts, which);
    else res = cprune::cmd_plot(opts);

    if (opts.json) {
      std::cout << res.to_json(command).dump() << "\n";
    } else {
      for (const auto& w : res.warnings) std::cerr << "cprune: warning: " << w << "\n";
      for (const auto& p : res.outputs) std::cout << p.string() << "\n";
    }
    return 0;
  } catch (const cprune::Error& e) {
    report_error(opts.json, e.kind(), e.what());
    return cprune::exit_code_for(e);
  } catch (const std::exception& e) {
    report_error(opts.json, "runtime", e.what());
    return 2;
  }
}
