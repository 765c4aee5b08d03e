#pragma once

// Subcommand implementations behind the cprune executable. Each command
// holds a lock file in the output directory for its whole duration.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cprune/config.hpp"

namespace cprune {

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "cprune_out";
  std::optional<std::size_t> parallel;
  bool json = false;
};

struct CommandResult {
  std::vector<std::filesystem::path> outputs;
  std::vector<std::string> warnings;

  nlohmann::json to_json(std::string_view command) const;
};

inline constexpr const char* kSeedEnv = "CASCADE_PRUNE_SEED";

// --seed beats CASCADE_PRUNE_SEED beats the config's seed.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const char* env_value,
                           std::uint64_t config_seed);

// Config file (or defaults) with seed and parallelism overrides applied.
RunConfig resolve_config(const CommandOptions& opts);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

CommandResult cmd_build(const CommandOptions& opts);
CommandResult cmd_run(const CommandOptions& opts);
CommandResult cmd_ablate(const CommandOptions& opts, std::string_view which);
CommandResult cmd_plot(const CommandOptions& opts);

// 1 for usage/config errors, 2 for everything else.
int exit_code_for(const std::exception& e);

}  // namespace cprune
