#pragma once

#include <stdexcept>
#include <string>

namespace cprune {

// Base for every error raised by the library. The CLI maps ConfigError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

#define CPRUNE_ERROR_TYPE(Name, Kind)                               \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what) : Error(what) {}         \
    const char* kind() const noexcept override { return Kind; }     \
  };

CPRUNE_ERROR_TYPE(ConstructionError, "construction")
CPRUNE_ERROR_TYPE(CapacityError, "capacity")
CPRUNE_ERROR_TYPE(DirectiveError, "invalid_directive")
CPRUNE_ERROR_TYPE(TraceError, "trace")
CPRUNE_ERROR_TYPE(RankingError, "ranking")
CPRUNE_ERROR_TYPE(ScoreError, "score")
CPRUNE_ERROR_TYPE(ConfigError, "config")
CPRUNE_ERROR_TYPE(FormatError, "format")
CPRUNE_ERROR_TYPE(IoError, "io")

#undef CPRUNE_ERROR_TYPE

}  // namespace cprune
