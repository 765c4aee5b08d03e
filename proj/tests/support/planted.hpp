#pragma once

// Default planted model pairs and datasets, built once per process.

#include <vector>

#include "cprune/config.hpp"
#include "cprune/synth.hpp"

namespace planted {

struct Suite {
  cprune::RunConfig config;
  cprune::PlantedRecipe recipe;
  cprune::PlantedPair pair;
};

// Default configuration (seed 7) with the given small-model fidelity.
const Suite& suite(cprune::AnswerFidelity fidelity = cprune::AnswerFidelity::faithful);

std::vector<cprune::NeedleInstance> dataset(const Suite& s, std::size_t n, std::uint64_t seed,
                                            double hard_fraction);

}  // namespace planted
