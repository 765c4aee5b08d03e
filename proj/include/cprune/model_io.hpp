#pragma once

// Versioned binary container for models:
//   "CPRM" | u32 version | u32 num_layers, num_heads, model_dim, head_dim,
//   vocab_size, max_seq_len | u64 construction seed | f64 arrays
// All integers and doubles little-endian; arrays row-major in the order
// token_embedding, position_embedding, per layer (wq wk wv wo w1 w2),
// unembedding.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cprune/engine.hpp"

namespace cprune {

inline constexpr std::uint32_t kModelFormatVersion = 1;

std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace cprune
