#pragma once

// Analytic FLOPs model. One multiply-accumulate counts as 2 FLOPs.
//   per layer, n rows:  4 n C^2 + 2 n^2 C + 2 n C C_ff   (MACs, C_ff = 4C)
//   unembedding:        rows * C * C_T                   (MACs)
//   decode step, m ctx: 4 C^2 + 2 m C + 2 C C_ff per layer, plus C * C_T

#include <cstddef>
#include <optional>
#include <span>

#include "cprune/engine.hpp"

namespace cprune {

// Layers with length 0 are skipped. logits_rows defaults to the top layer's n.
double flops_forward(const ModelSpec& spec, std::span<const std::size_t> seq_len_per_layer,
                     std::optional<std::size_t> logits_rows = std::nullopt);

double flops_pass(const ModelSpec& spec, const PassShape& shape);

double flops_decode_step(const ModelSpec& spec, std::span<const std::size_t> context_lengths);

double flops_decode(const ModelSpec& spec, std::span<const DecodeShape> steps);

// Per-layer lengths of a prefill over n_visual + n_rest rows pruned to
// n_kept visual rows before engine layer `cut` (cut >= L: no pruning).
std::vector<std::size_t> pruned_lengths(std::size_t num_layers, std::size_t n_visual,
                                        std::size_t n_rest, std::size_t n_kept, std::size_t cut);

// Unpruned autoregressive generation of n_gen tokens, each fed through a
// decode step, after a prefill of n_visual + n_prompt rows.
double flops_generation(const ModelSpec& spec, std::size_t n_visual, std::size_t n_prompt,
                        std::size_t n_gen);

// Consistency pass reusing the checkpoint at `cut`: layers >= cut over
// n_kept + n_prompt + n_gen rows, n_gen logit rows.
double flops_consistency(const ModelSpec& spec, std::size_t n_kept, std::size_t n_prompt,
                         std::size_t n_gen, std::size_t cut);

}  // namespace cprune
