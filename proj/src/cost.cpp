#include "cprune/cost.hpp"

namespace cprune {

namespace {

double layer_macs(const ModelSpec& s, double n) {
  const auto C = static_cast<double>(s.model_dim);
  const auto F = static_cast<double>(s.ffn_dim());
  return 4 * n * C * C + 2 * n * n * C + 2 * n * C * F;
}

}  // namespace

double flops_forward(const ModelSpec& spec, std::span<const std::size_t> lens,
                     std::optional<std::size_t> logits_rows) {
  double macs = 0;
  std::size_t top = 0;
  for (std::size_t n : lens) {
    if (n == 0) continue;
    macs += layer_macs(spec, static_cast<double>(n));
    top = n;
  }
  const auto rows = static_cast<double>(logits_rows.value_or(top));
  macs += rows * static_cast<double>(spec.model_dim) * static_cast<double>(spec.vocab_size);
  return 2 * macs;
}

double flops_pass(const ModelSpec& spec, const PassShape& shape) {
  return flops_forward(spec, shape.layer_lengths, shape.logits_rows);
}

double flops_decode_step(const ModelSpec& spec, std::span<const std::size_t> ctx) {
  const auto C = static_cast<double>(spec.model_dim);
  const auto F = static_cast<double>(spec.ffn_dim());
  double macs = 0;
  for (std::size_t m : ctx) macs += 4 * C * C + 2 * static_cast<double>(m) * C + 2 * C * F;
  macs += C * static_cast<double>(spec.vocab_size);
  return 2 * macs;
}

double flops_decode(const ModelSpec& spec, std::span<const DecodeShape> steps) {
  double total = 0;
  for (const auto& s : steps) total += flops_decode_step(spec, s.context_lengths);
  return total;
}

std::vector<std::size_t> pruned_lengths(std::size_t num_layers, std::size_t n_visual,
                                        std::size_t n_rest, std::size_t n_kept, std::size_t cut) {
  std::vector<std::size_t> lens(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l)
    lens[l] = (l < cut ? n_visual : n_kept) + n_rest;
  return lens;
}

double flops_generation(const ModelSpec& spec, std::size_t n_visual, std::size_t n_prompt,
                        std::size_t n_gen) {
  const std::size_t n = n_visual + n_prompt;
  std::vector<std::size_t> lens(spec.num_layers, n);
  double total = flops_forward(spec, lens, 1);
  for (std::size_t i = 1; i <= n_gen; ++i) {
    std::vector<std::size_t> ctx(spec.num_layers, n + i);
    total += flops_decode_step(spec, ctx);
  }
  return total;
}

double flops_consistency(const ModelSpec& spec, std::size_t n_kept, std::size_t n_prompt,
                         std::size_t n_gen, std::size_t cut) {
  std::vector<std::size_t> lens(spec.num_layers, 0);
  for (std::size_t l = cut; l < spec.num_layers; ++l) lens[l] = n_kept + n_prompt + n_gen;
  return flops_forward(spec, lens, n_gen);
}

}  // namespace cprune
