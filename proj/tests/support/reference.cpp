#include "reference.hpp"

#include <algorithm>
#include <cmath>

namespace reference {

using cprune::Matrix;

namespace {

std::vector<std::vector<double>> project(const std::vector<std::vector<double>>& x,
                                         const Matrix& w) {
  std::vector<std::vector<double>> y(x.size(), std::vector<double>(w.cols, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.cols; ++o) {
      double s = 0;
      for (std::size_t k = 0; k < w.rows; ++k) s += x[i][k] * w(k, o);
      y[i][o] = s;
    }
  return y;
}

}  // namespace

std::vector<double> softmax(const std::vector<double>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - m);
  for (double& v : out) v /= z;
  return out;
}

Run forward(const cprune::Model& model, const std::vector<cprune::TokenId>& ids,
            std::size_t n_visual, const std::optional<Cut>& cut) {
  const auto& s = model.spec();
  const std::size_t C = s.model_dim, hd = s.head_dim;
  std::vector<std::vector<double>> h(ids.size(), std::vector<double>(C));
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    pos[i] = i;
    for (std::size_t d = 0; d < C; ++d)
      h[i][d] = model.token_embedding()(ids[i], d) + model.position_embedding()(i, d);
  }

  Run run;
  for (std::size_t j = 0; j < s.num_layers; ++j) {
    if (cut && cut->layer == j) {
      std::vector<std::vector<double>> nh;
      std::vector<std::size_t> np;
      for (std::size_t i = 0; i < pos.size(); ++i) {
        const bool keep = pos[i] >= n_visual ||
                          std::find(cut->kept.begin(), cut->kept.end(), pos[i]) != cut->kept.end();
        if (keep) {
          nh.push_back(h[i]);
          np.push_back(pos[i]);
        }
      }
      h = nh;
      pos = np;
    }
    const auto& w = model.layers()[j];
    const auto q = project(h, w.wq), k = project(h, w.wk), v = project(h, w.wv);
    const std::size_t n = h.size();
    std::vector<std::vector<double>> mixed(n, std::vector<double>(C, 0.0));
    run.attention.emplace_back();
    for (std::size_t head = 0; head < s.num_heads; ++head) {
      std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
      for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> logits(r + 1);
        for (std::size_t c = 0; c <= r; ++c) {
          double dot = 0;
          for (std::size_t d = 0; d < hd; ++d) dot += q[r][head * hd + d] * k[c][head * hd + d];
          logits[c] = dot / std::sqrt(static_cast<double>(hd));
        }
        const auto p = softmax(logits);
        for (std::size_t c = 0; c <= r; ++c) {
          a[r][c] = p[c];
          for (std::size_t d = 0; d < hd; ++d) mixed[r][head * hd + d] += p[c] * v[c][head * hd + d];
        }
      }
      run.attention.back().push_back(std::move(a));
    }
    run.positions.push_back(pos);
    const auto o = project(mixed, w.wo);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t d = 0; d < C; ++d) h[r][d] += o[r][d];
    auto up = project(h, w.w1);
    for (auto& row : up)
      for (double& x : row) x = x > 0 ? x : 0;
    const auto down = project(up, w.w2);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t d = 0; d < C; ++d) h[r][d] += down[r][d];
  }
  run.final_positions = pos;
  run.logits = project(h, model.unembedding());
  return run;
}

Importance brute_force_importance(const Run& run, std::size_t n_visual, std::size_t n_prompt,
                                  const std::vector<std::size_t>& layers) {
  Importance imp{std::vector<double>(n_visual, 0.0), std::vector<double>(n_visual, 0.0),
                 std::vector<double>(n_visual, 0.0)};
  for (std::size_t j : layers) {
    const auto& pos = run.positions[j];
    for (const auto& a : run.attention[j])
      for (std::size_t r = 0; r < pos.size(); ++r) {
        if (pos[r] < n_visual) continue;
        const bool prompt = pos[r] < n_visual + n_prompt;
        for (std::size_t c = 0; c <= r; ++c) {
          if (pos[c] >= n_visual) continue;
          (prompt ? imp.prefill : imp.decode)[pos[c]] += a[r][c];
          if (pos[r] == n_visual + n_prompt - 1) imp.last_prompt[pos[c]] += a[r][c];
        }
      }
  }
  return imp;
}

cprune::ModelSpec toy_spec(std::size_t layers, std::size_t heads, std::size_t head_dim,
                           std::size_t vocab, std::size_t max_seq) {
  return cprune::ModelSpec{layers, heads, heads * head_dim, head_dim, vocab, max_seq};
}

}  // namespace reference
