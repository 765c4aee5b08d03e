#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cprune/engine.hpp"
#include "cprune/kernels.hpp"
#include "reference.hpp"

using namespace cprune;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

class BackendGuard {
 public:
  explicit BackendGuard(kernels::Backend b) : prev_(kernels::backend()) { kernels::set_backend(b); }
  ~BackendGuard() { kernels::set_backend(prev_); }

 private:
  kernels::Backend prev_;
};

}  // namespace

TEST(Kernels, MatmulMatchesNaiveProduct) {
  const std::size_t n = 7, in = 5, out = 3;
  const auto x = random_vec(n * in, 1), w = random_vec(in * out, 2);
  std::vector<double> y(n * out);
  kernels::serial::matmul(x.data(), w.data(), y.data(), n, in, out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double s = 0;
      for (std::size_t k = 0; k < in; ++k) s += x[i * in + k] * w[k * out + o];
      EXPECT_NEAR(y[i * out + o], s, 1e-12);
    }
}

TEST(Kernels, OmpMatmulIsBitwiseSerial) {
  const std::size_t n = 300, in = 64, out = 256;
  const auto x = random_vec(n * in, 3), w = random_vec(in * out, 4);
  std::vector<double> a(n * out), b(n * out);
  kernels::serial::matmul(x.data(), w.data(), a.data(), n, in, out);
  kernels::omp::matmul(x.data(), w.data(), b.data(), n, in, out);
  EXPECT_EQ(a, b);
}

TEST(Kernels, OmpAttentionIsBitwiseSerial) {
  const std::size_t n = 200, stride = 32, dim = 16;
  const auto q = random_vec(n * stride, 5), k = random_vec(n * stride, 6), v = random_vec(n * stride, 7);
  std::vector<double> pa(n * n), pb(n * n), oa(n * stride), ob(n * stride);
  kernels::serial::attention_head(q.data(), k.data(), v.data(), n, n, stride, 16, dim, 0, pa.data(),
                                  oa.data());
  kernels::omp::attention_head(q.data(), k.data(), v.data(), n, n, stride, 16, dim, 0, pb.data(),
                               ob.data());
  EXPECT_EQ(pa, pb);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 16; d < 32; ++d) EXPECT_EQ(oa[i * stride + d], ob[i * stride + d]);
}

TEST(Kernels, AttentionRowsAreCausalAndNormalized) {
  const std::size_t n = 9, dim = 4;
  const auto q = random_vec(n * dim, 8), k = random_vec(n * dim, 9), v = random_vec(n * dim, 10);
  std::vector<double> p(n * n), o(n * dim);
  kernels::serial::attention_head(q.data(), k.data(), v.data(), n, n, dim, 0, dim, 0, p.data(),
                                  o.data());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) {
      if (c > i) EXPECT_EQ(p[i * n + c], 0.0);
      EXPECT_GE(p[i * n + c], 0.0);
      s += p[i * n + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Kernels, SoftmaxIsStableForLargeLogits) {
  std::vector<double> v{1000.0, 1000.0, -1000.0};
  kernels::softmax(v);
  EXPECT_NEAR(v[0], 0.5, 1e-15);
  EXPECT_NEAR(v[1], 0.5, 1e-15);
  EXPECT_EQ(v[2], 0.0);
}

TEST(Kernels, BackendsGiveBitwiseIdenticalGeneration) {
  const Model m = build_model(reference::toy_spec(3, 4, 8, 40, 200), 11);
  TokenLayout layout{120, 6, {}};
  std::mt19937_64 rng(12);
  for (std::size_t i = 0; i < layout.size(); ++i) layout.token_ids.push_back(rng() % 40);
  GenerationResult a, b;
  {
    BackendGuard g(kernels::Backend::serial);
    a = generate(m, layout, 4);
  }
  {
    BackendGuard g(kernels::Backend::omp);
    b = generate(m, layout, 4);
  }
  EXPECT_EQ(a.generated_ids, b.generated_ids);
  EXPECT_EQ(a.step_probs, b.step_probs);
}
