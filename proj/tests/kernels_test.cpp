#include <gtest/gtest.h>

#include "ropelab/attention.h"
#include "ropelab/kernels.h"
#include "test_util.h"

namespace ropelab::kernels {
namespace {

using testing::max_abs_diff;
using testing::random_vector;

constexpr Real kTol = 1e-12;

TEST(GemmTest, SerialAndParallelAgree) {
  const GemmDims d{37, 29, 41};
  const auto a = random_vector(d.m * d.k, 1);
  const auto b = random_vector(d.k * d.n, 2);
  const auto bt = random_vector(d.n * d.k, 3);
  const auto at = random_vector(d.k * d.m, 4);
  for (bool acc : {false, true}) {
    std::vector<Real> s(d.m * d.n, 0.5), p(d.m * d.n, 0.5);
    serial::gemm_nn(a, b, s, d, acc);
    omp::gemm_nn(a, b, p, d, acc);
    EXPECT_LT(max_abs_diff(s, p), kTol);
    serial::gemm_nt(a, bt, s, d, acc);
    omp::gemm_nt(a, bt, p, d, acc);
    EXPECT_LT(max_abs_diff(s, p), kTol);
    serial::gemm_tn(at, b, s, d, acc);
    omp::gemm_tn(at, b, p, d, acc);
    EXPECT_LT(max_abs_diff(s, p), kTol);
  }
}

TEST(GemmTest, SerialMatchesTripleLoop) {
  const GemmDims d{5, 7, 3};
  const auto a = random_vector(d.m * d.k, 5);
  const auto b = random_vector(d.k * d.n, 6);
  std::vector<Real> c(d.m * d.n);
  serial::gemm_nn(a, b, c, d, false);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      Real acc = 0;
      for (std::size_t t = 0; t < d.k; ++t) acc += a[i * d.k + t] * b[t * d.n + j];
      EXPECT_NEAR(c[i * d.n + j], acc, 1e-12);
    }
  }
}

struct KernelCase {
  AttentionKind kind;
  bool shifted;
};

class AttentionKernelTest : public ::testing::TestWithParam<KernelCase> {};

TEST_P(AttentionKernelTest, SerialAndParallelAgree) {
  const int n = 16, heads = 2, d_k = 4;
  AttentionSpec spec;
  spec.kind = GetParam().kind;
  spec.C = 8;
  spec.G = 2;
  spec.M = 4;
  spec.N = 3;
  spec.B = 4;
  const auto pattern = make_pattern(spec, n, GetParam().shifted);
  const auto freqs = effective_frequencies(frequency_basis(d_k), scaling_ntk(8, 32, d_k));
  AttentionProblem p;
  p.n = n;
  p.heads = heads;
  p.d_k = d_k;
  p.freqs = freqs;
  p.head_pattern = {&pattern, &pattern};
  const std::size_t size = std::size_t(n) * heads * d_k;
  const auto q = random_vector(size, 7), k = random_vector(size, 8), v = random_vector(size, 9);
  const auto dout = random_vector(size, 10);

  std::vector<Real> out_s(size), out_p(size);
  AttentionSaved saved_s, saved_p;
  serial::attention_forward(p, q, k, v, out_s, &saved_s);
  omp::attention_forward(p, q, k, v, out_p, &saved_p);
  EXPECT_LT(max_abs_diff(out_s, out_p), kTol);

  std::vector<Real> gs[3] = {std::vector<Real>(size), std::vector<Real>(size),
                             std::vector<Real>(size)};
  std::vector<Real> gp[3] = {std::vector<Real>(size), std::vector<Real>(size),
                             std::vector<Real>(size)};
  serial::attention_backward(p, q, k, v, saved_s, dout, gs[0], gs[1], gs[2]);
  omp::attention_backward(p, q, k, v, saved_p, dout, gp[0], gp[1], gp[2]);
  for (int t = 0; t < 3; ++t) EXPECT_LT(max_abs_diff(gs[t], gp[t]), kTol);
}

INSTANTIATE_TEST_SUITE_P(Patterns, AttentionKernelTest,
                         ::testing::Values(KernelCase{AttentionKind::kExact, false},
                                           KernelCase{AttentionKind::kLmInfinite, false},
                                           KernelCase{AttentionKind::kSelfExtend, false},
                                           KernelCase{AttentionKind::kBlockwiseShifted, false},
                                           KernelCase{AttentionKind::kBlockwiseShifted, true}));

TEST(LandmarkKernelTest, SerialAndParallelAgree) {
  const int n = 12, heads = 2, d_k = 4;
  const auto freqs = effective_frequencies(frequency_basis(d_k), scaling_none(d_k));
  const auto offset = random_vector(heads * d_k, 11, 0.1);
  LandmarkProblem p;
  p.n = n;
  p.heads = heads;
  p.d_k = d_k;
  p.block = 4;
  p.top_n = 2;
  p.freqs = freqs;
  p.landmark_offset = offset;
  const std::size_t size = std::size_t(n) * heads * d_k;
  const auto q = random_vector(size, 12), k = random_vector(size, 13), v = random_vector(size, 14);
  const auto dout = random_vector(size, 15);

  std::vector<Real> out_s(size), out_p(size);
  LandmarkSaved saved_s, saved_p;
  serial::landmark_forward(p, q, k, v, out_s, &saved_s);
  omp::landmark_forward(p, q, k, v, out_p, &saved_p);
  EXPECT_LT(max_abs_diff(out_s, out_p), kTol);

  std::vector<Real> gs[4] = {std::vector<Real>(size), std::vector<Real>(size),
                             std::vector<Real>(size), std::vector<Real>(offset.size())};
  std::vector<Real> gp[4] = {std::vector<Real>(size), std::vector<Real>(size),
                             std::vector<Real>(size), std::vector<Real>(offset.size())};
  serial::landmark_backward(p, q, k, v, saved_s, dout, gs[0], gs[1], gs[2], gs[3]);
  omp::landmark_backward(p, q, k, v, saved_p, dout, gp[0], gp[1], gp[2], gp[3]);
  for (int t = 0; t < 4; ++t) EXPECT_LT(max_abs_diff(gs[t], gp[t]), kTol);
}

TEST(SelectTopNTest, RecencyBreaksTies) {
  EXPECT_EQ(select_top_n(std::vector<Real>{0.25, 0.25, 0.25, 0.25}, 2),
            (std::vector<int>{2, 3}));
  EXPECT_EQ(select_top_n(std::vector<Real>{0.6, 0.1, 0.3}, 2), (std::vector<int>{0, 2}));
}

}  // namespace
}  // namespace ropelab::kernels
