#pragma once

// Compute kernels behind the differentiable ops. Every kernel exists twice:
// `serial::` is the plain reference kept for testing, `omp::` is the
// OpenMP-parallel version used by the library. Both must agree to rounding.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "ropelab/tensor.h"

namespace ropelab::kernels {

// ---------------------------------------------------------------------------
// GEMM. Row-major; `accumulate` adds into c instead of overwriting it.

struct GemmDims {
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
};

// ---------------------------------------------------------------------------
// Attention.
//
// A pattern lists, for each query row i, up to two half-open key spans and
// optionally remaps the distance i - j before it enters the rotary product.
// Scores are (R(r) q_i) . k_j / sqrt(d_k) with r = distance_map[i - j]
// (identity when the map is empty), which equals RoPE applied to q at i and
// k at j when r = i - j.
struct AttentionPattern {
  int n = 0;
  std::vector<std::array<int, 4>> spans;  // per row: b0, e0, b1, e1
  std::vector<int> distance_map;          // size n, or empty for identity

  int row_count(int i) const {
    const auto& s = spans[static_cast<std::size_t>(i)];
    return (s[1] - s[0]) + (s[3] - s[2]);
  }
  std::size_t nnz() const;
  // Prefix offsets into a flat per-pair buffer, size n + 1.
  std::vector<std::size_t> row_offsets() const;
};

// Problem description shared by forward and backward. q, k, v, out are
// [n x heads*d_k] row-major; head h owns columns [h*d_k, (h+1)*d_k).
struct AttentionProblem {
  int n = 0;
  int heads = 1;
  int d_k = 0;
  std::span<const Real> freqs;                        // d_k / 2
  std::vector<const AttentionPattern*> head_pattern;  // one per head
};

// Attention probabilities kept for backward; one flat buffer per head laid out
// by the head pattern's row_offsets().
struct AttentionSaved {
  std::vector<std::vector<Real>> probs;
};

// Two-stage chunked attention. The landmark of chunk c seen by query i is the
// mean of the (unrotated) keys of c visible to i plus a per-head offset.
struct LandmarkProblem {
  int n = 0;
  int heads = 1;
  int d_k = 0;
  int block = 0;
  int top_n = 1;
  std::span<const Real> freqs;
  std::span<const Real> landmark_offset;  // heads * d_k, may be empty
};

struct LandmarkSaved {
  // Per head, per query: stage-1 probabilities over visible chunks,
  // selected chunk ids, renormalised weights, and stage-2 probabilities over
  // the visible keys of each selected chunk (concatenated in selection order).
  struct Row {
    std::vector<Real> stage1;
    std::vector<int> selected;
    std::vector<Real> weights;
    std::vector<Real> stage2;
  };
  std::vector<std::vector<Row>> rows;  // [head][query]
};

namespace serial {

void gemm_nn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);
void gemm_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);
void gemm_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);

void attention_forward(const AttentionProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> out, AttentionSaved* saved);
void attention_backward(const AttentionProblem& p, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        const AttentionSaved& saved, std::span<const Real> dout,
                        std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv);

void landmark_forward(const LandmarkProblem& p, std::span<const Real> q,
                      std::span<const Real> k, std::span<const Real> v,
                      std::span<Real> out, LandmarkSaved* saved);
void landmark_backward(const LandmarkProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       const LandmarkSaved& saved, std::span<const Real> dout,
                       std::span<Real> dq, std::span<Real> dk, std::span<Real> dv,
                       std::span<Real> doffset);

}  // namespace serial

namespace omp {

void gemm_nn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);
void gemm_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);
void gemm_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate);

void attention_forward(const AttentionProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> out, AttentionSaved* saved);
void attention_backward(const AttentionProblem& p, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        const AttentionSaved& saved, std::span<const Real> dout,
                        std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv);

void landmark_forward(const LandmarkProblem& p, std::span<const Real> q,
                      std::span<const Real> k, std::span<const Real> v,
                      std::span<Real> out, LandmarkSaved* saved);
void landmark_backward(const LandmarkProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       const LandmarkSaved& saved, std::span<const Real> dout,
                       std::span<Real> dq, std::span<Real> dk, std::span<Real> dv,
                       std::span<Real> doffset);

}  // namespace omp

// Top-n chunk selection on one stage-1 row; ties go to the more recent chunk.
// Returned indices are ascending.
std::vector<int> select_top_n(std::span<const Real> weights, int top_n);

}  // namespace ropelab::kernels
