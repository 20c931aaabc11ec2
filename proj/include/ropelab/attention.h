#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ropelab/kernels.h"
#include "ropelab/rope.h"
#include "ropelab/tensor.h"

namespace ropelab {

enum class AttentionKind {
  kExact,
  kLmInfinite,
  kSelfExtend,
  kLandmark,
  kBlockwiseShifted,
};

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& name);

// Exact attention or one of the approximations, with their parameters.
//   G      global-memory size (LM-Infinite)
//   M      local window (LM-Infinite) / neighbour window (Self-Extend)
//   N      group size (Self-Extend)
//   B      block size (blockwise) / chunk size (Landmark)
//   top_n  chunks retrieved per query (Landmark)
struct AttentionSpec {
  AttentionKind kind = AttentionKind::kExact;
  long C = 0;
  int G = 0;
  int M = 0;
  int N = 1;
  int B = 0;
  int top_n = 1;
  bool causal = true;
  // Blockwise-shifted attention only approximates during training.
  bool full_attention_at_inference = true;

  void validate() const;
  // Longest sequence this spec can address; -1 for unbounded.
  long max_length() const;
};

enum class AttentionMode { kTrain, kInference };

// min(n - m, C) for a query at n and key at m.
long lm_infinite_relpos(long n, long m, long C);

// Row-major boolean matrix; entry (i, j) is visible.
struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> cells;
  bool at(int i, int j) const { return cells[std::size_t(i) * cols + j] != 0; }
  int row_count(int i) const;
};

BoolMatrix lm_infinite_mask(int C_prime, int G, int M);

// Distance remap: identity inside the neighbour window, floor-grouped beyond.
long self_extend_relpos(long delta, long M, long N);
long self_extend_max_length(long C, long M, long N);

// Visibility and distance remapping for one head. `shifted` selects the
// half-block offset used by the second half of heads in blockwise attention.
kernels::AttentionPattern make_pattern(const AttentionSpec& spec, int n,
                                       bool shifted);

struct AttentionOptions {
  int heads = 1;
  // Independent sequences stacked along rows, each of rows / batch tokens.
  int batch = 1;
  AttentionMode mode = AttentionMode::kInference;
  // [heads x d_k], added to every landmark key; optional.
  Tensor landmark_offset;
};

// Multi-head attention over q, k, v of shape [batch*n x heads*d_k] with RoPE
// at the given effective frequencies. Blockwise kinds shift the second half
// of the heads by B/2.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionSpec& spec,
                            std::span<const Real> freqs,
                            const AttentionOptions& options);

// Effective attention weights of one head as a dense [n x n] matrix.
std::vector<Real> attention_weights(const Tensor& q, const Tensor& k,
                                    const Tensor& v, int heads, int head,
                                    const AttentionSpec& spec,
                                    std::span<const Real> freqs,
                                    AttentionMode mode);

// Single-head conveniences over [C' x d_k] operands.
Tensor attend_exact(const Tensor& q, const Tensor& k, const Tensor& v,
                    const FrequencyBasis& basis, const FrequencyScaling& scaling);
Tensor attend_lm_infinite(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSpec& spec, const FrequencyBasis& basis,
                          const FrequencyScaling& scaling);
Tensor attend_self_extend(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSpec& spec, const FrequencyBasis& basis,
                          const FrequencyScaling& scaling);
Tensor attend_blockwise_shifted(const Tensor& q, const Tensor& k,
                                const Tensor& v, const AttentionSpec& spec,
                                bool shifted, const FrequencyBasis& basis,
                                const FrequencyScaling& scaling);
Tensor attend_landmark(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionSpec& spec, const FrequencyBasis& basis,
                       const FrequencyScaling& scaling,
                       const Tensor& landmark_offset = {});

// A1 = softmax(Q L^T / sqrt(d_k)) with chunk-causal masking: query i sees
// chunks 0 .. i / block. Masked entries are zero.
Tensor landmark_stage1(const Tensor& q, const Tensor& landmarks, int block);
std::vector<int> landmark_select_topn(std::span<const Real> weights, int top_n);

// Multiply-accumulates spent on attention scores for one head.
std::uint64_t attention_flops(const AttentionSpec& spec, int C_prime, int d_k);

}  // namespace ropelab
