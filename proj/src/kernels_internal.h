#pragma once

// Helpers shared by the serial and OpenMP kernel translation units.

#include <cmath>
#include <span>
#include <vector>

#include "ropelab/kernels.h"

namespace ropelab::kernels::detail {

// cos / sin of r * freqs[p] for r = 0 .. max_r.
struct RotaryTable {
  int planes = 0;
  std::vector<Real> cos;
  std::vector<Real> sin;

  RotaryTable(std::span<const Real> freqs, int max_r);
  const Real* cos_row(int r) const { return cos.data() + std::size_t(r) * planes; }
  const Real* sin_row(int r) const { return sin.data() + std::size_t(r) * planes; }
};

inline int mapped_distance(const AttentionPattern& pat, int d) {
  return pat.distance_map.empty() ? d : pat.distance_map[std::size_t(d)];
}

void check_attention_args(const AttentionProblem& p, std::size_t q,
                          std::size_t k, std::size_t v, std::size_t out);
void check_landmark_args(const LandmarkProblem& p, std::size_t q, std::size_t k,
                         std::size_t v, std::size_t out);

// Rows of head h rotated by their own position: dst is [n x d_k].
void rotate_head(std::span<const Real> src, int n, int stride, int col0,
                 int d_k, std::span<const Real> freqs, Real sign,
                 std::vector<Real>& dst);

// Landmark attention for one head. `rows` receives per-query saved state.
void landmark_head_forward(const LandmarkProblem& p, int h,
                           std::span<const Real> q, std::span<const Real> k,
                           std::span<const Real> v, std::span<Real> out,
                           std::vector<LandmarkSaved::Row>* rows);
void landmark_head_backward(const LandmarkProblem& p, int h,
                            std::span<const Real> q, std::span<const Real> k,
                            std::span<const Real> v,
                            const std::vector<LandmarkSaved::Row>& rows,
                            std::span<const Real> dout, std::span<Real> dq,
                            std::span<Real> dk, std::span<Real> dv,
                            std::span<Real> doffset);

}  // namespace ropelab::kernels::detail
