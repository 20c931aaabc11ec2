// Reference kernels: straightforward loops, no blocking, no threads. Every
// score is computed from the mapped distance with freshly evaluated
// trigonometry so that this path shares as little as possible with omp::.

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels_internal.h"
#include "ropelab/error.h"

namespace ropelab::kernels::serial {

namespace {

void check_gemm(std::size_t a, std::size_t b, std::size_t c, GemmDims d) {
  if (a != d.m * d.k || b != d.k * d.n || c != d.m * d.n) {
    throw DimensionError("gemm operand sizes do not match dims");
  }
}

// Pairwise rotary score (R(r) q) . k and its partials.
Real rotary_score(const Real* q, const Real* k, int r, std::span<const Real> freqs) {
  Real s = 0;
  for (std::size_t p = 0; p < freqs.size(); ++p) {
    const Real angle = static_cast<Real>(r) * freqs[p];
    const Real c = std::cos(angle), sn = std::sin(angle);
    const Real q0 = q[2 * p], q1 = q[2 * p + 1];
    const Real k0 = k[2 * p], k1 = k[2 * p + 1];
    s += c * (q0 * k0 + q1 * k1) + sn * (q0 * k1 - q1 * k0);
  }
  return s;
}

void rotary_score_grad(const Real* q, const Real* k, int r,
                       std::span<const Real> freqs, Real g, Real* dq, Real* dk) {
  for (std::size_t p = 0; p < freqs.size(); ++p) {
    const Real angle = static_cast<Real>(r) * freqs[p];
    const Real c = std::cos(angle), sn = std::sin(angle);
    const Real q0 = q[2 * p], q1 = q[2 * p + 1];
    const Real k0 = k[2 * p], k1 = k[2 * p + 1];
    dq[2 * p] += g * (c * k0 + sn * k1);
    dq[2 * p + 1] += g * (c * k1 - sn * k0);
    dk[2 * p] += g * (c * q0 - sn * q1);
    dk[2 * p + 1] += g * (c * q1 + sn * q0);
  }
}

template <typename F>
void for_each_key(const AttentionPattern& pat, int i, F&& f) {
  const auto& s = pat.spans[std::size_t(i)];
  for (int j = s[0]; j < s[1]; ++j) f(j);
  for (int j = s[2]; j < s[3]; ++j) f(j);
}

}  // namespace

void gemm_nn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[p * d.n + j];
      c[i * d.n + j] = (accumulate ? c[i * d.n + j] : Real{0}) + s;
    }
  }
}

void gemm_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[j * d.k + p];
      c[i * d.n + j] = (accumulate ? c[i * d.n + j] : Real{0}) + s;
    }
  }
}

void gemm_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[p * d.m + i] * b[p * d.n + j];
      c[i * d.n + j] = (accumulate ? c[i * d.n + j] : Real{0}) + s;
    }
  }
}

void attention_forward(const AttentionProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> out, AttentionSaved* saved) {
  detail::check_attention_args(p, q.size(), k.size(), v.size(), out.size());
  const int stride = p.heads * p.d_k;
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(p.d_k));
  if (saved) saved->probs.assign(std::size_t(p.heads), {});
  for (int h = 0; h < p.heads; ++h) {
    const auto& pat = *p.head_pattern[std::size_t(h)];
    std::vector<Real> probs;
    probs.reserve(pat.nnz());
    for (int i = 0; i < p.n; ++i) {
      if (pat.row_count(i) == 0) {
        throw DegenerateRowError("attention row " + std::to_string(i) +
                                 " has no visible key");
      }
      const Real* qi = q.data() + std::size_t(i) * stride + h * p.d_k;
      std::vector<Real> row;
      for_each_key(pat, i, [&](int j) {
        const Real* kj = k.data() + std::size_t(j) * stride + h * p.d_k;
        const int r = detail::mapped_distance(pat, i - j);
        row.push_back(rotary_score(qi, kj, r, p.freqs) * scale);
      });
      const Real m = *std::max_element(row.begin(), row.end());
      Real z = 0;
      for (auto& e : row) {
        e = std::exp(e - m);
        z += e;
      }
      for (auto& e : row) e /= z;
      Real* oi = out.data() + std::size_t(i) * stride + h * p.d_k;
      std::fill(oi, oi + p.d_k, Real{0});
      std::size_t t = 0;
      for_each_key(pat, i, [&](int j) {
        const Real* vj = v.data() + std::size_t(j) * stride + h * p.d_k;
        for (int c = 0; c < p.d_k; ++c) oi[c] += row[t] * vj[c];
        ++t;
      });
      probs.insert(probs.end(), row.begin(), row.end());
    }
    if (saved) saved->probs[std::size_t(h)] = std::move(probs);
  }
}

void attention_backward(const AttentionProblem& p, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        const AttentionSaved& saved, std::span<const Real> dout,
                        std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv) {
  detail::check_attention_args(p, q.size(), k.size(), v.size(), dout.size());
  const int stride = p.heads * p.d_k;
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(p.d_k));
  for (int h = 0; h < p.heads; ++h) {
    const auto& pat = *p.head_pattern[std::size_t(h)];
    const auto offs = pat.row_offsets();
    const auto& probs = saved.probs[std::size_t(h)];
    for (int i = 0; i < p.n; ++i) {
      const Real* qi = q.data() + std::size_t(i) * stride + h * p.d_k;
      const Real* doi = dout.data() + std::size_t(i) * stride + h * p.d_k;
      const Real* pi = probs.data() + offs[std::size_t(i)];
      std::vector<Real> dp;
      Real pdp = 0;
      std::size_t t = 0;
      for_each_key(pat, i, [&](int j) {
        const Real* vj = v.data() + std::size_t(j) * stride + h * p.d_k;
        Real* dvj = dv.data() + std::size_t(j) * stride + h * p.d_k;
        Real g = 0;
        for (int c = 0; c < p.d_k; ++c) {
          g += doi[c] * vj[c];
          dvj[c] += pi[t] * doi[c];
        }
        dp.push_back(g);
        pdp += pi[t] * g;
        ++t;
      });
      t = 0;
      Real* dqi = dq.data() + std::size_t(i) * stride + h * p.d_k;
      for_each_key(pat, i, [&](int j) {
        const Real ds = pi[t] * (dp[t] - pdp) * scale;
        const Real* kj = k.data() + std::size_t(j) * stride + h * p.d_k;
        Real* dkj = dk.data() + std::size_t(j) * stride + h * p.d_k;
        rotary_score_grad(qi, kj, detail::mapped_distance(pat, i - j), p.freqs,
                          ds, dqi, dkj);
        ++t;
      });
    }
  }
}

void landmark_forward(const LandmarkProblem& p, std::span<const Real> q,
                      std::span<const Real> k, std::span<const Real> v,
                      std::span<Real> out, LandmarkSaved* saved) {
  detail::check_landmark_args(p, q.size(), k.size(), v.size(), out.size());
  if (saved) saved->rows.assign(std::size_t(p.heads), {});
  for (int h = 0; h < p.heads; ++h) {
    detail::landmark_head_forward(p, h, q, k, v, out,
                                  saved ? &saved->rows[std::size_t(h)] : nullptr);
  }
}

void landmark_backward(const LandmarkProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       const LandmarkSaved& saved, std::span<const Real> dout,
                       std::span<Real> dq, std::span<Real> dk, std::span<Real> dv,
                       std::span<Real> doffset) {
  detail::check_landmark_args(p, q.size(), k.size(), v.size(), dout.size());
  for (int h = 0; h < p.heads; ++h) {
    detail::landmark_head_backward(p, h, q, k, v, saved.rows[std::size_t(h)],
                                   dout, dq, dk, dv, doffset);
  }
}

}  // namespace ropelab::kernels::serial
