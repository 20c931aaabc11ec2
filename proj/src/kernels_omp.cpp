#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "kernels_internal.h"
#include "ropelab/error.h"
#include "ropelab/rope.h"

namespace ropelab::kernels::omp {

namespace {

void check_gemm(std::size_t a, std::size_t b, std::size_t c, GemmDims d) {
  if (a != d.m * d.k || b != d.k * d.n || c != d.m * d.n) {
    throw DimensionError("gemm operand sizes do not match dims");
  }
}

template <typename F>
void for_each_span(const AttentionPattern& pat, int i, F&& f) {
  const auto& s = pat.spans[std::size_t(i)];
  if (s[1] > s[0]) f(s[0], s[1]);
  if (s[3] > s[2]) f(s[2], s[3]);
}

int max_mapped_distance(const AttentionPattern& pat) {
  if (pat.distance_map.empty()) return pat.n - 1;
  return *std::max_element(pat.distance_map.begin(), pat.distance_map.end());
}

// Per-head scratch: rotated or plain copies of the head's q and k.
struct HeadData {
  bool identity = true;
  std::vector<Real> q;   // [n x d_k]
  std::vector<Real> k;   // [n x d_k]
  std::vector<Real> kt;  // [d_k x n], identity path only
};

HeadData prepare_head(const AttentionProblem& p, int h, std::span<const Real> q,
                      std::span<const Real> k) {
  const auto& pat = *p.head_pattern[std::size_t(h)];
  const int stride = p.heads * p.d_k;
  HeadData hd;
  hd.identity = pat.distance_map.empty();
  if (hd.identity) {
    detail::rotate_head(q, p.n, stride, h * p.d_k, p.d_k, p.freqs, 1.0, hd.q);
    detail::rotate_head(k, p.n, stride, h * p.d_k, p.d_k, p.freqs, 1.0, hd.k);
    hd.kt.resize(hd.k.size());
    for (int j = 0; j < p.n; ++j) {
      for (int c = 0; c < p.d_k; ++c) {
        hd.kt[std::size_t(c) * p.n + j] = hd.k[std::size_t(j) * p.d_k + c];
      }
    }
  } else {
    hd.q.resize(std::size_t(p.n) * p.d_k);
    hd.k.resize(std::size_t(p.n) * p.d_k);
    for (int i = 0; i < p.n; ++i) {
      std::copy_n(q.data() + std::size_t(i) * stride + h * p.d_k, p.d_k,
                  hd.q.data() + std::size_t(i) * p.d_k);
      std::copy_n(k.data() + std::size_t(i) * stride + h * p.d_k, p.d_k,
                  hd.k.data() + std::size_t(i) * p.d_k);
    }
  }
  return hd;
}

inline Real table_score(const Real* q, const Real* k, const Real* cs,
                        const Real* sn, int planes) {
  Real s = 0;
  for (int t = 0; t < planes; ++t) {
    const Real q0 = q[2 * t], q1 = q[2 * t + 1];
    const Real k0 = k[2 * t], k1 = k[2 * t + 1];
    s += cs[t] * (q0 * k0 + q1 * k1) + sn[t] * (q0 * k1 - q1 * k0);
  }
  return s;
}

}  // namespace

namespace {

// c[rows i0..i0+R) += sum_p a(i, p) * b[p, :], with a(i, p) = pa[i*ai + p*ap].
// Four output rows share every load of a row of b.
template <int R>
void gemm_rows(const Real* __restrict pa, std::size_t ai, std::size_t ap,
               const Real* __restrict pb, Real* __restrict pc, std::size_t i0,
               GemmDims d) {
  Real* c[R];
  for (int r = 0; r < R; ++r) c[r] = pc + (i0 + std::size_t(r)) * d.n;
  for (std::size_t p = 0; p < d.k; ++p) {
    Real av[R];
    for (int r = 0; r < R; ++r) av[r] = pa[(i0 + std::size_t(r)) * ai + p * ap];
    const Real* __restrict bp = pb + p * d.n;
    if constexpr (R == 4) {
      Real* __restrict c0 = c[0];
      Real* __restrict c1 = c[1];
      Real* __restrict c2 = c[2];
      Real* __restrict c3 = c[3];
#pragma omp simd
      for (std::size_t j = 0; j < d.n; ++j) {
        const Real bj = bp[j];
        c0[j] += av[0] * bj;
        c1[j] += av[1] * bj;
        c2[j] += av[2] * bj;
        c3[j] += av[3] * bj;
      }
    } else {
      Real* __restrict c0 = c[0];
#pragma omp simd
      for (std::size_t j = 0; j < d.n; ++j) c0[j] += av[0] * bp[j];
    }
  }
}

void gemm_strided(const Real* pa, std::size_t ai, std::size_t ap, const Real* pb, Real* pc,
                  GemmDims d, bool accumulate) {
  if (!accumulate) std::fill(pc, pc + d.m * d.n, Real{0});
  const std::size_t blocks = d.m / 4;
#pragma omp parallel for schedule(static)
  for (std::size_t blk = 0; blk < blocks; ++blk) gemm_rows<4>(pa, ai, ap, pb, pc, blk * 4, d);
  for (std::size_t i = blocks * 4; i < d.m; ++i) gemm_rows<1>(pa, ai, ap, pb, pc, i, d);
}

}  // namespace

void gemm_nn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  gemm_strided(a.data(), d.k, 1, b.data(), c.data(), d, accumulate);
}

void gemm_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  std::vector<Real> bt(d.k * d.n);
  for (std::size_t j = 0; j < d.n; ++j) {
    for (std::size_t p = 0; p < d.k; ++p) bt[p * d.n + j] = b[j * d.k + p];
  }
  gemm_strided(a.data(), d.k, 1, bt.data(), c.data(), d, accumulate);
}

void gemm_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
             GemmDims d, bool accumulate) {
  check_gemm(a.size(), b.size(), c.size(), d);
  gemm_strided(a.data(), 1, d.m, b.data(), c.data(), d, accumulate);
}

void attention_forward(const AttentionProblem& p, std::span<const Real> q,
                       std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> out, AttentionSaved* saved) {
  detail::check_attention_args(p, q.size(), k.size(), v.size(), out.size());
  const int stride = p.heads * p.d_k;
  const int d_k = p.d_k;
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(d_k));
  if (saved) saved->probs.assign(std::size_t(p.heads), {});

  for (int h = 0; h < p.heads; ++h) {
    const auto& pat = *p.head_pattern[std::size_t(h)];
    for (int i = 0; i < p.n; ++i) {
      if (pat.row_count(i) == 0) {
        throw DegenerateRowError("attention row " + std::to_string(i) +
                                 " has no visible key");
      }
    }
    const HeadData hd = prepare_head(p, h, q, k);
    const auto offs = pat.row_offsets();
    std::vector<Real> probs(offs.back());
    std::unique_ptr<detail::RotaryTable> table;
    if (!hd.identity) {
      table = std::make_unique<detail::RotaryTable>(p.freqs, max_mapped_distance(pat));
    }

#pragma omp parallel for schedule(dynamic, 8)
    for (int i = 0; i < p.n; ++i) {
      Real* row = probs.data() + offs[std::size_t(i)];
      const Real* qi = hd.q.data() + std::size_t(i) * d_k;
      std::size_t t = 0;
      for_each_span(pat, i, [&](int b, int e) {
        Real* s = row + t;
        if (hd.identity) {
          std::fill(s, s + (e - b), Real{0});
          for (int c = 0; c < d_k; ++c) {
            const Real qc = qi[c];
            const Real* ktc = hd.kt.data() + std::size_t(c) * p.n;
            for (int j = b; j < e; ++j) s[j - b] += qc * ktc[j];
          }
        } else {
          for (int j = b; j < e; ++j) {
            const int r = detail::mapped_distance(pat, i - j);
            s[j - b] = table_score(qi, hd.k.data() + std::size_t(j) * d_k,
                                   table->cos_row(r), table->sin_row(r),
                                   table->planes);
          }
        }
        t += std::size_t(e - b);
      });
      const std::size_t count = t;
      Real m = -std::numeric_limits<Real>::infinity();
      for (std::size_t u = 0; u < count; ++u) {
        row[u] *= scale;
        m = std::max(m, row[u]);
      }
      Real z = 0;
      for (std::size_t u = 0; u < count; ++u) {
        row[u] = std::exp(row[u] - m);
        z += row[u];
      }
      const Real inv = Real{1} / z;
      for (std::size_t u = 0; u < count; ++u) row[u] *= inv;

      Real* oi = out.data() + std::size_t(i) * stride + h * d_k;
      std::fill(oi, oi + d_k, Real{0});
      t = 0;
      for_each_span(pat, i, [&](int b, int e) {
        for (int j = b; j < e; ++j) {
          const Real a = row[t + std::size_t(j - b)];
          const Real* vj = v.data() + std::size_t(j) * stride + h * d_k;
          for (int c = 0; c < d_k; ++c) oi[c] += a * vj[c];
        }
        t += std::size_t(e - b);
      });
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
  const int d_k = p.d_k;
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(d_k));

  // Heads write disjoint column ranges of dq / dk / dv.
#pragma omp parallel for schedule(static)
  for (int h = 0; h < p.heads; ++h) {
    const auto& pat = *p.head_pattern[std::size_t(h)];
    const HeadData hd = prepare_head(p, h, q, k);
    const auto offs = pat.row_offsets();
    const auto& probs = saved.probs[std::size_t(h)];
    std::unique_ptr<detail::RotaryTable> table;
    if (!hd.identity) {
      table = std::make_unique<detail::RotaryTable>(p.freqs, max_mapped_distance(pat));
    }
    std::vector<Real> gq(std::size_t(p.n) * d_k, 0), gk(std::size_t(p.n) * d_k, 0);
    std::vector<Real> dp;

    for (int i = 0; i < p.n; ++i) {
      const Real* pi = probs.data() + offs[std::size_t(i)];
      const Real* doi = dout.data() + std::size_t(i) * stride + h * d_k;
      const std::size_t count = offs[std::size_t(i) + 1] - offs[std::size_t(i)];
      dp.assign(count, 0);
      Real pdp = 0;
      std::size_t t = 0;
      for_each_span(pat, i, [&](int b, int e) {
        for (int j = b; j < e; ++j) {
          const Real* vj = v.data() + std::size_t(j) * stride + h * d_k;
          Real* dvj = dv.data() + std::size_t(j) * stride + h * d_k;
          const Real a = pi[t];
          Real g = 0;
          for (int c = 0; c < d_k; ++c) {
            g += doi[c] * vj[c];
            dvj[c] += a * doi[c];
          }
          dp[t] = g;
          pdp += a * g;
          ++t;
        }
      });

      const Real* qi = hd.q.data() + std::size_t(i) * d_k;
      Real* gqi = gq.data() + std::size_t(i) * d_k;
      t = 0;
      for_each_span(pat, i, [&](int b, int e) {
        for (int j = b; j < e; ++j) {
          const Real ds = pi[t] * (dp[t] - pdp) * scale;
          ++t;
          if (ds == Real{0}) continue;
          const Real* kj = hd.k.data() + std::size_t(j) * d_k;
          Real* gkj = gk.data() + std::size_t(j) * d_k;
          if (hd.identity) {
            for (int c = 0; c < d_k; ++c) {
              gqi[c] += ds * kj[c];
              gkj[c] += ds * qi[c];
            }
          } else {
            const int r = detail::mapped_distance(pat, i - j);
            const Real* cs = table->cos_row(r);
            const Real* sn = table->sin_row(r);
            for (int u = 0; u < table->planes; ++u) {
              const Real q0 = qi[2 * u], q1 = qi[2 * u + 1];
              const Real k0 = kj[2 * u], k1 = kj[2 * u + 1];
              gqi[2 * u] += ds * (cs[u] * k0 + sn[u] * k1);
              gqi[2 * u + 1] += ds * (cs[u] * k1 - sn[u] * k0);
              gkj[2 * u] += ds * (cs[u] * q0 - sn[u] * q1);
              gkj[2 * u + 1] += ds * (cs[u] * q1 + sn[u] * q0);
            }
          }
        }
      });
    }

    for (int i = 0; i < p.n; ++i) {
      std::span<Real> a(gq.data() + std::size_t(i) * d_k, std::size_t(d_k));
      std::span<Real> b(gk.data() + std::size_t(i) * d_k, std::size_t(d_k));
      if (hd.identity) {
        rotate_row(a, -static_cast<Real>(i), p.freqs);
        rotate_row(b, -static_cast<Real>(i), p.freqs);
      }
      Real* dqi = dq.data() + std::size_t(i) * stride + h * d_k;
      Real* dki = dk.data() + std::size_t(i) * stride + h * d_k;
      for (int c = 0; c < d_k; ++c) {
        dqi[c] += a[std::size_t(c)];
        dki[c] += b[std::size_t(c)];
      }
    }
  }
}

void landmark_forward(const LandmarkProblem& p, std::span<const Real> q,
                      std::span<const Real> k, std::span<const Real> v,
                      std::span<Real> out, LandmarkSaved* saved) {
  detail::check_landmark_args(p, q.size(), k.size(), v.size(), out.size());
  if (saved) saved->rows.assign(std::size_t(p.heads), {});
#pragma omp parallel for schedule(static)
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
#pragma omp parallel for schedule(static)
  for (int h = 0; h < p.heads; ++h) {
    detail::landmark_head_backward(p, h, q, k, v, saved.rows[std::size_t(h)],
                                   dout, dq, dk, dv, doffset);
  }
}

}  // namespace ropelab::kernels::omp
