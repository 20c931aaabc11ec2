#include <algorithm>
#include <limits>
#include <numeric>
#include <string>

#include "kernels_internal.h"
#include "ropelab/error.h"
#include "ropelab/rope.h"

namespace ropelab::kernels {

std::size_t AttentionPattern::nnz() const {
  std::size_t total = 0;
  for (int i = 0; i < n; ++i) total += static_cast<std::size_t>(row_count(i));
  return total;
}

std::vector<std::size_t> AttentionPattern::row_offsets() const {
  std::vector<std::size_t> offs(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 0; i < n; ++i) {
    offs[std::size_t(i) + 1] = offs[std::size_t(i)] + std::size_t(row_count(i));
  }
  return offs;
}

std::vector<int> select_top_n(std::span<const Real> weights, int top_n) {
  require(top_n >= 1, "top_n must be >= 1");
  std::vector<int> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (weights[std::size_t(a)] != weights[std::size_t(b)]) {
      return weights[std::size_t(a)] > weights[std::size_t(b)];
    }
    return a > b;  // recency wins ties
  });
  if (static_cast<std::size_t>(top_n) < idx.size()) idx.resize(std::size_t(top_n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace detail {

RotaryTable::RotaryTable(std::span<const Real> freqs, int max_r)
    : planes(static_cast<int>(freqs.size())) {
  const std::size_t rows = static_cast<std::size_t>(std::max(max_r, 0)) + 1;
  cos.resize(rows * freqs.size());
  sin.resize(rows * freqs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < freqs.size(); ++p) {
      const Real angle = static_cast<Real>(r) * freqs[p];
      cos[r * freqs.size() + p] = std::cos(angle);
      sin[r * freqs.size() + p] = std::sin(angle);
    }
  }
}

void check_attention_args(const AttentionProblem& p, std::size_t q,
                          std::size_t k, std::size_t v, std::size_t out) {
  require(p.n >= 1, "attention over an empty sequence");
  require(p.d_k > 0 && p.d_k % 2 == 0, "attention head dimension must be even");
  require(p.freqs.size() == std::size_t(p.d_k / 2),
          "rotary frequency count must be d_k/2");
  require(p.head_pattern.size() == std::size_t(p.heads),
          "one attention pattern per head required");
  const std::size_t expect = std::size_t(p.n) * std::size_t(p.heads * p.d_k);
  if (q != expect || k != expect || v != expect || out != expect) {
    throw DimensionError("attention operands must be [" + std::to_string(p.n) +
                         " x " + std::to_string(p.heads * p.d_k) + "]");
  }
  for (const auto* pat : p.head_pattern) {
    require(pat != nullptr && pat->n == p.n &&
                pat->spans.size() == std::size_t(p.n),
            "attention pattern does not match sequence length");
    require(pat->distance_map.empty() ||
                pat->distance_map.size() == std::size_t(p.n),
            "distance map must cover every distance");
  }
}

void check_landmark_args(const LandmarkProblem& p, std::size_t q, std::size_t k,
                         std::size_t v, std::size_t out) {
  require(p.n >= 1, "attention over an empty sequence");
  require(p.block >= 1 && p.n % p.block == 0,
          "landmark block size must divide the sequence length");
  require(p.top_n >= 1, "landmark top_n must be >= 1");
  require(p.freqs.size() == std::size_t(p.d_k / 2),
          "rotary frequency count must be d_k/2");
  const std::size_t expect = std::size_t(p.n) * std::size_t(p.heads * p.d_k);
  if (q != expect || k != expect || v != expect || out != expect) {
    throw DimensionError("landmark operands have the wrong size");
  }
  require(p.landmark_offset.empty() ||
              p.landmark_offset.size() == std::size_t(p.heads * p.d_k),
          "landmark offset must be heads * d_k");
}

void rotate_head(std::span<const Real> src, int n, int stride, int col0,
                 int d_k, std::span<const Real> freqs, Real sign,
                 std::vector<Real>& dst) {
  dst.resize(std::size_t(n) * std::size_t(d_k));
  for (int i = 0; i < n; ++i) {
    Real* row = dst.data() + std::size_t(i) * d_k;
    const Real* in = src.data() + std::size_t(i) * stride + col0;
    std::copy(in, in + d_k, row);
    rotate_row(std::span<Real>(row, std::size_t(d_k)), sign * i, freqs);
  }
}

namespace {

Real dot(const Real* a, const Real* b, int n) {
  Real s = 0;
  for (int c = 0; c < n; ++c) s += a[c] * b[c];
  return s;
}

void softmax_inplace(std::vector<Real>& x) {
  Real m = -std::numeric_limits<Real>::infinity();
  for (Real e : x) m = std::max(m, e);
  Real z = 0;
  for (auto& e : x) {
    e = std::exp(e - m);
    z += e;
  }
  for (auto& e : x) e /= z;
}

struct HeadView {
  int n, stride, col0, d_k, block;
};

// Mean of unrotated keys [begin, end) of head h.
void key_mean(std::span<const Real> k, const HeadView& hv, int begin, int end,
              Real* out) {
  std::fill(out, out + hv.d_k, Real{0});
  for (int j = begin; j < end; ++j) {
    const Real* kr = k.data() + std::size_t(j) * hv.stride + hv.col0;
    for (int c = 0; c < hv.d_k; ++c) out[c] += kr[c];
  }
  const Real inv = Real{1} / static_cast<Real>(end - begin);
  for (int c = 0; c < hv.d_k; ++c) out[c] *= inv;
}

}  // namespace

void landmark_head_forward(const LandmarkProblem& p, int h,
                           std::span<const Real> q, std::span<const Real> k,
                           std::span<const Real> v, std::span<Real> out,
                           std::vector<LandmarkSaved::Row>* rows) {
  const HeadView hv{p.n, p.heads * p.d_k, h * p.d_k, p.d_k, p.block};
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(p.d_k));
  const Real* offset =
      p.landmark_offset.empty() ? nullptr : p.landmark_offset.data() + h * p.d_k;

  std::vector<Real> qr, kr;
  rotate_head(q, p.n, hv.stride, hv.col0, p.d_k, p.freqs, 1.0, qr);
  rotate_head(k, p.n, hv.stride, hv.col0, p.d_k, p.freqs, 1.0, kr);

  const int chunks = p.n / p.block;
  std::vector<Real> full_mean(std::size_t(chunks) * p.d_k);
  for (int c = 0; c < chunks; ++c) {
    key_mean(k, hv, c * p.block, (c + 1) * p.block,
             full_mean.data() + std::size_t(c) * p.d_k);
  }

  if (rows) rows->assign(std::size_t(p.n), {});
  std::vector<Real> landmark(std::size_t(p.d_k));
  for (int i = 0; i < p.n; ++i) {
    const Real* qi = q.data() + std::size_t(i) * hv.stride + hv.col0;
    const int ci = i / p.block;
    LandmarkSaved::Row row;
    row.stage1.resize(std::size_t(ci) + 1);
    for (int c = 0; c <= ci; ++c) {
      if (c < ci) {
        std::copy_n(full_mean.data() + std::size_t(c) * p.d_k, p.d_k,
                    landmark.data());
      } else {
        key_mean(k, hv, ci * p.block, i + 1, landmark.data());
      }
      if (offset) {
        for (int d = 0; d < p.d_k; ++d) landmark[std::size_t(d)] += offset[d];
      }
      row.stage1[std::size_t(c)] = dot(qi, landmark.data(), p.d_k) * scale;
    }
    softmax_inplace(row.stage1);
    row.selected = select_top_n(row.stage1, p.top_n);
    Real z = 0;
    for (int c : row.selected) z += row.stage1[std::size_t(c)];
    for (int c : row.selected) row.weights.push_back(row.stage1[std::size_t(c)] / z);

    Real* oi = out.data() + std::size_t(i) * hv.stride + hv.col0;
    std::fill(oi, oi + p.d_k, Real{0});
    for (std::size_t s = 0; s < row.selected.size(); ++s) {
      const int c = row.selected[s];
      const int b = c * p.block;
      const int e = std::min(i + 1, b + p.block);
      std::vector<Real> probs(std::size_t(e - b));
      for (int j = b; j < e; ++j) {
        probs[std::size_t(j - b)] =
            dot(qr.data() + std::size_t(i) * p.d_k,
                kr.data() + std::size_t(j) * p.d_k, p.d_k) *
            scale;
      }
      softmax_inplace(probs);
      const Real w = row.weights[s];
      for (int j = b; j < e; ++j) {
        const Real a = w * probs[std::size_t(j - b)];
        const Real* vj = v.data() + std::size_t(j) * hv.stride + hv.col0;
        for (int d = 0; d < p.d_k; ++d) oi[d] += a * vj[d];
      }
      row.stage2.insert(row.stage2.end(), probs.begin(), probs.end());
    }
    if (rows) (*rows)[std::size_t(i)] = std::move(row);
  }
}

void landmark_head_backward(const LandmarkProblem& p, int h,
                            std::span<const Real> q, std::span<const Real> k,
                            std::span<const Real> v,
                            const std::vector<LandmarkSaved::Row>& rows,
                            std::span<const Real> dout, std::span<Real> dq,
                            std::span<Real> dk, std::span<Real> dv,
                            std::span<Real> doffset) {
  const HeadView hv{p.n, p.heads * p.d_k, h * p.d_k, p.d_k, p.block};
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(p.d_k));
  const Real* offset =
      p.landmark_offset.empty() ? nullptr : p.landmark_offset.data() + h * p.d_k;
  const int d_k = p.d_k;

  std::vector<Real> qr, kr;
  rotate_head(q, p.n, hv.stride, hv.col0, d_k, p.freqs, 1.0, qr);
  rotate_head(k, p.n, hv.stride, hv.col0, d_k, p.freqs, 1.0, kr);
  std::vector<Real> dqr(qr.size(), 0), dkr(kr.size(), 0);

  const int chunks = p.n / p.block;
  std::vector<Real> full_mean(std::size_t(chunks) * d_k);
  for (int c = 0; c < chunks; ++c) {
    key_mean(k, hv, c * p.block, (c + 1) * p.block,
             full_mean.data() + std::size_t(c) * d_k);
  }

  std::vector<Real> landmark(static_cast<std::size_t>(d_k));
  std::vector<Real> ochunk(static_cast<std::size_t>(d_k));
  for (int i = 0; i < p.n; ++i) {
    const auto& row = rows[std::size_t(i)];
    const Real* qi = q.data() + std::size_t(i) * hv.stride + hv.col0;
    const Real* doi = dout.data() + std::size_t(i) * hv.stride + hv.col0;
    const int ci = i / p.block;

    // Stage 2 and the mixing weights.
    std::vector<Real> dweight(row.selected.size(), 0);
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < row.selected.size(); ++s) {
      const int c = row.selected[s];
      const int b = c * p.block;
      const int e = std::min(i + 1, b + p.block);
      const Real* probs = row.stage2.data() + cursor;
      cursor += std::size_t(e - b);
      const Real w = row.weights[s];
      std::fill(ochunk.begin(), ochunk.end(), Real{0});
      std::vector<Real> dp(std::size_t(e - b));
      Real pdp = 0;
      for (int j = b; j < e; ++j) {
        const Real* vj = v.data() + std::size_t(j) * hv.stride + hv.col0;
        Real* dvj = dv.data() + std::size_t(j) * hv.stride + hv.col0;
        const Real a = probs[j - b];
        for (int d = 0; d < d_k; ++d) {
          ochunk[std::size_t(d)] += a * vj[d];
          dvj[d] += w * a * doi[d];
        }
        dp[std::size_t(j - b)] = w * dot(doi, vj, d_k);
        pdp += a * dp[std::size_t(j - b)];
      }
      dweight[s] = dot(doi, ochunk.data(), d_k);
      for (int j = b; j < e; ++j) {
        const Real ds = probs[j - b] * (dp[std::size_t(j - b)] - pdp) * scale;
        Real* dqi = dqr.data() + std::size_t(i) * d_k;
        Real* dkj = dkr.data() + std::size_t(j) * d_k;
        const Real* qri = qr.data() + std::size_t(i) * d_k;
        const Real* krj = kr.data() + std::size_t(j) * d_k;
        for (int d = 0; d < d_k; ++d) {
          dqi[d] += ds * krj[d];
          dkj[d] += ds * qri[d];
        }
      }
    }

    // Renormalisation over the selected chunks.
    Real z = 0;
    for (int c : row.selected) z += row.stage1[std::size_t(c)];
    Real wdw = 0;
    for (std::size_t s = 0; s < row.selected.size(); ++s) {
      wdw += row.weights[s] * dweight[s];
    }
    std::vector<Real> dstage1(row.stage1.size(), 0);
    for (std::size_t s = 0; s < row.selected.size(); ++s) {
      dstage1[std::size_t(row.selected[s])] = (dweight[s] - wdw) / z;
    }

    // Stage-1 softmax and the landmark dot products.
    Real ada = 0;
    for (std::size_t c = 0; c < row.stage1.size(); ++c) {
      ada += row.stage1[c] * dstage1[c];
    }
    Real* dqi = dq.data() + std::size_t(i) * hv.stride + hv.col0;
    for (int c = 0; c <= ci; ++c) {
      const Real ds = row.stage1[std::size_t(c)] *
                      (dstage1[std::size_t(c)] - ada) * scale;
      if (ds == 0) continue;
      const int b = c * p.block;
      const int e = c < ci ? b + p.block : i + 1;
      if (c < ci) {
        std::copy_n(full_mean.data() + std::size_t(c) * d_k, d_k, landmark.data());
      } else {
        key_mean(k, hv, b, e, landmark.data());
      }
      if (offset) {
        for (int d = 0; d < d_k; ++d) landmark[std::size_t(d)] += offset[d];
      }
      for (int d = 0; d < d_k; ++d) dqi[d] += ds * landmark[std::size_t(d)];
      if (!doffset.empty()) {
        for (int d = 0; d < d_k; ++d) doffset[std::size_t(h * d_k + d)] += ds * qi[d];
      }
      const Real share = ds / static_cast<Real>(e - b);
      for (int j = b; j < e; ++j) {
        Real* dkj = dk.data() + std::size_t(j) * hv.stride + hv.col0;
        for (int d = 0; d < d_k; ++d) dkj[d] += share * qi[d];
      }
    }
  }

  // Back through the rotations of the stage-2 path.
  for (int i = 0; i < p.n; ++i) {
    std::span<Real> gq(dqr.data() + std::size_t(i) * d_k, std::size_t(d_k));
    std::span<Real> gk(dkr.data() + std::size_t(i) * d_k, std::size_t(d_k));
    rotate_row(gq, -static_cast<Real>(i), p.freqs);
    rotate_row(gk, -static_cast<Real>(i), p.freqs);
    Real* dqi = dq.data() + std::size_t(i) * hv.stride + hv.col0;
    Real* dki = dk.data() + std::size_t(i) * hv.stride + hv.col0;
    for (int d = 0; d < d_k; ++d) {
      dqi[d] += gq[std::size_t(d)];
      dki[d] += gk[std::size_t(d)];
    }
  }
}

}  // namespace detail
}  // namespace ropelab::kernels
