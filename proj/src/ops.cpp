#include "ropelab/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ropelab/error.h"
#include "ropelab/kernels.h"

namespace ropelab {

namespace {

void expect_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_str(x.shape()));
  }
}

void expect_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void accumulate(detail::Node& in, std::span<const Real> g, Real factor = 1) {
  if (!in.requires_grad) return;
  auto& dst = in.grad_buffer();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_rank2(a, "matmul");
  expect_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const kernels::GemmDims d{a.dim(0), a.dim(1), b.dim(1)};
  std::vector<Real> out(d.m * d.n);
  kernels::omp::gemm_nn(a.data(), b.data(), out, d, false);
  return Tensor::make_op({d.m, d.n}, std::move(out), {a, b}, [d](detail::Node& self) {
    auto& a_node = *self.inputs[0];
    auto& b_node = *self.inputs[1];
    if (a_node.requires_grad) {
      // dA[m x k] = dC[m x n] . B^T
      kernels::omp::gemm_nt(self.grad, b_node.data, a_node.grad_buffer(),
                            {d.m, d.n, d.k}, true);
    }
    if (b_node.requires_grad) {
      // dB[k x n] = A^T . dC
      kernels::omp::gemm_tn(a_node.data, self.grad, b_node.grad_buffer(),
                            {d.k, d.m, d.n}, true);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  expect_same(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad, -1);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& e : out) e *= factor;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad, factor);
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  expect_rank2(x, "add_row");
  if (row.numel() != x.dim(1)) {
    throw DimensionError("add_row: row of " + std::to_string(row.numel()) +
                         " for " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.data()[j];
  return Tensor::make_op(x.shape(), std::move(out), {x, row},
                         [m, n](detail::Node& self) {
                           accumulate(*self.inputs[0], self.grad);
                           auto& r = *self.inputs[1];
                           if (!r.requires_grad) return;
                           auto& g = r.grad_buffer();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               g[j] += self.grad[i * n + j];
                         });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  expect_rank2(x, "mul_row");
  if (row.numel() != x.dim(1)) {
    throw DimensionError("mul_row: row of " + std::to_string(row.numel()) +
                         " for " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= row.data()[j];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, row}, [m, n](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& r = *self.inputs[1];
        if (xn.requires_grad) {
          auto& g = xn.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              g[i * n + j] += self.grad[i * n + j] * r.data[j];
        }
        if (r.requires_grad) {
          auto& g = r.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              g[j] += self.grad[i * n + j] * xn.data[i * n + j];
        }
      });
}

Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real e : x.data()) s += e;
  return Tensor::make_op({}, {s}, {x}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& e : g) e += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), Real{1} / static_cast<Real>(x.numel()));
}

Tensor softmax_rows(const Tensor& x) {
  expect_rank2(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(m * n);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const Real e = in[i * n + j];
      if (std::isnan(e) || e == std::numeric_limits<Real>::infinity()) {
        throw ContractError("softmax_rows: non-finite input in row " +
                            std::to_string(i));
      }
      mx = std::max(mx, e);
    }
    if (mx == -std::numeric_limits<Real>::infinity()) {
      throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                               " is fully masked");
    }
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(in[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return Tensor::make_op(x.shape(), out, {x}, [m, n, y = out](detail::Node& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  expect_rank2(x, "log_softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(m * n);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[i * n + j]);
    if (mx == -std::numeric_limits<Real>::infinity()) {
      throw DegenerateRowError("log_softmax_rows: row " + std::to_string(i) +
                               " is fully masked");
    }
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[i * n + j] - mx);
    const Real lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[i * n + j] - lz;
  }
  return Tensor::make_op(x.shape(), out, {x}, [m, n, y = out](detail::Node& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      Real total = 0;
      for (std::size_t j = 0; j < n; ++j) total += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += self.grad[i * n + j] - std::exp(y[i * n + j]) * total;
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr Real kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr Real kA = 0.044715;
  std::vector<Real> out(x.numel());
  std::vector<Real> th(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = in[i];
    // tanh through exp, which is several times cheaper than std::tanh.
    const Real u = kC * (v + kA * v * v * v);
    th[i] = u > 20 ? 1.0 : 1.0 - 2.0 / (std::exp(2 * u) + 1.0);
    out[i] = 0.5 * v * (1 + th[i]);
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [th = std::move(th)](detail::Node& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xn.data[i];
      const Real du = kC * (1 + 3 * kA * v * v);
      const Real d = 0.5 * (1 + th[i]) + 0.5 * v * (1 - th[i] * th[i]) * du;
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, Real eps) {
  expect_rank2(x, "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n) throw DimensionError("rms_norm gain size mismatch");
  std::vector<Real> out(m * n), inv_rms(m);
  const auto in = x.data();
  const auto gv = gain.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += in[i * n + j] * in[i * n + j];
    inv_rms[i] = Real{1} / std::sqrt(ss / static_cast<Real>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = in[i * n + j] * inv_rms[i] * gv[j];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, gain},
      [m, n, inv_rms = std::move(inv_rms)](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        if (gn.requires_grad) {
          auto& g = gn.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              g[j] += self.grad[i * n + j] * xn.data[i * n + j] * inv_rms[i];
        }
        if (xn.requires_grad) {
          auto& g = xn.grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            // y = x * r * w, r = (mean(x^2) + eps)^-1/2
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dot += self.grad[i * n + j] * gn.data[j] * xn.data[i * n + j];
            }
            const Real r = inv_rms[i];
            const Real coef = r * r * r * dot / static_cast<Real>(n);
            for (std::size_t j = 0; j < n; ++j) {
              g[i * n + j] += self.grad[i * n + j] * gn.data[j] * r -
                              coef * xn.data[i * n + j];
            }
          }
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  expect_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<Real> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(idx[i]) +
                          " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + std::size_t(idx[i]) * d, d,
                out.data() + i * d);
  }
  const std::size_t rows = idx.size();
  return Tensor::make_op({rows, d}, std::move(out), {table},
                         [d, idx = std::move(idx)](detail::Node& self) {
                           auto& tn = *self.inputs[0];
                           if (!tn.requires_grad) return;
                           auto& g = tn.grad_buffer();
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < d; ++c)
                               g[std::size_t(idx[i]) * d + c] += self.grad[i * d + c];
                         });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  expect_rank2(logits, "cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) throw DimensionError("cross_entropy target count");
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<Real> probs(m * n);
  Real total = 0;
  std::size_t counted = 0;
  const auto in = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[i * n + j]);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(in[i * n + j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    if (tg[i] < 0) continue;
    require(static_cast<std::size_t>(tg[i]) < n, "cross_entropy target out of range");
    total += -(in[i * n + std::size_t(tg[i])] - mx - std::log(z));
    ++counted;
  }
  require(counted > 0, "cross_entropy with no scored target");
  const Real inv = Real{1} / static_cast<Real>(counted);
  return Tensor::make_op(
      {}, {total * inv}, {logits},
      [m, n, inv, tg = std::move(tg), probs = std::move(probs)](detail::Node& self) {
        auto& ln = *self.inputs[0];
        if (!ln.requires_grad) return;
        auto& g = ln.grad_buffer();
        const Real up = self.grad[0] * inv;
        for (std::size_t i = 0; i < m; ++i) {
          if (tg[i] < 0) continue;
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += up * probs[i * n + j];
          g[i * n + std::size_t(tg[i])] -= up;
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return Tensor::make_op(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad);
  });
}

Tensor transpose(const Tensor& x) {
  expect_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  return Tensor::make_op({n, m}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  expect_rank2(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(begin < end && end <= n, "slice_cols range out of bounds");
  const std::size_t w = end - begin;
  std::vector<Real> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + begin, w, out.data() + i * w);
  return Tensor::make_op({m, w}, std::move(out), {x}, [m, n, w, begin](detail::Node& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  expect_rank2(x, "slice_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(begin < end && end <= m, "slice_rows range out of bounds");
  std::vector<Real> out(x.data().begin() + std::ptrdiff_t(begin * n),
                        x.data().begin() + std::ptrdiff_t(end * n));
  return Tensor::make_op({end - begin, n}, std::move(out), {x},
                         [n, begin](detail::Node& self) {
                           auto& xn = *self.inputs[0];
                           if (!xn.requires_grad) return;
                           auto& g = xn.grad_buffer();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             g[begin * n + i] += self.grad[i];
                         });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    expect_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<Real> out(m * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[k].data().data() + i * widths[k], widths[k],
                  out.data() + i * total + col);
    col += widths[k];
  }
  return Tensor::make_op({m, total}, std::move(out), parts,
                         [m, total, widths](detail::Node& self) {
                           std::size_t c0 = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             auto& in = *self.inputs[k];
                             if (in.requires_grad) {
                               auto& g = in.grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   g[i * widths[k] + j] += self.grad[i * total + c0 + j];
                             }
                             c0 += widths[k];
                           }
                         });
}

}  // namespace ropelab
