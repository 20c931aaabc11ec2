#include "ropelab/rope.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ropelab/error.h"

namespace ropelab {

namespace {

void check_head_dim(int d_k) {
  if (d_k <= 0 || d_k % 2 != 0) {
    throw ContractError("head dimension must be even and positive, got " +
                        std::to_string(d_k));
  }
}

void check_lengths(long C, long C_prime) {
  if (C < 1) throw ContractError("pretrain context C must be >= 1");
  if (C_prime < C) {
    throw ContractError("target context C' (" + std::to_string(C_prime) +
                        ") is shorter than C (" + std::to_string(C) + ")");
  }
}

}  // namespace

FrequencyBasis frequency_basis(int d_k, Real base) {
  check_head_dim(d_k);
  if (!(base > 1.0)) throw ContractError("rope base must exceed 1");
  FrequencyBasis basis;
  basis.d_k = d_k;
  basis.base = base;
  basis.theta.resize(static_cast<std::size_t>(d_k / 2));
  for (int j = 0; j < d_k / 2; ++j) {
    basis.theta[j] = std::pow(base, -2.0 * j / d_k);
  }
  return basis;
}

std::string to_string(ScalingMethod method) {
  switch (method) {
    case ScalingMethod::kNone: return "none";
    case ScalingMethod::kPI: return "pi";
    case ScalingMethod::kNTK: return "ntk";
    case ScalingMethod::kDynamicNTK: return "dynamic-ntk";
    case ScalingMethod::kYaRN: return "yarn";
  }
  return "none";
}

ScalingMethod scaling_method_from_string(const std::string& name) {
  if (name == "none") return ScalingMethod::kNone;
  if (name == "pi") return ScalingMethod::kPI;
  if (name == "ntk") return ScalingMethod::kNTK;
  if (name == "dynamic-ntk") return ScalingMethod::kDynamicNTK;
  if (name == "yarn") return ScalingMethod::kYaRN;
  throw ContractError("unknown scaling method '" + name + "'");
}

FrequencyScaling scaling_none(int d_k) {
  check_head_dim(d_k);
  FrequencyScaling out;
  out.alpha.assign(static_cast<std::size_t>(d_k / 2), 1.0);
  return out;
}

FrequencyScaling scaling_pi(long C, long C_prime, int d_k) {
  check_head_dim(d_k);
  check_lengths(C, C_prime);
  FrequencyScaling out;
  out.method = ScalingMethod::kPI;
  out.C = C;
  out.C_prime = C_prime;
  out.t = static_cast<Real>(C_prime) / static_cast<Real>(C);
  out.alpha.assign(static_cast<std::size_t>(d_k / 2),
                   static_cast<Real>(C) / static_cast<Real>(C_prime));
  return out;
}

FrequencyScaling scaling_ntk_ratio(Real t, int d_k) {
  check_head_dim(d_k);
  if (d_k <= 2) throw ContractError("NTK scaling needs d_k > 2");
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw ContractError("NTK ratio must be positive and finite");
  }
  FrequencyScaling out;
  out.method = ScalingMethod::kNTK;
  out.t = t;
  const Real exponent = static_cast<Real>(d_k) / static_cast<Real>(d_k - 2);
  const Real log_kappa = exponent * std::log(t);
  out.alpha.resize(static_cast<std::size_t>(d_k / 2));
  for (int j = 0; j < d_k / 2; ++j) {
    out.alpha[j] = std::exp(-2.0 * j / d_k * log_kappa);
  }
  // kappa^0 is exactly one; keep it so regardless of exp rounding.
  out.alpha[0] = 1.0;
  return out;
}

FrequencyScaling scaling_ntk(long C, long C_prime, int d_k) {
  check_lengths(C, C_prime);
  auto out = scaling_ntk_ratio(
      static_cast<Real>(C_prime) / static_cast<Real>(C), d_k);
  out.C = C;
  out.C_prime = C_prime;
  return out;
}

Real dynamic_ntk_effective_t(long C, long C_prime, long C_test) {
  check_lengths(C, C_prime);
  if (C_test < 1) throw ContractError("C_test must be >= 1");
  const Real s = static_cast<Real>(C_prime) / (2.0 * static_cast<Real>(C));
  const Real longest = static_cast<Real>(std::max(C_prime, C_test));
  return s * longest / static_cast<Real>(C) - (s - 1.0);
}

FrequencyScaling scaling_dynamic_ntk(long C, long C_prime, long C_test,
                                     int d_k) {
  auto out = scaling_ntk_ratio(dynamic_ntk_effective_t(C, C_prime, C_test), d_k);
  out.method = ScalingMethod::kDynamicNTK;
  out.C = C;
  out.C_prime = C_prime;
  out.s = static_cast<Real>(C_prime) / (2.0 * static_cast<Real>(C));
  return out;
}

Real yarn_ramp(Real theta_j, Real p, Real q) {
  if (!(p < q)) throw ContractError("yarn ramp requires p < q");
  if (theta_j < p) return 0.0;
  if (theta_j > q) return 1.0;
  return (theta_j - p) / (q - p);
}

YarnParams yarn_default_params(long C, long C_prime) {
  check_lengths(C, C_prime);
  const Real t = static_cast<Real>(C_prime) / static_cast<Real>(C);
  YarnParams out;
  // theta = 2*pi / period.
  out.p = 2.0 * std::numbers::pi / static_cast<Real>(C);
  out.q = 2.0 * std::numbers::pi * 32.0 / static_cast<Real>(C);
  const Real m = 0.1 * std::log(t) + 1.0;
  out.T = m * m;
  return out;
}

FrequencyScaling scaling_yarn(long C, long C_prime, int d_k, Real p, Real q,
                              Real T, Real base) {
  check_head_dim(d_k);
  check_lengths(C, C_prime);
  if (!(p < q)) throw ContractError("yarn requires p < q");
  if (!(T > 0.0)) throw ContractError("yarn temperature must be positive");
  const auto basis = frequency_basis(d_k, base);
  FrequencyScaling out;
  out.method = ScalingMethod::kYaRN;
  out.C = C;
  out.C_prime = C_prime;
  out.t = static_cast<Real>(C_prime) / static_cast<Real>(C);
  out.p = p;
  out.q = q;
  out.T = T;
  out.alpha.resize(basis.theta.size());
  const Real inv_sqrt_t = 1.0 / std::sqrt(T);
  for (std::size_t j = 0; j < basis.theta.size(); ++j) {
    const Real gamma = yarn_ramp(basis.theta[j], p, q);
    out.alpha[j] = ((1.0 - gamma) / out.t + gamma) * inv_sqrt_t;
  }
  return out;
}

std::vector<Real> effective_frequencies(const FrequencyBasis& basis,
                                        const FrequencyScaling& scaling) {
  if (scaling.alpha.size() != basis.theta.size()) {
    throw DimensionError("scaling vector has " +
                         std::to_string(scaling.alpha.size()) +
                         " components, basis has " +
                         std::to_string(basis.theta.size()));
  }
  std::vector<Real> freqs(basis.theta.size());
  for (std::size_t j = 0; j < freqs.size(); ++j) {
    freqs[j] = scaling.alpha[j] * basis.theta[j];
  }
  return freqs;
}

void rotate_row(std::span<Real> row, Real position, std::span<const Real> freqs) {
  for (std::size_t j = 0; j < freqs.size(); ++j) {
    const Real angle = position * freqs[j];
    const Real c = std::cos(angle);
    const Real s = std::sin(angle);
    const Real x0 = row[2 * j];
    const Real x1 = row[2 * j + 1];
    row[2 * j] = x0 * c - x1 * s;
    row[2 * j + 1] = x0 * s + x1 * c;
  }
}

Tensor apply_rope(const Tensor& x, long position, const FrequencyBasis& basis,
                  const FrequencyScaling& scaling) {
  const auto& shape = x.shape();
  if (shape.empty() || shape.back() != static_cast<std::size_t>(basis.d_k)) {
    throw ContractError("apply_rope expects trailing extent " +
                        std::to_string(basis.d_k) + ", got " + shape_str(shape));
  }
  auto freqs = effective_frequencies(basis, scaling);
  const std::size_t d_k = shape.back();
  const std::size_t rows = x.numel() / d_k;
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    rotate_row(std::span<Real>(out).subspan(r * d_k, d_k),
               static_cast<Real>(position), freqs);
  }
  return Tensor::make_op(
      shape, std::move(out), {x},
      [freqs = std::move(freqs), position, rows, d_k](detail::Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        std::vector<Real> tmp(self.grad);
        // The transpose of a rotation is the rotation by the negated angle.
        for (std::size_t r = 0; r < rows; ++r) {
          rotate_row(std::span<Real>(tmp).subspan(r * d_k, d_k),
                     -static_cast<Real>(position), freqs);
        }
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
      });
}

FrequencyScaling ScalingPolicy::resolve(int d_k, long context_len,
                                        Real base) const {
  switch (method) {
    case ScalingMethod::kNone:
      return scaling_none(d_k);
    case ScalingMethod::kPI: {
      if (ratio_override) {
        auto out = scaling_none(d_k);
        out.method = ScalingMethod::kPI;
        out.C = C;
        out.C_prime = C_prime;
        out.t = *ratio_override;
        for (auto& a : out.alpha) a = 1.0 / *ratio_override;
        return out;
      }
      return scaling_pi(C, C_prime, d_k);
    }
    case ScalingMethod::kNTK: {
      if (ratio_override) return scaling_ntk_ratio(*ratio_override, d_k);
      return scaling_ntk(C, C_prime, d_k);
    }
    case ScalingMethod::kDynamicNTK: {
      if (ratio_override) {
        auto out = scaling_ntk_ratio(*ratio_override, d_k);
        out.method = ScalingMethod::kDynamicNTK;
        out.C = C;
        out.C_prime = C_prime;
        return out;
      }
      return scaling_dynamic_ntk(C, C_prime, std::max(1L, context_len), d_k);
    }
    case ScalingMethod::kYaRN: {
      const YarnParams params = yarn ? *yarn : yarn_default_params(C, C_prime);
      if (ratio_override) {
        // Reinterpret the ratio as the target length C * t.
        const long target =
            std::max(C, static_cast<long>(std::lround(C * *ratio_override)));
        return scaling_yarn(C, target, d_k, params.p, params.q, params.T, base);
      }
      return scaling_yarn(C, C_prime, d_k, params.p, params.q, params.T, base);
    }
  }
  return scaling_none(d_k);
}

}  // namespace ropelab
