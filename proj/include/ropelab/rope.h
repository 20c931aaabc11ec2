#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ropelab/tensor.h"

namespace ropelab {

inline constexpr Real kDefaultRopeBase = 10000.0;

// theta[j] = base^(-2j/d_k), j = 0 .. d_k/2 - 1.
struct FrequencyBasis {
  int d_k = 0;
  Real base = kDefaultRopeBase;
  std::vector<Real> theta;
};

FrequencyBasis frequency_basis(int d_k, Real base = kDefaultRopeBase);

enum class ScalingMethod { kNone, kPI, kNTK, kDynamicNTK, kYaRN };

std::string to_string(ScalingMethod method);
ScalingMethod scaling_method_from_string(const std::string& name);

// A base scaling vector alpha (one multiplier per frequency) together with
// the parameters that produced it. Fields not used by `method` are zero.
struct FrequencyScaling {
  ScalingMethod method = ScalingMethod::kNone;
  long C = 0;
  long C_prime = 0;
  Real t = 1.0;
  Real s = 0.0;
  Real p = 0.0;
  Real q = 0.0;
  Real T = 1.0;
  std::vector<Real> alpha;
};

FrequencyScaling scaling_none(int d_k);
FrequencyScaling scaling_pi(long C, long C_prime, int d_k);
FrequencyScaling scaling_ntk(long C, long C_prime, int d_k);
// NTK vector for an explicit ratio t (Dynamic NTK and grid-search overrides).
FrequencyScaling scaling_ntk_ratio(Real t, int d_k);

// t_eff = s * max(C', C_test) / C - (s - 1) with s = C' / (2C).
Real dynamic_ntk_effective_t(long C, long C_prime, long C_test);
FrequencyScaling scaling_dynamic_ntk(long C, long C_prime, long C_test,
                                     int d_k);

Real yarn_ramp(Real theta_j, Real p, Real q);

struct YarnParams {
  Real p = 0.0;
  Real q = 0.0;
  Real T = 1.0;
};

// p, q from wavelength bounds: period > C interpolates fully, period < C/32
// is left untouched. T = (0.1 ln t + 1)^2.
YarnParams yarn_default_params(long C, long C_prime);

FrequencyScaling scaling_yarn(long C, long C_prime, int d_k, Real p, Real q,
                              Real T, Real base = kDefaultRopeBase);

// Effective angular rate alpha_j * theta_j per 2-plane.
std::vector<Real> effective_frequencies(const FrequencyBasis& basis,
                                        const FrequencyScaling& scaling);

// Rotates each 2-plane (2j, 2j+1) of `row` by position * freqs[j].
void rotate_row(std::span<Real> row, Real position, std::span<const Real> freqs);

// Differentiable rotary transform R(alpha ⊙ theta, position) applied to every
// d_k-row of x.
Tensor apply_rope(const Tensor& x, long position, const FrequencyBasis& basis,
                  const FrequencyScaling& scaling);

// How a model resolves its scaling vector for a given evaluation length.
// Dynamic NTK re-derives t from the observed length; `ratio_override`
// replaces the derived ratio (grid search).
struct ScalingPolicy {
  ScalingMethod method = ScalingMethod::kNone;
  long C = 0;
  long C_prime = 0;
  std::optional<YarnParams> yarn;
  std::optional<Real> ratio_override;

  FrequencyScaling resolve(int d_k, long context_len,
                           Real base = kDefaultRopeBase) const;
};

}  // namespace ropelab
