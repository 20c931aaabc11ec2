#include "ropelab/attention.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "ropelab/error.h"
#include "ropelab/ops.h"

namespace ropelab {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kExact: return "exact";
    case AttentionKind::kLmInfinite: return "lm_infinite";
    case AttentionKind::kSelfExtend: return "self_extend";
    case AttentionKind::kLandmark: return "landmark";
    case AttentionKind::kBlockwiseShifted: return "blockwise_shifted";
  }
  return "exact";
}

AttentionKind attention_kind_from_string(const std::string& name) {
  if (name == "exact") return AttentionKind::kExact;
  if (name == "lm_infinite") return AttentionKind::kLmInfinite;
  if (name == "self_extend") return AttentionKind::kSelfExtend;
  if (name == "landmark") return AttentionKind::kLandmark;
  if (name == "blockwise_shifted") return AttentionKind::kBlockwiseShifted;
  throw ContractError("unknown attention kind '" + name + "'");
}

void AttentionSpec::validate() const {
  require(causal, "only causal attention is supported");
  switch (kind) {
    case AttentionKind::kExact:
      break;
    case AttentionKind::kLmInfinite:
      require(C >= 1, "lm_infinite needs C >= 1");
      require(G >= 0, "lm_infinite needs G >= 0");
      require(M >= 1, "lm_infinite needs a local window M >= 1");
      break;
    case AttentionKind::kSelfExtend:
      require(C >= 1, "self_extend needs C >= 1");
      require(M >= 0 && M < C, "self_extend needs 0 <= M < C");
      require(N >= 1, "self_extend needs group size N >= 1");
      break;
    case AttentionKind::kLandmark:
      require(B >= 1, "landmark needs chunk size B >= 1");
      require(top_n >= 1, "landmark needs top_n >= 1");
      break;
    case AttentionKind::kBlockwiseShifted:
      require(B >= 2 && B % 2 == 0, "blockwise attention needs an even B >= 2");
      break;
  }
}

long AttentionSpec::max_length() const {
  if (kind == AttentionKind::kSelfExtend) return self_extend_max_length(C, M, N);
  return -1;
}

long lm_infinite_relpos(long n, long m, long C) {
  require(n >= m, "lm_infinite_relpos needs n >= m");
  return std::min(n - m, C);
}

int BoolMatrix::row_count(int i) const {
  int c = 0;
  for (int j = 0; j < cols; ++j) c += at(i, j) ? 1 : 0;
  return c;
}

BoolMatrix lm_infinite_mask(int C_prime, int G, int M) {
  require(C_prime >= 0 && G >= 0 && M >= 0, "lm_infinite_mask needs non-negative sizes");
  BoolMatrix mask;
  mask.rows = mask.cols = C_prime;
  mask.cells.assign(std::size_t(C_prime) * std::size_t(C_prime), 0);
  for (int i = 0; i < C_prime; ++i) {
    for (int j = 0; j <= i; ++j) {
      if (j < G || i - j < M) mask.cells[std::size_t(i) * C_prime + j] = 1;
    }
  }
  return mask;
}

long self_extend_relpos(long delta, long M, long N) {
  require(delta >= 0, "self_extend_relpos needs delta >= 0");
  require(N >= 1, "self_extend_relpos needs N >= 1");
  if (delta <= M) return delta;
  return M + delta / N - M / N;
}

long self_extend_max_length(long C, long M, long N) { return (C - M) * N + M; }

kernels::AttentionPattern make_pattern(const AttentionSpec& spec, int n,
                                       bool shifted) {
  spec.validate();
  kernels::AttentionPattern pat;
  pat.n = n;
  pat.spans.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    auto& s = pat.spans[std::size_t(i)];
    s = {0, i + 1, 0, 0};
    switch (spec.kind) {
      case AttentionKind::kExact:
      case AttentionKind::kSelfExtend:
      case AttentionKind::kLandmark:
        break;
      case AttentionKind::kLmInfinite: {
        const int global_end = std::min(spec.G, i + 1);
        const int local_begin = std::max(global_end, i - spec.M + 1);
        s = {0, global_end, local_begin, i + 1};
        break;
      }
      case AttentionKind::kBlockwiseShifted: {
        const int half = spec.B / 2;
        int start = 0;
        if (!shifted) {
          start = (i / spec.B) * spec.B;
        } else if (i >= half) {
          start = half + ((i - half) / spec.B) * spec.B;
        }
        s = {start, i + 1, 0, 0};
        break;
      }
    }
  }
  if (spec.kind == AttentionKind::kLmInfinite) {
    pat.distance_map.resize(std::size_t(n));
    for (int d = 0; d < n; ++d) {
      pat.distance_map[std::size_t(d)] = static_cast<int>(lm_infinite_relpos(d, 0, spec.C));
    }
  } else if (spec.kind == AttentionKind::kSelfExtend) {
    pat.distance_map.resize(std::size_t(n));
    for (int d = 0; d < n; ++d) {
      pat.distance_map[std::size_t(d)] =
          static_cast<int>(self_extend_relpos(d, spec.M, spec.N));
    }
  }
  return pat;
}

namespace {

struct Operands {
  int n = 0;
  int heads = 0;
  int d_k = 0;
};

Operands check_operands(const Tensor& q, const Tensor& k, const Tensor& v,
                        int heads, int batch, std::span<const Real> freqs) {
  require(heads >= 1, "attention needs at least one head");
  require(batch >= 1, "attention batch must be >= 1");
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention operands must share a rank-2 shape: " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  require(q.dim(0) >= 1, "attention over an empty sequence");
  require(q.dim(0) % std::size_t(batch) == 0, "rows not divisible by batch");
  require(q.dim(1) % std::size_t(heads) == 0, "model width not divisible by heads");
  Operands ops{static_cast<int>(q.dim(0)) / batch, heads,
               static_cast<int>(q.dim(1)) / heads};
  require(ops.d_k % 2 == 0, "head dimension must be even");
  require(freqs.size() == std::size_t(ops.d_k / 2), "frequency count must be d_k/2");
  return ops;
}

AttentionKind effective_kind(const AttentionSpec& spec, AttentionMode mode) {
  if (spec.kind == AttentionKind::kBlockwiseShifted &&
      mode == AttentionMode::kInference && spec.full_attention_at_inference) {
    return AttentionKind::kExact;
  }
  return spec.kind;
}

bool head_is_shifted(int h, int heads) { return h >= heads - heads / 2; }

struct PatternSet {
  kernels::AttentionPattern plain;
  kernels::AttentionPattern shifted;
  bool has_shifted = false;

  std::vector<const kernels::AttentionPattern*> per_head(int heads) const {
    std::vector<const kernels::AttentionPattern*> out;
    for (int h = 0; h < heads; ++h) {
      out.push_back(has_shifted && head_is_shifted(h, heads) ? &shifted : &plain);
    }
    return out;
  }
};

std::shared_ptr<PatternSet> build_patterns(const AttentionSpec& spec, int n) {
  auto set = std::make_shared<PatternSet>();
  set->plain = make_pattern(spec, n, false);
  if (spec.kind == AttentionKind::kBlockwiseShifted) {
    set->shifted = make_pattern(spec, n, true);
    set->has_shifted = true;
  }
  return set;
}

std::vector<Real> pad_rows(std::span<const Real> x, int rows, int width, int padded) {
  std::vector<Real> out(std::size_t(padded) * width, Real{0});
  std::copy_n(x.data(), std::size_t(rows) * width, out.data());
  return out;
}

void accumulate_into(detail::Node& in, std::span<const Real> g, std::size_t at) {
  if (!in.requires_grad) return;
  auto& buf = in.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[at + i] += g[i];
}

Tensor landmark_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          const Operands& ops, int batch, const AttentionSpec& spec,
                          std::span<const Real> freqs, const Tensor& offset) {
  const int width = ops.heads * ops.d_k;
  const int padded = ((ops.n + spec.B - 1) / spec.B) * spec.B;
  if (offset.defined()) {
    require(offset.numel() == std::size_t(width), "landmark offset must be heads x d_k");
  }
  auto freq_copy = std::make_shared<std::vector<Real>>(freqs.begin(), freqs.end());
  auto offset_copy = std::make_shared<std::vector<Real>>();
  if (offset.defined()) offset_copy->assign(offset.data().begin(), offset.data().end());

  auto problem = std::make_shared<kernels::LandmarkProblem>();
  problem->n = padded;
  problem->heads = ops.heads;
  problem->d_k = ops.d_k;
  problem->block = spec.B;
  problem->top_n = spec.top_n;
  problem->freqs = *freq_copy;
  problem->landmark_offset = *offset_copy;

  const bool record = grad_enabled() &&
                      (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                       offset.requires_grad());
  auto saved = std::make_shared<std::vector<kernels::LandmarkSaved>>(std::size_t(batch));
  const std::size_t item = std::size_t(ops.n) * width;
  std::vector<Real> out(item * batch);
  std::vector<Real> op(std::size_t(padded) * width);
  for (int b = 0; b < batch; ++b) {
    // Trailing pad rows come after every real query, so causality hides them.
    auto qp = pad_rows(q.data().subspan(item * b, item), ops.n, width, padded);
    auto kp = pad_rows(k.data().subspan(item * b, item), ops.n, width, padded);
    auto vp = pad_rows(v.data().subspan(item * b, item), ops.n, width, padded);
    kernels::omp::landmark_forward(*problem, qp, kp, vp, op,
                                   record ? &(*saved)[std::size_t(b)] : nullptr);
    std::copy_n(op.begin(), item, out.begin() + std::ptrdiff_t(item * b));
  }

  std::vector<Tensor> inputs{q, k, v};
  if (offset.defined()) inputs.push_back(offset);
  return Tensor::make_op(
      {std::size_t(ops.n) * batch, std::size_t(width)}, std::move(out), inputs,
      [problem, saved, freq_copy, offset_copy, ops, width, padded, batch,
       item](detail::Node& self) {
        const std::size_t full = std::size_t(padded) * width;
        std::vector<Real> doff(offset_copy->size(), 0);
        for (int b = 0; b < batch; ++b) {
          const std::size_t at = item * b;
          auto qp = pad_rows(std::span<const Real>(self.inputs[0]->data).subspan(at, item),
                             ops.n, width, padded);
          auto kp = pad_rows(std::span<const Real>(self.inputs[1]->data).subspan(at, item),
                             ops.n, width, padded);
          auto vp = pad_rows(std::span<const Real>(self.inputs[2]->data).subspan(at, item),
                             ops.n, width, padded);
          auto dout = pad_rows(std::span<const Real>(self.grad).subspan(at, item), ops.n,
                               width, padded);
          std::vector<Real> dq(full, 0), dk(full, 0), dv(full, 0);
          kernels::omp::landmark_backward(*problem, qp, kp, vp, (*saved)[std::size_t(b)],
                                          dout, dq, dk, dv, doff);
          accumulate_into(*self.inputs[0], std::span<const Real>(dq).first(item), at);
          accumulate_into(*self.inputs[1], std::span<const Real>(dk).first(item), at);
          accumulate_into(*self.inputs[2], std::span<const Real>(dv).first(item), at);
        }
        if (self.inputs.size() > 3) accumulate_into(*self.inputs[3], doff, 0);
      });
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionSpec& spec,
                            std::span<const Real> freqs,
                            const AttentionOptions& options) {
  spec.validate();
  const int batch = options.batch;
  const Operands ops = check_operands(q, k, v, options.heads, batch, freqs);
  const long limit = spec.max_length();
  if (limit >= 0 && ops.n > limit) {
    throw ContractError("sequence of " + std::to_string(ops.n) + " exceeds the " +
                        to_string(spec.kind) + " limit of " + std::to_string(limit));
  }
  const AttentionKind kind = effective_kind(spec, options.mode);
  if (kind == AttentionKind::kLandmark) {
    return landmark_attention(q, k, v, ops, batch, spec, freqs,
                              options.landmark_offset);
  }
  AttentionSpec eff = spec;
  eff.kind = kind;

  auto patterns = build_patterns(eff, ops.n);
  auto freq_copy = std::make_shared<std::vector<Real>>(freqs.begin(), freqs.end());
  auto problem = std::make_shared<kernels::AttentionProblem>();
  problem->n = ops.n;
  problem->heads = ops.heads;
  problem->d_k = ops.d_k;
  problem->freqs = *freq_copy;
  problem->head_pattern = patterns->per_head(ops.heads);

  auto saved = std::make_shared<std::vector<kernels::AttentionSaved>>(std::size_t(batch));
  const bool record = grad_enabled() &&
                      (q.requires_grad() || k.requires_grad() || v.requires_grad());
  const std::size_t item = q.numel() / std::size_t(batch);
  std::vector<Real> out(q.numel());
  for (int b = 0; b < batch; ++b) {
    const std::size_t at = item * b;
    kernels::omp::attention_forward(*problem, q.data().subspan(at, item),
                                    k.data().subspan(at, item),
                                    v.data().subspan(at, item),
                                    std::span<Real>(out).subspan(at, item),
                                    record ? &(*saved)[std::size_t(b)] : nullptr);
  }
  return Tensor::make_op(
      q.shape(), std::move(out), {q, k, v},
      [problem, patterns, saved, freq_copy, batch, item](detail::Node& self) {
        std::vector<Real> dq(item), dk(item), dv(item);
        for (int b = 0; b < batch; ++b) {
          const std::size_t at = item * b;
          std::fill(dq.begin(), dq.end(), Real{0});
          std::fill(dk.begin(), dk.end(), Real{0});
          std::fill(dv.begin(), dv.end(), Real{0});
          kernels::omp::attention_backward(
              *problem, std::span<const Real>(self.inputs[0]->data).subspan(at, item),
              std::span<const Real>(self.inputs[1]->data).subspan(at, item),
              std::span<const Real>(self.inputs[2]->data).subspan(at, item),
              (*saved)[std::size_t(b)],
              std::span<const Real>(self.grad).subspan(at, item), dq, dk, dv);
          accumulate_into(*self.inputs[0], dq, at);
          accumulate_into(*self.inputs[1], dk, at);
          accumulate_into(*self.inputs[2], dv, at);
        }
      });
}

std::vector<Real> attention_weights(const Tensor& q, const Tensor& k,
                                    const Tensor& v, int heads, int head,
                                    const AttentionSpec& spec,
                                    std::span<const Real> freqs,
                                    AttentionMode mode) {
  spec.validate();
  const Operands ops = check_operands(q, k, v, heads, 1, freqs);
  require(head >= 0 && head < heads, "head index out of range");
  const AttentionKind kind = effective_kind(spec, mode);
  std::vector<Real> dense(std::size_t(ops.n) * ops.n, 0);
  std::vector<Real> out(q.numel());
  if (kind == AttentionKind::kLandmark) {
    require(ops.n % spec.B == 0, "landmark weights need B to divide the length");
    kernels::LandmarkProblem problem;
    problem.n = ops.n;
    problem.heads = heads;
    problem.d_k = ops.d_k;
    problem.block = spec.B;
    problem.top_n = spec.top_n;
    problem.freqs = freqs;
    kernels::LandmarkSaved saved;
    kernels::omp::landmark_forward(problem, q.data(), k.data(), v.data(), out, &saved);
    for (int i = 0; i < ops.n; ++i) {
      const auto& row = saved.rows[std::size_t(head)][std::size_t(i)];
      std::size_t cursor = 0;
      for (std::size_t s = 0; s < row.selected.size(); ++s) {
        const int b = row.selected[s] * spec.B;
        const int e = std::min(i + 1, b + spec.B);
        for (int j = b; j < e; ++j) {
          dense[std::size_t(i) * ops.n + j] += row.weights[s] * row.stage2[cursor++];
        }
      }
    }
    return dense;
  }
  AttentionSpec eff = spec;
  eff.kind = kind;
  auto patterns = build_patterns(eff, ops.n);
  kernels::AttentionProblem problem;
  problem.n = ops.n;
  problem.heads = heads;
  problem.d_k = ops.d_k;
  problem.freqs = freqs;
  problem.head_pattern = patterns->per_head(heads);
  kernels::AttentionSaved saved;
  kernels::omp::attention_forward(problem, q.data(), k.data(), v.data(), out, &saved);
  const auto& pat = *problem.head_pattern[std::size_t(head)];
  const auto offs = pat.row_offsets();
  const auto& probs = saved.probs[std::size_t(head)];
  for (int i = 0; i < ops.n; ++i) {
    std::size_t t = offs[std::size_t(i)];
    const auto& s = pat.spans[std::size_t(i)];
    for (int j = s[0]; j < s[1]; ++j) dense[std::size_t(i) * ops.n + j] = probs[t++];
    for (int j = s[2]; j < s[3]; ++j) dense[std::size_t(i) * ops.n + j] = probs[t++];
  }
  return dense;
}

Tensor attend_exact(const Tensor& q, const Tensor& k, const Tensor& v,
                    const FrequencyBasis& basis, const FrequencyScaling& scaling) {
  AttentionSpec spec;
  spec.kind = AttentionKind::kExact;
  return multi_head_attention(q, k, v, spec, effective_frequencies(basis, scaling),
                              AttentionOptions{});
}

Tensor attend_lm_infinite(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSpec& spec, const FrequencyBasis& basis,
                          const FrequencyScaling& scaling) {
  require(spec.kind == AttentionKind::kLmInfinite, "spec kind must be lm_infinite");
  return multi_head_attention(q, k, v, spec, effective_frequencies(basis, scaling),
                              AttentionOptions{});
}

Tensor attend_self_extend(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSpec& spec, const FrequencyBasis& basis,
                          const FrequencyScaling& scaling) {
  require(spec.kind == AttentionKind::kSelfExtend, "spec kind must be self_extend");
  return multi_head_attention(q, k, v, spec, effective_frequencies(basis, scaling),
                              AttentionOptions{});
}

Tensor attend_blockwise_shifted(const Tensor& q, const Tensor& k,
                                const Tensor& v, const AttentionSpec& spec,
                                bool shifted, const FrequencyBasis& basis,
                                const FrequencyScaling& scaling) {
  require(spec.kind == AttentionKind::kBlockwiseShifted,
          "spec kind must be blockwise_shifted");
  spec.validate();
  if (q.rank() != 2 || q.dim(0) % std::size_t(spec.B) != 0) {
    throw ContractError("block size " + std::to_string(spec.B) +
                        " does not divide the sequence length");
  }
  // A single head runs shifted when it is the "second half" of a 2-head pair.
  const auto freqs = effective_frequencies(basis, scaling);
  const int n = static_cast<int>(q.dim(0));
  check_operands(q, k, v, 1, 1, freqs);
  auto pattern = std::make_shared<kernels::AttentionPattern>(make_pattern(spec, n, shifted));
  auto freq_copy = std::make_shared<std::vector<Real>>(freqs);
  auto problem = std::make_shared<kernels::AttentionProblem>();
  problem->n = n;
  problem->heads = 1;
  problem->d_k = static_cast<int>(q.dim(1));
  problem->freqs = *freq_copy;
  problem->head_pattern = {pattern.get()};
  auto saved = std::make_shared<kernels::AttentionSaved>();
  std::vector<Real> out(q.numel());
  kernels::omp::attention_forward(*problem, q.data(), k.data(), v.data(), out,
                                  saved.get());
  return Tensor::make_op(
      q.shape(), std::move(out), {q, k, v},
      [problem, pattern, saved, freq_copy](detail::Node& self) {
        const std::size_t size = self.grad.size();
        std::vector<Real> dq(size, 0), dk(size, 0), dv(size, 0);
        kernels::omp::attention_backward(*problem, self.inputs[0]->data,
                                         self.inputs[1]->data, self.inputs[2]->data,
                                         *saved, self.grad, dq, dk, dv);
        const std::vector<Real>* grads[3] = {&dq, &dk, &dv};
        for (int t = 0; t < 3; ++t) {
          auto& in = *self.inputs[std::size_t(t)];
          if (!in.requires_grad) continue;
          auto& g = in.grad_buffer();
          for (std::size_t i = 0; i < size; ++i) g[i] += (*grads[t])[i];
        }
      });
}

Tensor attend_landmark(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionSpec& spec, const FrequencyBasis& basis,
                       const FrequencyScaling& scaling,
                       const Tensor& landmark_offset) {
  require(spec.kind == AttentionKind::kLandmark, "spec kind must be landmark");
  spec.validate();
  if (q.rank() != 2 || q.dim(0) % std::size_t(spec.B) != 0) {
    throw ContractError("chunk size " + std::to_string(spec.B) +
                        " does not divide the sequence length");
  }
  return multi_head_attention(q, k, v, spec, effective_frequencies(basis, scaling),
                              AttentionOptions{.landmark_offset = landmark_offset});
}

Tensor landmark_stage1(const Tensor& q, const Tensor& landmarks, int block) {
  require(block >= 1, "landmark block must be >= 1");
  if (q.rank() != 2 || landmarks.rank() != 2 || q.dim(1) != landmarks.dim(1)) {
    throw DimensionError("landmark_stage1 operands must be [n x d_k] and [chunks x d_k]");
  }
  const std::size_t n = q.dim(0), chunks = landmarks.dim(0);
  require(chunks >= 1, "landmark_stage1 needs at least one chunk");
  std::vector<Real> mask(n * chunks, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < chunks; ++c) {
      if (c > i / std::size_t(block)) mask[i * chunks + c] = -std::numeric_limits<Real>::infinity();
    }
  }
  const Real scale_factor = Real{1} / std::sqrt(static_cast<Real>(q.dim(1)));
  auto scores = scale(matmul(q, transpose(landmarks)), scale_factor);
  return softmax_rows(add(scores, Tensor::from_data({n, chunks}, std::move(mask))));
}

std::vector<int> landmark_select_topn(std::span<const Real> weights, int top_n) {
  return kernels::select_top_n(weights, top_n);
}

std::uint64_t attention_flops(const AttentionSpec& spec, int C_prime, int d_k) {
  spec.validate();
  require(C_prime >= 1 && d_k >= 1, "attention_flops needs positive sizes");
  std::uint64_t pairs = 0;
  if (spec.kind == AttentionKind::kLandmark) {
    for (int i = 0; i < C_prime; ++i) {
      const int visible_chunks = i / spec.B + 1;
      pairs += std::uint64_t(visible_chunks);
      pairs += std::uint64_t(std::min(spec.top_n, visible_chunks)) * std::uint64_t(spec.B);
    }
  } else {
    const auto pat = make_pattern(spec, C_prime, false);
    pairs = pat.nnz();
  }
  return pairs * std::uint64_t(d_k);
}

}  // namespace ropelab
