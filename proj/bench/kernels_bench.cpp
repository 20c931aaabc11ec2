// Serial reference kernels against their OpenMP counterparts, plus one
// end-to-end forward/backward step of the desk-scale model.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ropelab/attention.h"
#include "ropelab/kernels.h"
#include "ropelab/model.h"
#include "ropelab/ops.h"
#include "ropelab/rope.h"
#include "ropelab/tensor.h"

namespace ropelab {
namespace {

std::vector<Real> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> dist;
  std::vector<Real> out(n);
  for (auto& x : out) x = dist(rng);
  return out;
}

using GemmFn = void (*)(std::span<const Real>, std::span<const Real>, std::span<Real>,
                        kernels::GemmDims, bool);

template <GemmFn Fn>
void BM_Gemm(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<Real> c(n * n);
  for (auto _ : state) {
    Fn(a, b, c, {n, n, n}, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(2 * n * n * n));
}

BENCHMARK(BM_Gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<kernels::omp::gemm_nn>)->Name("gemm_nn/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<kernels::omp::gemm_nt>)->Name("gemm_nt/omp")->Arg(64)->Arg(256);

using AttnFn = void (*)(const kernels::AttentionProblem&, std::span<const Real>,
                        std::span<const Real>, std::span<const Real>, std::span<Real>,
                        kernels::AttentionSaved*);

// range(0): sequence length; range(1): attention kind.
template <AttnFn Fn>
void BM_Attention(benchmark::State& state) {
  const int n = int(state.range(0)), heads = 4, d_k = 16;
  AttentionSpec spec;
  spec.kind = AttentionKind(state.range(1));
  spec.C = 64;
  spec.G = 10;
  spec.M = spec.kind == AttentionKind::kSelfExtend ? 32 : 64;
  spec.N = 4;
  spec.B = 32;
  const auto pattern = make_pattern(spec, n, false);
  const auto freqs = effective_frequencies(frequency_basis(d_k), scaling_none(d_k));
  kernels::AttentionProblem p;
  p.n = n;
  p.heads = heads;
  p.d_k = d_k;
  p.freqs = freqs;
  p.head_pattern.assign(heads, &pattern);
  const std::size_t size = std::size_t(n) * heads * d_k;
  const auto q = noise(size, 3), k = noise(size, 4), v = noise(size, 5);
  std::vector<Real> out(size);
  for (auto _ : state) {
    kernels::AttentionSaved saved;
    Fn(p, q, k, v, out, &saved);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetLabel(to_string(spec.kind));
}

void attention_args(benchmark::internal::Benchmark* b) {
  for (auto kind : {AttentionKind::kExact, AttentionKind::kLmInfinite,
                    AttentionKind::kSelfExtend, AttentionKind::kBlockwiseShifted}) {
    for (int n : {64, 256}) b->Args({n, long(kind)});
  }
}

BENCHMARK(BM_Attention<kernels::serial::attention_forward>)
    ->Name("attention/serial")
    ->Apply(attention_args);
BENCHMARK(BM_Attention<kernels::omp::attention_forward>)
    ->Name("attention/omp")
    ->Apply(attention_args);

void BM_TrainStep(benchmark::State& state) {
  TinyLMConfig c;
  c.C = int(state.range(0));
  TinyLM model(c, 1);
  std::mt19937_64 rng(6);
  std::vector<int> tokens(std::size_t(c.C)), targets(std::size_t(c.C));
  for (auto& t : tokens) t = int(rng() % std::uint64_t(c.vocab_size));
  for (auto& t : targets) t = int(rng() % std::uint64_t(c.vocab_size));
  ForwardOptions opts;
  opts.mode = AttentionMode::kTrain;
  for (auto _ : state) {
    backward(cross_entropy(model.forward(tokens, opts), targets));
    for (auto& p : model.params()) p.value.zero_grad();
  }
}

BENCHMARK(BM_TrainStep)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace ropelab

BENCHMARK_MAIN();
