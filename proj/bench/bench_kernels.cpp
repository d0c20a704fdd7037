// Serial reference kernels against their OpenMP counterparts at the shapes
// the reference model uses.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "tcpllm/kernels.hpp"

namespace k = tcpllm::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), n = static_cast<std::size_t>(st.range(1)),
             p = static_cast<std::size_t>(st.range(2));
  const auto a = noise(m * n, 1), b = noise(n * p, 2);
  std::vector<float> c(m * p);
  for (auto _ : st) {
    if constexpr (Parallel) k::gemm(a.data(), b.data(), c.data(), m, n, p);
    else k::serial::gemm(a.data(), b.data(), c.data(), m, n, p);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * m * n * p));
}

template <bool Parallel>
void BM_layer_norm(benchmark::State& st) {
  const auto rows = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const auto x = noise(rows * d, 3);
  std::vector<float> y(rows * d), inv(rows);
  for (auto _ : st) {
    if constexpr (Parallel) k::layer_norm_fwd(x.data(), y.data(), inv.data(), rows, d, 1e-5f);
    else k::serial::layer_norm_fwd(x.data(), y.data(), inv.data(), rows, d, 1e-5f);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_attention(benchmark::State& st) {
  const k::AttnDims dims{static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)), 2, 32};
  const std::size_t rows = dims.batch * dims.len, w = dims.width();
  const auto q = noise(rows * w, 4), kk = noise(rows * w, 5), v = noise(rows * w, 6);
  const std::vector<std::uint8_t> valid(rows, 1);
  std::vector<float> out(rows * w), probs(dims.batch * dims.heads * dims.len * dims.len);
  for (auto _ : st) {
    if constexpr (Parallel) k::attention_fwd(dims, q.data(), kk.data(), v.data(), valid.data(), out.data(), probs.data());
    else k::serial::attention_fwd(dims, q.data(), kk.data(), v.data(), valid.data(), out.data(), probs.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Args({1920, 64, 64})->Args({1920, 64, 256})->Args({512, 512, 512});
BENCHMARK(BM_gemm<true>)->Name("gemm/omp")->Args({1920, 64, 64})->Args({1920, 64, 256})->Args({512, 512, 512});
BENCHMARK(BM_layer_norm<false>)->Name("layer_norm/serial")->Args({1920, 64});
BENCHMARK(BM_layer_norm<true>)->Name("layer_norm/omp")->Args({1920, 64});
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Args({16, 60})->Args({1, 120});
BENCHMARK(BM_attention<true>)->Name("attention/omp")->Args({16, 60})->Args({1, 120});

BENCHMARK_MAIN();
