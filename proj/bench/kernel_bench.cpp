// Serial reference vs OpenMP kernels on model-sized and larger shapes.

#include <benchmark/benchmark.h>

#include <vector>

#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  moelab::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_matmul(benchmark::State& state) {
  const auto m = std::size_t(state.range(0)), k = std::size_t(state.range(1)), n = std::size_t(state.range(2));
  const auto a = filled(m * k, 1), b = filled(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      moelab::kernels::matmul(a, b, c, m, k, n);
    } else {
      moelab::kernels::serial::matmul(a, b, c, m, k, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(2 * m * k * n));
}

template <bool Parallel>
void BM_matmul_at_b(benchmark::State& state) {
  const auto m = std::size_t(state.range(0)), k = std::size_t(state.range(1)), n = std::size_t(state.range(2));
  const auto a = filled(m * k, 3), b = filled(m * n, 4);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      moelab::kernels::matmul_at_b(a, b, c, m, k, n);
    } else {
      moelab::kernels::serial::matmul_at_b(a, b, c, m, k, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(2 * m * k * n));
}

template <bool Parallel>
void BM_gelu(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const auto x = filled(n, 5);
  std::vector<double> y(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      moelab::kernels::gelu(x, y);
    } else {
      moelab::kernels::serial::gelu(x, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(n));
}


}  // namespace

BENCHMARK(BM_matmul<false>)->Name("matmul/serial")->ArgsProduct({{160, 512}, {32, 512}, {64, 512}});
BENCHMARK(BM_matmul<true>)->Name("matmul/openmp")->ArgsProduct({{160, 512}, {32, 512}, {64, 512}});
BENCHMARK(BM_matmul_at_b<false>)->Name("matmul_at_b/serial")->Args({160, 32, 64})->Args({512, 512, 512});
BENCHMARK(BM_matmul_at_b<true>)->Name("matmul_at_b/openmp")->Args({160, 32, 64})->Args({512, 512, 512});
BENCHMARK(BM_gelu<false>)->Name("gelu/serial")->Arg(10240)->Arg(1 << 20);
BENCHMARK(BM_gelu<true>)->Name("gelu/openmp")->Arg(10240)->Arg(1 << 20);

BENCHMARK_MAIN();
