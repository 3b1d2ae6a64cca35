// OpenMP kernels against their serial references.

#include <benchmark/benchmark.h>

#include <vector>

#include "qforget/kernels.hpp"
#include "qforget/rng.hpp"

namespace {

using namespace qforget;

std::vector<double> values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = values(n * n, 1), b = values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm(kernels::Trans::No, kernels::Trans::Yes, n, n, n, a.data(), b.data(), c.data());
    } else {
      kernels::gemm_reference(kernels::Trans::No, kernels::Trans::Yes, n, n, n, a.data(), b.data(), c.data());
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <bool Parallel>
void BM_QuantizeRows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto src = values(n * n, 3);
  std::vector<double> w;
  for (auto _ : state) {
    w = src;
    if constexpr (Parallel) {
      kernels::fake_quantize_rows(w, n, 7);
    } else {
      kernels::fake_quantize_rows_reference(w, n, 7);
    }
    benchmark::DoNotOptimize(w.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n));
}

template <bool Parallel>
void BM_MaxAbs(benchmark::State& state) {
  const auto v = values(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::max_abs(v) : kernels::max_abs_reference(v));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * state.range(0)));
}

BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_QuantizeRows<true>)->Arg(128)->Arg(512);
BENCHMARK(BM_QuantizeRows<false>)->Arg(128)->Arg(512);
BENCHMARK(BM_MaxAbs<true>)->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(BM_MaxAbs<false>)->Arg(1 << 16)->Arg(1 << 20);

}  // namespace

BENCHMARK_MAIN();
