// Copyright 2026 The nullsteer Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Serial reference vs OpenMP kernels at the shapes the toy model uses:
// a sequence of ~32 tokens against d=64 projections and the V=256 unembedding.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "nullsteer/kernels.hpp"

namespace {

namespace k = nullsteer::kernels;

std::vector<float> filled(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_gemm_nt(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int kdim = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  const auto a = filled(static_cast<std::size_t>(m) * kdim, 1);
  const auto b = filled(static_cast<std::size_t>(n) * kdim, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::gemm_nt<float>(a, b, c, m, kdim, n);
    } else {
      k::reference::gemm_nt<float>(a, b, c, m, kdim, n);
    }
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * int64_t{2} * m * kdim * n);
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int kdim = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  const auto a = filled(static_cast<std::size_t>(m) * kdim, 3);
  const auto b = filled(static_cast<std::size_t>(kdim) * n, 4);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::gemm_nn<float>(a, b, c, m, kdim, n);
    } else {
      k::reference::gemm_nn<float>(a, b, c, m, kdim, n);
    }
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * int64_t{2} * m * kdim * n);
}

template <bool Parallel>
void BM_gemm_tn_acc(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int kdim = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  const auto a = filled(static_cast<std::size_t>(m) * kdim, 5);
  const auto b = filled(static_cast<std::size_t>(m) * n, 6);
  std::vector<float> c(static_cast<std::size_t>(kdim) * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::gemm_tn_acc<float>(a, b, c, m, kdim, n);
    } else {
      k::reference::gemm_tn_acc<float>(a, b, c, m, kdim, n);
    }
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * int64_t{2} * m * kdim * n);
}

// {tokens, inner, outer}: qkv projection, MLP up, unembedding
void shapes(benchmark::internal::Benchmark* b) {
  b->Args({32, 64, 64})->Args({32, 64, 256})->Args({32, 256, 64})->Args({128, 64, 256});
}

}  // namespace

BENCHMARK(BM_gemm_nt<false>)->Name("gemm_nt/serial")->Apply(shapes);
BENCHMARK(BM_gemm_nt<true>)->Name("gemm_nt/openmp")->Apply(shapes);
BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Apply(shapes);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/openmp")->Apply(shapes);
BENCHMARK(BM_gemm_tn_acc<false>)->Name("gemm_tn_acc/serial")->Apply(shapes);
BENCHMARK(BM_gemm_tn_acc<true>)->Name("gemm_tn_acc/openmp")->Apply(shapes);

BENCHMARK_MAIN();
