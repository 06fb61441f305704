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

#include "nullsteer/kernels.hpp"

#include <omp.h>

#include <cassert>
#include <cstddef>
#include <cstring>
#include <vector>

namespace nullsteer::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr long long kParallelWork = 1LL << 16;

bool worth_parallel(int m, int k, int n) {
  return static_cast<long long>(m) * k * n >= kParallelWork &&
         omp_get_max_threads() > 1;
}

template <class T>
struct VecOf;
template <>
struct VecOf<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct VecOf<double> {
  typedef double type __attribute__((vector_size(32)));
};
template <class T>
using Vec = typename VecOf<T>::type;

template <class T>
inline Vec<T> load_vec(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void store_vec(T* p, const Vec<T>& v) {
  std::memcpy(p, &v, sizeof(v));
}

// Register-blocked update of an RB x n block of c:
//   c[r, j] (+)= sum_q a(r, q) * b[q, j],  a(r, q) = a[r * ars + q * aqs].
// Each output element is accumulated over q in increasing order.
template <class T, int RB>
inline void block_update(const T* __restrict a, std::size_t ars, std::size_t aqs,
                         const T* __restrict b, std::size_t ldb,
                         T* __restrict c, std::size_t ldc, int depth, int n,
                         bool accumulate) {
  constexpr int W = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
  constexpr int NV = 2;
  constexpr int CB = W * NV;
  int j0 = 0;
  for (; j0 + CB <= n; j0 += CB) {
    Vec<T> acc[RB][NV];
    for (int r = 0; r < RB; ++r) {
      for (int v = 0; v < NV; ++v) {
        acc[r][v] = accumulate ? load_vec(c + r * ldc + j0 + v * W) : Vec<T>{};
      }
    }
    for (int q = 0; q < depth; ++q) {
      const T* brow = b + q * ldb + j0;
      Vec<T> bv[NV];
      for (int v = 0; v < NV; ++v) bv[v] = load_vec(brow + v * W);
      for (int r = 0; r < RB; ++r) {
        const T av = a[r * ars + q * aqs];
        for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
      }
    }
    for (int r = 0; r < RB; ++r) {
      for (int v = 0; v < NV; ++v) store_vec(c + r * ldc + j0 + v * W, acc[r][v]);
    }
  }
  if (j0 == n) return;
  const int width = n - j0;
  for (int r = 0; r < RB; ++r) {
    T* crow = c + r * ldc + j0;
    for (int jj = 0; jj < width; ++jj) {
      T acc = accumulate ? crow[jj] : T(0);
      for (int q = 0; q < depth; ++q) acc += a[r * ars + q * aqs] * b[q * ldb + j0 + jj];
      crow[jj] = acc;
    }
  }
}

template <class T>
inline T hsum(const Vec<T>& v) {
  constexpr int W = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
  T s = T(0);
  for (int i = 0; i < W; ++i) s += v[i];
  return s;
}

// c_row[j] (+)= dot(a_row, b[j, :]) for j < n, four rows of b at a time.
// Lane-wise partial sums make the order differ from the reference kernel.
template <class T>
inline void dot_rows(const T* __restrict a_row, const T* __restrict b,
                     T* __restrict c_row, int k, int n, bool accumulate) {
  constexpr int W = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
  constexpr int JB = 4;
  const int kv = k - k % W;
  int j = 0;
  auto finish = [&](int jj, T partial) {
    const T* brow = b + static_cast<std::size_t>(jj) * k;
    for (int p = kv; p < k; ++p) partial += a_row[p] * brow[p];
    c_row[jj] = accumulate ? c_row[jj] + partial : partial;
  };
  for (; j + JB <= n; j += JB) {
    Vec<T> acc[JB] = {};
    for (int p = 0; p < kv; p += W) {
      const Vec<T> av = load_vec<T>(a_row + p);
      for (int jj = 0; jj < JB; ++jj) {
        acc[jj] += av * load_vec<T>(b + static_cast<std::size_t>(j + jj) * k + p);
      }
    }
    for (int jj = 0; jj < JB; ++jj) finish(j + jj, hsum<T>(acc[jj]));
  }
  for (; j < n; ++j) {
    Vec<T> acc = {};
    for (int p = 0; p < kv; p += W) {
      acc += load_vec<T>(a_row + p) * load_vec<T>(b + static_cast<std::size_t>(j) * k + p);
    }
    finish(j, hsum<T>(acc));
  }
}

// Applies block_update to rows [0, rows) in blocks of four.
template <class T>
void blocked_rows(const T* a, std::size_t ars, std::size_t aqs, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc, int rows, int depth,
                  int n, bool accumulate, bool parallel) {
  constexpr int RB = 4;
  const int full = rows / RB;
#pragma omp parallel for schedule(static) if (parallel)
  for (int blk = 0; blk < full; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * RB;
    block_update<T, RB>(a + r0 * ars, ars, aqs, b, ldb, c + r0 * ldc, ldc, depth,
                        n, accumulate);
  }
  for (int r = full * RB; r < rows; ++r) {
    block_update<T, 1>(a + r * ars, ars, aqs, b, ldb, c + r * ldc, ldc, depth, n,
                       accumulate);
  }
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate) {
  assert(a.size() >= static_cast<std::size_t>(m) * k);
  assert(b.size() >= static_cast<std::size_t>(k) * n);
  assert(c.size() >= static_cast<std::size_t>(m) * n);
  blocked_rows(a.data(), k, 1, b.data(), n, c.data(), n, m, k, n, accumulate,
               worth_parallel(m, k, n));
}

template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate) {
  assert(a.size() >= static_cast<std::size_t>(m) * k);
  assert(b.size() >= static_cast<std::size_t>(n) * k);
  assert(c.size() >= static_cast<std::size_t>(m) * n);
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
#pragma omp parallel for schedule(static) if (worth_parallel(m, k, n))
  for (int i = 0; i < m; ++i) {
    dot_rows(pa + static_cast<std::size_t>(i) * k, pb,
             pc + static_cast<std::size_t>(i) * n, k, n, accumulate);
  }
}

template <class T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c,
                 int m, int k, int n) {
  assert(a.size() >= static_cast<std::size_t>(m) * k);
  assert(b.size() >= static_cast<std::size_t>(m) * n);
  assert(c.size() >= static_cast<std::size_t>(k) * n);
  // Output row p reads column p of a: row stride 1, depth stride k.
  blocked_rows(a.data(), 1, k, b.data(), n, c.data(), n, k, m, n, true,
               worth_parallel(m, k, n));
}

template <class T>
void colsum_acc(std::span<const T> a, std::span<T> out, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const T* row = a.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) out[j] += row[j];
  }
}

namespace reference {

template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int p = 0; p < k; ++p) {
        acc += a[static_cast<std::size_t>(i) * k + p] *
               b[static_cast<std::size_t>(p) * n + j];
      }
      T& out = c[static_cast<std::size_t>(i) * n + j];
      out = accumulate ? out + acc : acc;
    }
  }
}

template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int p = 0; p < k; ++p) {
        acc += a[static_cast<std::size_t>(i) * k + p] *
               b[static_cast<std::size_t>(j) * k + p];
      }
      T& out = c[static_cast<std::size_t>(i) * n + j];
      out = accumulate ? out + acc : acc;
    }
  }
}

template <class T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c,
                 int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int i = 0; i < m; ++i) {
        acc += a[static_cast<std::size_t>(i) * k + p] *
               b[static_cast<std::size_t>(i) * n + j];
      }
      c[static_cast<std::size_t>(p) * n + j] += acc;
    }
  }
}

}  // namespace reference

#define NULLSTEER_INSTANTIATE(T)                                              \
  template void gemm_nn<T>(std::span<const T>, std::span<const T>,           \
                           std::span<T>, int, int, int, bool);               \
  template void gemm_nt<T>(std::span<const T>, std::span<const T>,           \
                           std::span<T>, int, int, int, bool);               \
  template void gemm_tn_acc<T>(std::span<const T>, std::span<const T>,       \
                               std::span<T>, int, int, int);                 \
  template void colsum_acc<T>(std::span<const T>, std::span<T>, int, int);   \
  template void reference::gemm_nn<T>(std::span<const T>, std::span<const T>, \
                                      std::span<T>, int, int, int, bool);    \
  template void reference::gemm_nt<T>(std::span<const T>, std::span<const T>, \
                                      std::span<T>, int, int, int, bool);    \
  template void reference::gemm_tn_acc<T>(                                   \
      std::span<const T>, std::span<const T>, std::span<T>, int, int, int);

NULLSTEER_INSTANTIATE(float)
NULLSTEER_INSTANTIATE(double)

#undef NULLSTEER_INSTANTIATE

}  // namespace nullsteer::kernels
