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

#pragma once

#include <span>

// Dense row-major matrix products used by the toy transformer.
//
// Every kernel has an OpenMP-parallel version (namespace kernels) and a plain
// serial version (namespace kernels::reference) that the tests and the
// benchmark compare against. Parallel kernels split work over output rows and
// vectorize the inner loops, so results agree with the reference to within
// ordinary dot-product rounding, not bit for bit.

namespace nullsteer::kernels {

// c[m x n] = a[m x k] * b[k x n]   (c += ... when accumulate is set)
template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate = false);

// c[m x n] = a[m x k] * b[n x k]^T   (c += ... when accumulate is set)
template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate = false);

// c[k x n] += a[m x k]^T * b[m x n]
template <class T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c,
                 int m, int k, int n);

// out[j] += sum_i a[i x n][j]
template <class T>
void colsum_acc(std::span<const T> a, std::span<T> out, int m, int n);

// Number of threads the parallel kernels will use.
int max_threads();

namespace reference {

template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate = false);

template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m,
             int k, int n, bool accumulate = false);

template <class T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c,
                 int m, int k, int n);

}  // namespace reference

}  // namespace nullsteer::kernels
