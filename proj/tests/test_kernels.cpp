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


#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <doctest.h>

#include "nullsteer/kernels.hpp"

using namespace nullsteer;

namespace {

template <class T>
std::vector<T> filled(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

// |x - y| <= 2 k u (|c0| + sum |a||b|) elementwise; `scale` holds the bracket.
template <class T>
bool within_rounding(const std::vector<T>& x, const std::vector<T>& y,
                     const std::vector<T>& scale, int k) {
  const double u = std::numeric_limits<T>::epsilon() / 2;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(static_cast<double>(x[i]) - y[i]) > 2.0 * (k + 2) * u * scale[i]) return false;
  }
  return true;
}

template <class T>
std::vector<T> abs_of(std::vector<T> v) {
  for (auto& x : v) x = std::abs(x);
  return v;
}

}  // namespace

TEST_CASE_TEMPLATE("parallel kernels agree with the serial reference", T, float, double) {
  for (auto [m, k, n] : {std::array{1, 1, 1}, std::array{7, 13, 5}, std::array{64, 64, 256},
                         std::array{33, 256, 64}}) {
    const auto a = filled<T>(static_cast<std::size_t>(m) * k, 1);
    const auto b_nn = filled<T>(static_cast<std::size_t>(k) * n, 2);
    const auto b_nt = filled<T>(static_cast<std::size_t>(n) * k, 3);
    const auto seed_c = filled<T>(static_cast<std::size_t>(m) * n, 4);

    const auto abs_a = abs_of(a);
    for (bool acc : {false, true}) {
      auto scale = acc ? abs_of(seed_c) : std::vector<T>(seed_c.size(), T(0));
      kernels::reference::gemm_nn<T>(abs_a, abs_of(b_nn), scale, m, k, n, true);
      auto c1 = seed_c, c2 = seed_c;
      kernels::gemm_nn<T>(a, b_nn, c1, m, k, n, acc);
      kernels::reference::gemm_nn<T>(a, b_nn, c2, m, k, n, acc);
      CHECK(within_rounding(c1, c2, scale, k));

      scale = acc ? abs_of(seed_c) : std::vector<T>(seed_c.size(), T(0));
      kernels::reference::gemm_nt<T>(abs_a, abs_of(b_nt), scale, m, k, n, true);
      c1 = seed_c;
      c2 = seed_c;
      kernels::gemm_nt<T>(a, b_nt, c1, m, k, n, acc);
      kernels::reference::gemm_nt<T>(a, b_nt, c2, m, k, n, acc);
      CHECK(within_rounding(c1, c2, scale, k));
    }
    const auto b_tn = filled<T>(static_cast<std::size_t>(m) * n, 5);
    auto c1 = filled<T>(static_cast<std::size_t>(k) * n, 6);
    auto c2 = c1;
    auto scale = abs_of(c1);
    kernels::reference::gemm_tn_acc<T>(abs_a, abs_of(b_tn), scale, m, k, n);
    kernels::gemm_tn_acc<T>(a, b_tn, c1, m, k, n);
    kernels::reference::gemm_tn_acc<T>(a, b_tn, c2, m, k, n);
    CHECK(within_rounding(c1, c2, scale, m));
  }
}

TEST_CASE("gemm_nn matches a hand-computed product") {
  const std::vector<double> a = {1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> b = {7, 8, 9, 10, 11, 12};  // 3x2
  std::vector<double> c(4);
  kernels::gemm_nn<double>(a, b, c, 2, 3, 2);
  CHECK(c == std::vector<double>{58, 64, 139, 154});
  kernels::gemm_nn<double>(a, b, c, 2, 3, 2, true);
  CHECK(c == std::vector<double>{116, 128, 278, 308});
}

TEST_CASE("gemm_nt and gemm_tn_acc follow their transposition conventions") {
  const std::vector<double> a = {1, 2, 3, 4, 5, 6};  // 2x3
  std::vector<double> c(4);
  kernels::gemm_nt<double>(a, a, c, 2, 3, 2);  // a a^T
  CHECK(c == std::vector<double>{14, 32, 32, 77});
  std::vector<double> g(9, 0.0);
  kernels::gemm_tn_acc<double>(a, a, g, 2, 3, 3);  // a^T a
  CHECK(g == std::vector<double>{17, 22, 27, 22, 29, 36, 27, 36, 45});
}

TEST_CASE("colsum_acc adds column sums") {
  const std::vector<float> a = {1, 2, 3, 4, 5, 6};
  std::vector<float> out = {1, 1, 1};
  kernels::colsum_acc<float>(a, out, 2, 3);
  CHECK(out == std::vector<float>{6, 8, 10});
}

TEST_CASE("thread count is positive") { CHECK(kernels::max_threads() >= 1); }
