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


#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/errors.hpp"
#include "test_util.hpp"

using namespace nullsteer;
using nullsteer::testing::TempDir;
using nullsteer::testing::actv_bytes;
using nullsteer::testing::read_bytes;
using nullsteer::testing::write_bytes;

namespace {

ActivationMatrix random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 3.0f);
  ActivationMatrix m(rows, cols);
  for (auto& v : m.data) v = n(rng);
  m.layer = 2;
  m.split = SplitTag::kRetain;
  m.model_id = "test";
  return m;
}

bool contains(const ValidationReport& r, const std::string& needle) {
  for (const auto& v : r.violations) {
    if (v.find(needle) != std::string::npos) return true;
  }
  return false;
}

const char* kHeader2x3 =
    R"({"cols":3,"dtype":"f32le","kind":"activations","layer":1,"model_id":"m","rows":2,)"
    R"("split_tag":"forget","token_policy":"last_prompt_token"})";

}  // namespace

TEST_CASE("hand-built ACTV1 bytes decode column-major") {
  TempDir dir("actv");
  // Columns (1,2), (3,4), (5,6).
  write_bytes(dir / "h.actv", actv_bytes(kHeader2x3, {1, 2, 3, 4, 5, 6}));
  CHECK(validate_trace(dir / "h.actv").ok());
  const ActivationMatrix m = read_trace(dir / "h.actv");
  REQUIRE(m.rows == 2);
  REQUIRE(m.cols == 3);
  CHECK(m.layer == 1);
  CHECK(m.split == SplitTag::kForget);
  CHECK(m.at(0, 0) == 1.0f);
  CHECK(m.at(1, 0) == 2.0f);
  CHECK(m.at(0, 2) == 5.0f);
  CHECK(m.at(1, 2) == 6.0f);
}

TEST_CASE("writer output matches hand-built bytes") {
  TempDir dir("actv");
  ActivationMatrix m(2, 3);
  m.data = {1, 2, 3, 4, 5, 6};
  m.layer = 1;
  m.split = SplitTag::kForget;
  m.model_id = "m";
  write_trace(dir / "w.actv", m);
  CHECK(read_bytes(dir / "w.actv") == actv_bytes(kHeader2x3, m.data));
}

TEST_CASE("2x3 zero matrix has the documented file size") {
  TempDir dir("actv");
  ActivationMatrix m(2, 3);
  m.model_id = "z";
  write_trace(dir / "z.actv", m);
  const auto bytes = read_bytes(dir / "z.actv");
  std::uint32_t header_len = 0;
  for (int i = 0; i < 4; ++i) header_len |= static_cast<std::uint32_t>(bytes[5 + i]) << (8 * i);
  CHECK(bytes.size() == 5 + 4 + header_len + 24);
}

TEST_CASE("round trip is bit-exact") {
  TempDir dir("actv");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ActivationMatrix m = random_matrix(64, 10, seed);
    m.data[3] = -0.0f;
    m.data[7] = std::numeric_limits<float>::denorm_min();
    m.data[11] = std::numeric_limits<float>::max();
    write_trace(dir / "r.actv", m);
    const ActivationMatrix back = read_trace(dir / "r.actv");
    REQUIRE(back.data.size() == m.data.size());
    CHECK(std::memcmp(back.data.data(), m.data.data(), m.data.size() * sizeof(float)) == 0);
    CHECK(back.rows == m.rows);
    CHECK(back.cols == m.cols);
    CHECK(back.layer == m.layer);
    CHECK(back.split == m.split);
    CHECK(back.model_id == m.model_id);
  }
}

TEST_CASE("non-finite matrix is rejected before any file is written") {
  TempDir dir("actv");
  ActivationMatrix m = random_matrix(4, 2, 1);
  m.data[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(write_trace(dir / "nan.actv", m), ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir / "nan.actv"));
  m.data[5] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(write_trace(dir / "inf.actv", m), ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir / "inf.actv"));
}

TEST_CASE("bad magic is a format error") {
  TempDir dir("actv");
  auto bytes = actv_bytes(kHeader2x3, {1, 2, 3, 4, 5, 6});
  std::memcpy(bytes.data(), "XXXXX", 5);
  write_bytes(dir / "x.actv", bytes);
  CHECK_THROWS_AS(read_trace(dir / "x.actv"), FormatError);
  CHECK(contains(validate_trace(dir / "x.actv"), "magic"));
}

TEST_CASE("truncated payload is a corruption error") {
  TempDir dir("actv");
  auto bytes = actv_bytes(kHeader2x3, {1, 2, 3, 4, 5, 6});
  bytes.resize(bytes.size() - 3);
  write_bytes(dir / "t.actv", bytes);
  CHECK_THROWS_AS(read_trace(dir / "t.actv"), CorruptionError);
  CHECK_FALSE(validate_trace(dir / "t.actv").ok());
}

TEST_CASE("header invariants are reported") {
  TempDir dir("actv");
  write_bytes(dir / "rows.actv",
       actv_bytes(R"({"cols":3,"dtype":"f32le","kind":"activations","layer":1,"model_id":"m",)"
                  R"("rows":0,"token_policy":"last_prompt_token"})",
                  {}));
  CHECK(contains(validate_trace(dir / "rows.actv"), "rows > 0 violated"));

  write_bytes(dir / "dtype.actv",
       actv_bytes(R"({"cols":3,"dtype":"f64le","kind":"activations","layer":1,"model_id":"m",)"
                  R"("rows":2,"token_policy":"last_prompt_token"})",
                  {1, 2, 3, 4, 5, 6}));
  CHECK(contains(validate_trace(dir / "dtype.actv"), "unsupported dtype"));

  write_bytes(dir / "policy.actv",
       actv_bytes(R"({"cols":3,"dtype":"f32le","kind":"activations","layer":1,"model_id":"m",)"
                  R"("rows":2,"token_policy":"mean_pool"})",
                  {1, 2, 3, 4, 5, 6}));
  CHECK(contains(validate_trace(dir / "policy.actv"), "token_policy"));
}

TEST_CASE("validate_trace reports non-finite payload and never throws") {
  TempDir dir("actv");
  write_bytes(dir / "nan.actv",
       actv_bytes(kHeader2x3, {1, 2, std::numeric_limits<float>::quiet_NaN(), 4, 5, 6}));
  ValidationReport r;
  CHECK_NOTHROW(r = validate_trace(dir / "nan.actv"));
  CHECK(contains(r, "non-finite"));
  CHECK_NOTHROW(r = validate_trace(dir / "missing.actv"));
  CHECK_FALSE(r.ok());
}

TEST_CASE("extra header keys survive a round trip") {
  TempDir dir("actv");
  const ActivationMatrix m = random_matrix(3, 2, 9);
  write_trace(dir / "e.actv", m, {{"config_hash", "00ff"}});
  const TraceFile tf = read_container(dir / "e.actv");
  CHECK(tf.meta.at("config_hash") == "00ff");
  CHECK(tf.meta.at("token_policy") == std::string(kLastPromptToken));
}

TEST_CASE("split tags round trip through their names") {
  for (SplitTag t : {SplitTag::kForget, SplitTag::kRetain, SplitTag::kContrastPos,
                     SplitTag::kContrastNeg, SplitTag::kOther}) {
    CHECK(split_tag_from_string(to_string(t)) == t);
  }
  CHECK(split_tag_from_string("calibration") == SplitTag::kOther);
}
