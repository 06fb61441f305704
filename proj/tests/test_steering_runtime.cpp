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
#include <random>

#include <doctest.h>

#include "nullsteer/errors.hpp"
#include "nullsteer/steering_runtime.hpp"
#include "test_util.hpp"

using namespace nullsteer;
using nullsteer::testing::TempDir;
using nullsteer::testing::gaussian;

namespace {

ToyModelConfig small_config() {
  ToyModelConfig c;
  c.hidden_dim = 16;
  c.num_layers = 3;
  c.num_heads = 2;
  c.vocab_size = 32;
  c.max_seq = 24;
  c.seed = 4;
  return c;
}

SteeringPlan random_plan(const ToyModelParams& params, int layer, double lambda,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SteeringPlan plan;
  plan.model_id = params.config.model_id();
  plan.entries[layer] = make_plan_entry(gaussian(16, 16, rng) * 0.3, lambda);
  return plan;
}

ImageTensor image(float v) { return ImageTensor::filled(16, v); }

}  // namespace

TEST_CASE("apply_steering") {
  const std::vector<double> h = {1.0, -2.0, 0.5};
  SUBCASE("lambda zero is the identity") {
    const PlanEntry e = make_plan_entry(Eigen::MatrixXd::Random(3, 3), 0.0);
    CHECK(apply_steering(h, e) == h);
  }
  SUBCASE("identity operator with lambda one doubles h") {
    const PlanEntry e = make_plan_entry(Eigen::MatrixXd::Identity(3, 3), 1.0);
    CHECK(apply_steering(h, e) == std::vector<double>{2.0, -4.0, 1.0});
  }
  SUBCASE("matches h + lambda M h") {
    std::mt19937_64 rng(1);
    const Eigen::MatrixXd m = gaussian(3, 3, rng);
    const PlanEntry e = make_plan_entry(m, 0.7);
    const Eigen::Vector3d hv(h[0], h[1], h[2]);
    const Eigen::Vector3d want = hv + 0.7 * m * hv;
    const auto got = apply_steering(h, e);
    for (int i = 0; i < 3; ++i) CHECK(got[i] == doctest::Approx(want(i)).epsilon(1e-14));
  }
  SUBCASE("shape mismatch throws") {
    const PlanEntry e = make_plan_entry(Eigen::MatrixXd::Identity(4, 4), 1.0);
    CHECK_THROWS_AS(apply_steering(h, e), ShapeError);
    CHECK_THROWS_AS(make_plan_entry(Eigen::MatrixXd::Identity(3, 4), 1.0), ShapeError);
  }
}

TEST_CASE("lambda zero and plan removal reproduce vanilla generation") {
  const auto params = init_model(small_config());
  const SteeringPlan plan = random_plan(params, 1, 2.0, 3);
  const SteeringPlan off = with_lambda(plan, 0.0);
  for (float v : {0.1f, 0.5f, 0.9f}) {
    const ImageTensor img = image(v);
    for (int t = 3; t < 10; ++t) {
      const TokenSequence prompt = {1, t, t + 1};
      const auto vanilla = generate(params, &img, prompt, 6);
      CHECK(steered_generate(params, &img, prompt, off, 6) == vanilla);
      CHECK(forward(params, &img, prompt, {}, &off).logits ==
            forward(params, &img, prompt).logits);
      (void)steered_generate(params, &img, prompt, plan, 6);
      CHECK(generate(params, &img, prompt, 6) == vanilla);
    }
  }
}

TEST_CASE("a nonzero plan changes the output distribution") {
  const auto params = init_model(small_config());
  const SteeringPlan plan = random_plan(params, 1, 3.0, 5);
  const ImageTensor img = image(0.4f);
  CHECK(forward(params, &img, {1, 5, 6}, {}, &plan).logits !=
        forward(params, &img, {1, 5, 6}).logits);
}

TEST_CASE("from_last_prompt scope leaves earlier positions alone") {
  const auto params = init_model(small_config());
  SteeringPlan plan = random_plan(params, 0, 3.0, 6);
  plan.scope = SteeringScope::kFromLastPrompt;
  const ImageTensor img = image(0.3f);
  const TokenSequence prompt = {1, 7, 8, 9};
  const ForwardRecord v = forward(params, &img, prompt);
  const ForwardRecord s = forward(params, &img, prompt, {}, &plan);
  for (int t = 0; t + 1 < static_cast<int>(prompt.size()); ++t) {
    const auto a = v.logits_row(t);
    const auto b = s.logits_row(t);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  const auto a = v.logits_row(3);
  const auto b = s.logits_row(3);
  CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_CASE("validate_plan") {
  const auto params = init_model(small_config());
  SteeringPlan plan = random_plan(params, 1, 1.0, 7);
  CHECK_NOTHROW(validate_plan(plan, params.config));
  SteeringPlan bad = plan;
  bad.entries[5] = bad.entries[1];
  CHECK_THROWS_AS(validate_plan(bad, params.config), RangeError);
  bad = plan;
  bad.entries[1].lambda = std::nan("");
  CHECK_THROWS_AS(validate_plan(bad, params.config), ValidationError);
  bad = plan;
  bad.entries[1] = make_plan_entry(Eigen::MatrixXd::Identity(8, 8), 1.0);
  CHECK_THROWS_AS(validate_plan(bad, params.config), ShapeError);
  CHECK_THROWS(validate_plan(SteeringPlan{}, params.config));
}

TEST_CASE("scope names") {
  for (SteeringScope s : {SteeringScope::kAllPositions, SteeringScope::kFromLastPrompt}) {
    CHECK(steering_scope_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(steering_scope_from_string("everywhere"), ConfigError);
}

TEST_CASE("operator files and plan manifests round trip") {
  TempDir tmp("plan");
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd hr = gaussian(16, 5, rng);
  const auto proj = compute_projection(hr);
  const auto sol = solve_steering_matrix(gaussian(16, 4, rng), gaussian(16, 4, rng), proj, 1.0);
  save_operator(tmp / "op.actv", sol, 1, 0.3, 1e-6, proj.rank_retained, "toy",
                {{"config_hash", "h"}});
  CHECK(validate_trace(tmp / "op.actv").ok());
  const LoadedOperator op = load_operator(tmp / "op.actv");
  CHECK(op.layer == 1);
  CHECK(op.entry.dim == 16);
  CHECK(op.entry.lambda == 0.3);
  CHECK(op.meta.at("config_hash") == "h");
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      CHECK(op.entry.effective[static_cast<std::size_t>(i) * 16 + j] ==
            static_cast<double>(static_cast<float>(sol.effective(i, j))));
    }
  }

  SteeringPlan plan;
  plan.model_id = "toy";
  plan.scope = SteeringScope::kFromLastPrompt;
  plan.entries[1] = op.entry;
  save_plan_manifest(tmp / "plan.json", plan, {{1, "op.actv"}});
  const LoadedPlan back = load_plan(tmp / "plan.json");
  CHECK(back.plan.scope == SteeringScope::kFromLastPrompt);
  CHECK(back.plan.model_id == "toy");
  CHECK(back.plan.entries.at(1).effective == op.entry.effective);
  CHECK(back.plan.entries.at(1).lambda == 0.3);

  CHECK_THROWS(save_plan_manifest(tmp / "bad.json", plan, {{2, "op.actv"}}));
  CHECK_THROWS(load_plan(tmp / "missing.json"));
}
