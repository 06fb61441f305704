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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nullsteer/steering_plan.hpp"
#include "nullsteer/steering_solver.hpp"
#include "nullsteer/toy_model.hpp"

// Steering plans: per-layer (W P, lambda) entries applied as h + lambda W P h
// inside the forward pass. Plans are stored as a JSON manifest that points at
// one ACTV1 "operator" file per layer.

namespace nullsteer {

PlanEntry make_plan_entry(const Eigen::MatrixXd& effective, double lambda);

// h + lambda * (W P) h, evaluated in double.
std::vector<double> apply_steering(std::span<const double> h, const PlanEntry& entry);

// Throws when the plan is empty, a lambda is non-finite, a layer is out of
// range, or an operator does not match the hidden size.
void validate_plan(const SteeringPlan& plan, const ToyModelConfig& config);

TokenSequence steered_generate(const ToyModelParams& params, const ImageTensor* image,
                               const TokenSequence& prompt, const SteeringPlan& plan,
                               int max_new);

// Same plan with every lambda replaced.
SteeringPlan with_lambda(SteeringPlan plan, double lambda);

std::string_view to_string(SteeringScope scope);
SteeringScope steering_scope_from_string(std::string_view s);

// ACTV1 kind "operator": rows = cols = d, payload is W P column-major.
void save_operator(const std::filesystem::path& path, const SteeringMatrixSolution& sol,
                   int layer, double lambda, double tau, int rank_retained,
                   const std::string& model_id,
                   const nlohmann::json& extra = nlohmann::json::object());

struct LoadedOperator {
  int layer = -1;
  PlanEntry entry;
  nlohmann::json meta;
};
LoadedOperator load_operator(const std::filesystem::path& path);

// Writes the manifest; operator files are referenced relative to its directory.
void save_plan_manifest(const std::filesystem::path& path, const SteeringPlan& plan,
                        const std::vector<std::pair<int, std::string>>& operator_files,
                        const nlohmann::json& extra = nlohmann::json::object());
struct LoadedPlan {
  SteeringPlan plan;
  nlohmann::json manifest;
};
LoadedPlan load_plan(const std::filesystem::path& path);

}  // namespace nullsteer
