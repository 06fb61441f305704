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


#include "nullsteer/steering_runtime.hpp"

#include <cmath>
#include <fstream>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/errors.hpp"

namespace nullsteer {

PlanEntry make_plan_entry(const Eigen::MatrixXd& effective, double lambda) {
  if (effective.rows() != effective.cols() || effective.rows() == 0) {
    throw ShapeError("steering operator must be a non-empty square matrix");
  }
  PlanEntry e;
  e.dim = static_cast<int>(effective.rows());
  e.lambda = lambda;
  e.effective.resize(static_cast<std::size_t>(e.dim) * e.dim);
  for (int i = 0; i < e.dim; ++i) {
    for (int j = 0; j < e.dim; ++j) e.effective[static_cast<std::size_t>(i) * e.dim + j] = effective(i, j);
  }
  return e;
}

std::vector<double> apply_steering(std::span<const double> h, const PlanEntry& entry) {
  const int d = entry.dim;
  if (static_cast<int>(h.size()) != d ||
      entry.effective.size() != static_cast<std::size_t>(d) * d) {
    throw ShapeError("apply_steering: vector has " + std::to_string(h.size()) +
                     " entries, operator expects " + std::to_string(d));
  }
  std::vector<double> out(d);
  for (int i = 0; i < d; ++i) {
    const double* m = entry.effective.data() + static_cast<std::size_t>(i) * d;
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += m[j] * h[j];
    out[i] = h[i] + entry.lambda * acc;
  }
  return out;
}

void validate_plan(const SteeringPlan& plan, const ToyModelConfig& config) {
  if (plan.entries.empty()) throw ValidationError("steering plan has no entries");
  for (const auto& [layer, e] : plan.entries) {
    if (layer < 0 || layer >= config.num_layers) {
      throw RangeError("steering plan layer " + std::to_string(layer) + " outside [0, " +
                       std::to_string(config.num_layers) + ")");
    }
    if (!std::isfinite(e.lambda)) throw ValidationError("steering lambda is not finite");
    if (e.dim != config.hidden_dim ||
        e.effective.size() != static_cast<std::size_t>(e.dim) * e.dim) {
      throw ShapeError("steering operator for layer " + std::to_string(layer) +
                       " does not match hidden size " + std::to_string(config.hidden_dim));
    }
  }
}

TokenSequence steered_generate(const ToyModelParams& params, const ImageTensor* image,
                               const TokenSequence& prompt, const SteeringPlan& plan,
                               int max_new) {
  validate_plan(plan, params.config);
  return generate(params, image, prompt, max_new, &plan);
}

SteeringPlan with_lambda(SteeringPlan plan, double lambda) {
  for (auto& [layer, e] : plan.entries) e.lambda = lambda;
  return plan;
}

std::string_view to_string(SteeringScope scope) {
  return scope == SteeringScope::kAllPositions ? "all_positions" : "from_last_prompt";
}

SteeringScope steering_scope_from_string(std::string_view s) {
  if (s == "all_positions") return SteeringScope::kAllPositions;
  if (s == "from_last_prompt") return SteeringScope::kFromLastPrompt;
  throw ConfigError("unknown steering scope '" + std::string(s) + "'");
}

void save_operator(const std::filesystem::path& path, const SteeringMatrixSolution& sol,
                   int layer, double lambda, double tau, int rank_retained,
                   const std::string& model_id, const nlohmann::json& extra) {
  const int d = static_cast<int>(sol.effective.rows());
  if (sol.effective.cols() != d) throw ShapeError("operator must be square");
  nlohmann::json meta = extra;
  meta["kind"] = "operator";
  meta["rows"] = d;
  meta["cols"] = d;
  meta["layer"] = layer;
  meta["model_id"] = model_id;
  meta["token_policy"] = std::string(kLastPromptToken);
  meta["gamma"] = sol.gamma;
  meta["lambda"] = lambda;
  meta["tau"] = tau;
  meta["rank_retained"] = rank_retained;
  meta["residual"] = sol.residual;
  std::vector<float> payload(static_cast<std::size_t>(d) * d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) {
      payload[static_cast<std::size_t>(j) * d + i] = static_cast<float>(sol.effective(i, j));
    }
  }
  write_container(path, meta, payload);
}

LoadedOperator load_operator(const std::filesystem::path& path) {
  TraceFile f = read_container(path);
  if (f.meta.at("kind") != "operator") {
    throw FormatError(path.string() + " is not an operator file");
  }
  const int d = f.meta.at("rows").get<int>();
  if (f.meta.at("cols").get<int>() != d) throw ShapeError("operator file is not square");
  LoadedOperator op;
  op.layer = f.meta.at("layer").get<int>();
  op.entry.dim = d;
  op.entry.lambda = f.meta.value("lambda", 0.0);
  op.entry.effective.resize(static_cast<std::size_t>(d) * d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) {
      op.entry.effective[static_cast<std::size_t>(i) * d + j] =
          f.payload[static_cast<std::size_t>(j) * d + i];
    }
  }
  op.meta = std::move(f.meta);
  return op;
}

void save_plan_manifest(const std::filesystem::path& path, const SteeringPlan& plan,
                        const std::vector<std::pair<int, std::string>>& operator_files,
                        const nlohmann::json& extra) {
  nlohmann::json j = extra;
  j["model_id"] = plan.model_id;
  j["scope"] = std::string(to_string(plan.scope));
  j["entries"] = nlohmann::json::array();
  for (const auto& [layer, file] : operator_files) {
    const auto it = plan.entries.find(layer);
    if (it == plan.entries.end()) throw ValidationError("operator file for a layer not in the plan");
    j["entries"].push_back({{"layer", layer}, {"lambda", it->second.lambda}, {"operator", file}});
  }
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("cannot write plan manifest " + path.string());
}

LoadedPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan manifest " + path.string());
  LoadedPlan out;
  try {
    out.manifest = nlohmann::json::parse(in);
    out.plan.model_id = out.manifest.at("model_id").get<std::string>();
    out.plan.scope = steering_scope_from_string(out.manifest.value("scope", "all_positions"));
    for (const auto& e : out.manifest.at("entries")) {
      const auto file = path.parent_path() / e.at("operator").get<std::string>();
      LoadedOperator op = load_operator(file);
      const int layer = e.at("layer").get<int>();
      if (op.layer != layer) {
        throw ValidationError("operator " + file.string() + " is for layer " +
                              std::to_string(op.layer) + ", manifest says " +
                              std::to_string(layer));
      }
      op.entry.lambda = e.at("lambda").get<double>();
      out.plan.entries[layer] = std::move(op.entry);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed plan manifest " + path.string() + ": " + e.what());
  }
  if (out.plan.entries.empty()) throw ValidationError("plan manifest has no entries");
  return out;
}

}  // namespace nullsteer
