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

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullsteer/adversarial.hpp"
#include "nullsteer/eval_bench.hpp"
#include "nullsteer/steering_plan.hpp"
#include "nullsteer/toy_model.hpp"

// Stage-by-stage experiment driver. Each stage reads its inputs from and
// writes its outputs to ExperimentConfig::output_dir; every artifact carries
// the hash of the config that produced it.

namespace nullsteer {

struct ExperimentConfig {
  ToyModelConfig model;
  BenchmarkOptions bench;
  TrainHyper pretrain;
  TrainHyper finetune;
  AdversarialBudget attack;
  int contrast_pairs = 48;
  std::uint64_t contrast_seed = 7;
  std::vector<int> layers;  // default {0}: the only layer where retain and forget separate at d=64
  double tau = 1e-3;
  double gamma = 1.0;
  double lambda = 3.0;
  double retain_holdout = 0.2;  // fraction of retain prompts kept out of H_r
  std::uint64_t holdout_seed = 5;
  SteeringScope scope = SteeringScope::kAllPositions;
  int max_new_tokens = 8;  // generation length for ROUGE-L
  std::filesystem::path output_dir = "run";

  ExperimentConfig();

  void validate() const;  // throws ConfigError
  // output_dir is not part of the JSON used for hashing.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  // FNV-1a 64 of the canonical JSON, as 16 hex digits.
  std::string hash() const;
};

std::uint64_t fnv1a64(std::string_view bytes);

namespace artifacts {
inline constexpr const char* kBenchmark = "benchmark.json";
inline constexpr const char* kModel = "model.actv";
inline constexpr const char* kTrainLog = "train_log.json";
inline constexpr const char* kAdversarial = "adversarial_images.actv";
inline constexpr const char* kAttack = "attack.json";
inline constexpr const char* kPlan = "plan.json";
inline constexpr const char* kSolve = "solve.json";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kReportText = "report.txt";
std::string activations(const std::string& set, int layer);  // acts_<set>_l<layer>.actv
std::string direction(int layer);
std::string op(int layer);
std::string eval(bool steered);
}  // namespace artifacts

// Each stage returns a short JSON summary and logs progress to `log`.
nlohmann::json cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_train(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_attack(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_extract(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_solve(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_eval(const ExperimentConfig& cfg, bool steered, std::ostream& log);
nlohmann::json cmd_report(const ExperimentConfig& cfg, std::ostream& log);
// All of the above in order.
nlohmann::json cmd_run(const ExperimentConfig& cfg, std::ostream& log);

// Prompts of a split in the order used for activation extraction:
// classification, generation, cloze.
std::vector<std::pair<const ImageTensor*, TokenSequence>> split_prompts(const SplitData& split);

// Retain prompt indices used for H_r (first) and held out (second).
std::pair<std::vector<int>, std::vector<int>> retain_partition(int n, double holdout,
                                                               std::uint64_t seed);

}  // namespace nullsteer
