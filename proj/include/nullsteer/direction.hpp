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
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/adversarial.hpp"
#include "nullsteer/eval_bench.hpp"
#include "nullsteer/toy_model.hpp"

// Contrast sets and the difference-in-means erasure direction.

namespace nullsteer {

enum class Polarity { kPositiveErasure, kNegativeRecall };

struct ContrastPair {
  ImageTensor image;
  TokenSequence prompt;
  Polarity polarity = Polarity::kPositiveErasure;
  int subject = 0;  // token id of the sensitive subject
  int item = -1;    // index into Benchmark::harmful
};

struct ContrastSets {
  std::vector<ContrastPair> positive;  // clean image, refused prompt
  std::vector<ContrastPair> negative;  // adversarial image, jailbreak prompt
  std::vector<std::vector<double>> pgd_objectives;  // one trace per negative
};

// Positives pair each subject's clean image with the plain (refused) question.
// Negatives pair a PGD image, crafted against the plain question with the
// subject's compliance response as target, with the jailbreak question.
ContrastSets build_contrast_sets(const Benchmark& bench, const ToyModelParams& params,
                                 const AdversarialBudget& budget, int n_pairs,
                                 std::uint64_t seed);

struct PromptInput {
  const ImageTensor* image = nullptr;
  TokenSequence prompt;
};

// d x N matrix of last-prompt-token hidden states after block `layer`.
ActivationMatrix collect_activations(const ToyModelParams& params,
                                     std::span<const PromptInput> inputs, int layer,
                                     SplitTag tag = SplitTag::kOther);
ActivationMatrix collect_activations(const ToyModelParams& params,
                                     std::span<const ContrastPair> pairs, int layer);

struct ErasureDirection {
  int layer = -1;
  std::vector<float> vector;
  double norm = 0.0;
  int n_pos = 0;
  int n_neg = 0;
};

// mean(positive) - mean(negative), accumulated in double.
ErasureDirection compute_erasure_direction(const ActivationMatrix& positive,
                                           const ActivationMatrix& negative);
ErasureDirection compute_erasure_direction(const ToyModelParams& params,
                                           std::span<const ContrastPair> positive,
                                           std::span<const ContrastPair> negative,
                                           int layer);

// d x n_f matrix whose columns all equal the direction.
Eigen::MatrixXd build_target_matrix(const ErasureDirection& dir, int n_f);

void save_direction(const std::filesystem::path& path, const ErasureDirection& dir,
                    const std::string& model_id,
                    const nlohmann::json& extra = nlohmann::json::object());
ErasureDirection load_direction(const std::filesystem::path& path);

}  // namespace nullsteer
