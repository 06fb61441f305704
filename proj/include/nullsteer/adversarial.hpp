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
#include <vector>

#include <json.hpp>

#include "nullsteer/toy_model.hpp"

// L-infinity PGD on the input image, ascending the summed log-likelihood of a
// few target responses.

namespace nullsteer {

struct AdversarialBudget {
  double epsilon = 16.0 / 255.0;
  double alpha = 2.0 / 255.0;  // epsilon / 8
  int steps = 32;

  // epsilon > 0, alpha >= 0, steps >= 1; throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static AdversarialBudget from_json(const nlohmann::json& j);
};

struct PgdResult {
  ImageTensor image;
  // objective[0] is the clean image, objective[k] follows step k.
  std::vector<double> objective;
};

// Clamp candidate into [center - epsilon, center + epsilon] intersected with
// [0, 1], pixel by pixel. The float result satisfies the bound exactly.
ImageTensor project_ball(const ImageTensor& center, const ImageTensor& candidate,
                         double epsilon);

// max |a - b| over pixels, evaluated in double.
double linf_distance(const ImageTensor& a, const ImageTensor& b);

// targets are the response sequences y (each ending where the response ends,
// EOS included if it should be scored).
PgdResult pgd_perturb(const ToyModelParams& params, const ImageTensor& image,
                      const TokenSequence& prompt,
                      std::span<const TokenSequence> targets,
                      const AdversarialBudget& budget);

// Same, with the double-precision weights already prepared.
PgdResult pgd_perturb(const ModelWeights<double>& params, const ImageTensor& image,
                      const TokenSequence& prompt,
                      std::span<const TokenSequence> targets,
                      const AdversarialBudget& budget);

}  // namespace nullsteer
