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

#include <map>
#include <string>
#include <vector>

namespace nullsteer {

// Which sequence positions a plan rewrites during generation.
enum class SteeringScope {
  kAllPositions,     // image prefix, prompt and generated tokens
  kFromLastPrompt,   // last prompt token and every generated token
};

// One steered layer: h <- h + lambda * effective * h, effective = W*P (d x d,
// row-major).
struct PlanEntry {
  int dim = 0;
  std::vector<double> effective;
  double lambda = 0.0;
};

struct SteeringPlan {
  std::map<int, PlanEntry> entries;
  std::string model_id;
  SteeringScope scope = SteeringScope::kAllPositions;
};

}  // namespace nullsteer
