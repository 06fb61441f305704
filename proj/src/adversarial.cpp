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


#include "nullsteer/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include "nullsteer/errors.hpp"

namespace nullsteer {

void AdversarialBudget::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be > 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
  if (steps < 1) throw ConfigError("PGD needs at least one step");
}

nlohmann::json AdversarialBudget::to_json() const {
  return {{"epsilon", epsilon}, {"alpha", alpha}, {"steps", steps}, {"norm", "inf"}};
}

AdversarialBudget AdversarialBudget::from_json(const nlohmann::json& j) {
  AdversarialBudget b;
  b.epsilon = j.value("epsilon", b.epsilon);
  b.alpha = j.value("alpha", b.epsilon / 8.0);
  b.steps = j.value("steps", b.steps);
  if (j.value("norm", std::string("inf")) != "inf") {
    throw ConfigError("only the L-infinity ball is supported");
  }
  b.validate();
  return b;
}

ImageTensor project_ball(const ImageTensor& center, const ImageTensor& candidate,
                         double epsilon) {
  if (center.side != candidate.side || center.size() != candidate.size()) {
    throw ShapeError("project_ball: image shapes differ");
  }
  if (!(epsilon >= 0.0)) throw RangeError("project_ball: epsilon must be >= 0");
  ImageTensor out = candidate;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double c = center.pixels[i];
    const double lo = std::max(c - epsilon, 0.0);
    const double hi = std::min(c + epsilon, 1.0);
    float v = static_cast<float>(std::clamp(static_cast<double>(candidate.pixels[i]), lo, hi));
    // Rounding to float can step just outside the ball; walk back toward the
    // center until the bound holds exactly.
    while (std::fabs(static_cast<double>(v) - c) > epsilon) {
      v = std::nextafter(v, center.pixels[i]);
    }
    out.pixels[i] = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

double linf_distance(const ImageTensor& a, const ImageTensor& b) {
  if (a.size() != b.size()) throw ShapeError("linf_distance: image shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.pixels[i]) - b.pixels[i]));
  }
  return m;
}

PgdResult pgd_perturb(const ModelWeights<double>& params, const ImageTensor& image,
                      const TokenSequence& prompt,
                      std::span<const TokenSequence> targets,
                      const AdversarialBudget& budget) {
  budget.validate();
  if (!image.in_range()) throw ValidationError("pgd_perturb: clean image has pixels outside [0, 1]");
  if (targets.empty()) throw ValidationError("pgd_perturb: target corpus is empty");
  for (const auto& t : targets) {
    if (t.empty()) throw ValidationError("pgd_perturb: empty target response");
  }
  PgdResult res;
  res.image = image;
  ImageTensor candidate = image;
  for (int k = 0; k < budget.steps; ++k) {
    const InputGradient g = input_gradient(params, res.image, prompt, targets);
    if (!std::isfinite(g.objective)) throw NumericalError("pgd_perturb: non-finite objective");
    res.objective.push_back(g.objective);
    for (std::size_t i = 0; i < candidate.pixels.size(); ++i) {
      const double step = g.pixels[i] >= 0.0 ? budget.alpha : -budget.alpha;
      candidate.pixels[i] = static_cast<float>(res.image.pixels[i] + step);
    }
    res.image = project_ball(image, candidate, budget.epsilon);
  }
  res.objective.push_back(target_log_likelihood(params, res.image, prompt, targets));
  return res;
}

PgdResult pgd_perturb(const ToyModelParams& params, const ImageTensor& image,
                      const TokenSequence& prompt,
                      std::span<const TokenSequence> targets,
                      const AdversarialBudget& budget) {
  return pgd_perturb(params.cast<double>(), image, prompt, targets, budget);
}

}  // namespace nullsteer
