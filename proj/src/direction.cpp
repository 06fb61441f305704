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


#include "nullsteer/direction.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "nullsteer/errors.hpp"
#include "random_util.hpp"

namespace nullsteer {

ContrastSets build_contrast_sets(const Benchmark& bench, const ToyModelParams& params,
                                 const AdversarialBudget& budget, int n_pairs,
                                 std::uint64_t seed) {
  if (n_pairs < 1) throw ConfigError("contrast sets need n_pairs >= 1");
  if (bench.harmful.empty()) {
    throw ConfigError("benchmark has no refusal corpus to build contrast sets from");
  }
  budget.validate();
  std::vector<int> order(bench.harmful.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  detail::shuffle(order, rng);

  ContrastSets sets;
  sets.positive.resize(n_pairs);
  sets.negative.resize(n_pairs);
  sets.pgd_objectives.resize(n_pairs);
  const ModelWeights<double> wd = params.cast<double>();
  std::vector<std::string> errors(n_pairs);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n_pairs; ++i) {
    const int item = order[i % order.size()];
    const HarmfulItem& h = bench.harmful[item];
    try {
      const TokenSequence targets[] = {h.compliance};
      PgdResult adv = pgd_perturb(wd, h.image, h.plain_prompt, targets, budget);
      sets.positive[i] = {h.image, h.plain_prompt, Polarity::kPositiveErasure, h.subject, item};
      sets.negative[i] = {std::move(adv.image), h.jailbreak_prompt, Polarity::kNegativeRecall,
                          h.subject, item};
      sets.pgd_objectives[i] = std::move(adv.objective);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw NumericalError("PGD failed while building contrast sets: " + e);
  }
  return sets;
}

ActivationMatrix collect_activations(const ToyModelParams& params,
                                     std::span<const PromptInput> inputs, int layer,
                                     SplitTag tag) {
  if (inputs.empty()) throw ValidationError("no prompts to collect activations from");
  const int d = params.config.hidden_dim;
  ActivationMatrix m(d, static_cast<int>(inputs.size()));
  m.layer = layer;
  m.split = tag;
  m.model_id = params.config.model_id();
  const int n = static_cast<int>(inputs.size());
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (int j = 0; j < n; ++j) {
    try {
      const auto h = capture_last_token_activation(params, inputs[j].image, inputs[j].prompt, layer);
      std::copy(h.begin(), h.end(), m.column(j).begin());
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  }
  for (int j = 0; j < n; ++j) {
    if (!errors[j].empty()) throw ValidationError("prompt " + std::to_string(j) + ": " + errors[j]);
  }
  return m;
}

ActivationMatrix collect_activations(const ToyModelParams& params,
                                     std::span<const ContrastPair> pairs, int layer) {
  std::vector<PromptInput> inputs;
  inputs.reserve(pairs.size());
  for (const auto& p : pairs) inputs.push_back({&p.image, p.prompt});
  SplitTag tag = SplitTag::kOther;
  if (!pairs.empty()) {
    tag = pairs.front().polarity == Polarity::kPositiveErasure ? SplitTag::kContrastPos
                                                               : SplitTag::kContrastNeg;
  }
  return collect_activations(params, inputs, layer, tag);
}

ErasureDirection compute_erasure_direction(const ActivationMatrix& positive,
                                           const ActivationMatrix& negative) {
  if (positive.cols == 0 || negative.cols == 0) {
    throw ValidationError("erasure direction needs non-empty positive and negative sets");
  }
  if (positive.rows != negative.rows) {
    throw ShapeError("positive and negative activations have different hidden sizes");
  }
  if (positive.layer != negative.layer) {
    throw ValidationError("positive and negative activations come from different layers");
  }
  const int d = positive.rows;
  auto mean = [d](const ActivationMatrix& m) {
    std::vector<double> sum(d, 0.0);
    for (int j = 0; j < m.cols; ++j) {
      const auto col = m.column(j);
      for (int i = 0; i < d; ++i) sum[i] += col[i];
    }
    for (double& s : sum) s /= m.cols;
    return sum;
  };
  const auto mp = mean(positive);
  const auto mn = mean(negative);
  ErasureDirection dir;
  dir.layer = positive.layer;
  dir.n_pos = positive.cols;
  dir.n_neg = negative.cols;
  dir.vector.resize(d);
  double norm2 = 0.0;
  for (int i = 0; i < d; ++i) {
    dir.vector[i] = static_cast<float>(mp[i] - mn[i]);
    norm2 += static_cast<double>(dir.vector[i]) * dir.vector[i];
  }
  dir.norm = std::sqrt(norm2);
  return dir;
}

ErasureDirection compute_erasure_direction(const ToyModelParams& params,
                                           std::span<const ContrastPair> positive,
                                           std::span<const ContrastPair> negative,
                                           int layer) {
  if (positive.empty() || negative.empty()) {
    throw ValidationError("erasure direction needs non-empty positive and negative sets");
  }
  return compute_erasure_direction(collect_activations(params, positive, layer),
                                   collect_activations(params, negative, layer));
}

Eigen::MatrixXd build_target_matrix(const ErasureDirection& dir, int n_f) {
  if (n_f < 1) throw RangeError("target matrix needs at least one column");
  const int d = static_cast<int>(dir.vector.size());
  Eigen::MatrixXd out(d, n_f);
  for (int j = 0; j < n_f; ++j) {
    for (int i = 0; i < d; ++i) out(i, j) = dir.vector[i];
  }
  return out;
}

void save_direction(const std::filesystem::path& path, const ErasureDirection& dir,
                    const std::string& model_id, const nlohmann::json& extra) {
  nlohmann::json meta = extra;
  meta["kind"] = "direction";
  meta["rows"] = static_cast<int>(dir.vector.size());
  meta["cols"] = 1;
  meta["layer"] = dir.layer;
  meta["model_id"] = model_id;
  meta["token_policy"] = std::string(kLastPromptToken);
  meta["norm"] = dir.norm;
  meta["n_pos"] = dir.n_pos;
  meta["n_neg"] = dir.n_neg;
  write_container(path, meta, dir.vector);
}

ErasureDirection load_direction(const std::filesystem::path& path) {
  TraceFile f = read_container(path);
  if (f.meta.at("kind") != "direction" || f.meta.at("cols") != 1) {
    throw FormatError(path.string() + " is not a direction file");
  }
  ErasureDirection dir;
  dir.layer = f.meta.at("layer").get<int>();
  dir.vector = std::move(f.payload);
  dir.n_pos = f.meta.value("n_pos", 0);
  dir.n_neg = f.meta.value("n_neg", 0);
  double norm2 = 0.0;
  for (float v : dir.vector) norm2 += static_cast<double>(v) * v;
  dir.norm = std::sqrt(norm2);
  return dir;
}

}  // namespace nullsteer
