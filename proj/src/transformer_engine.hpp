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
#include <span>
#include <vector>

#include "nullsteer/steering_plan.hpp"
#include "nullsteer/toy_model.hpp"

// Forward/backward machinery shared by inference, PGD and training.

namespace nullsteer::detail {

template <class T>
struct BlockCache {
  std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, q, k, v, probs, attn, x_mid,
      ln2, ln2_mean, ln2_rstd, pre, gate, act;
};

template <class T>
struct ForwardCache {
  int prefix = 0;
  int seq = 0;
  std::vector<T> patches;    // num_patches x patch_dim
  std::vector<T> pooled;     // prefix x d
  std::vector<BlockCache<T>> blocks;
  std::vector<T> x_final, lnf, lnf_mean, lnf_rstd;
  std::vector<int> logit_rows;  // absolute positions with logits
  std::vector<T> logits;        // logit_rows.size() x vocab
};

struct ForwardHooks {
  std::span<const int> capture_layers;
  std::map<int, std::vector<float>>* captured = nullptr;
  const SteeringPlan* steering = nullptr;
  int steer_from = 0;  // first absolute position the plan rewrites
};

template <class T>
class Engine {
 public:
  explicit Engine(const ModelWeights<T>& weights) : w_(weights) {}

  // pixels: nullptr or image_side^2*3 values. logit_rows are absolute
  // positions in [prefix, seq).
  void forward(const float* pixels, std::span<const int> tokens,
               std::span<const int> logit_rows, ForwardCache<T>& cache,
               const ForwardHooks& hooks = {}) const;

  // dlogits matches cache.logits. Accumulates into grads (if non-null) and
  // writes d/dpixels into dpixels (if non-null and an image was used).
  void backward(const ForwardCache<T>& cache, std::span<const T> dlogits,
                std::span<const int> tokens, std::vector<T>* grads,
                std::vector<T>* dpixels) const;

 private:
  const ModelWeights<T>& w_;
};

// log-softmax of one row into out; returns logsumexp.
template <class T>
T log_softmax(std::span<const T> row, std::span<T> out);

extern template class Engine<float>;
extern template class Engine<double>;

}  // namespace nullsteer::detail
