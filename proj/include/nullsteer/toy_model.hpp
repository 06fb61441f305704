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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullsteer/steering_plan.hpp"

// A deliberately small multimodal decoder: patch embedding -> grouped mean
// pooling -> linear adapter gives a prefix of image tokens, followed by
// pre-norm transformer blocks over [image prefix ; text tokens]. Hidden state
// "at layer l" is the residual stream right after block l, which is also where
// steering hooks rewrite it.

namespace nullsteer {

using TokenSequence = std::vector<int>;

// side x side x 3 pixels in [0, 1], stored HWC.
struct ImageTensor {
  int side = 0;
  std::vector<float> pixels;

  static ImageTensor filled(int side, float value);
  std::size_t size() const { return pixels.size(); }
  bool in_range() const;
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c]; }
  bool operator==(const ImageTensor&) const = default;
};

struct ToyModelConfig {
  int hidden_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int vocab_size = 256;
  int max_seq = 64;  // image prefix + text tokens
  int image_side = 16;
  int patch_side = 4;
  int num_image_tokens = 4;
  std::uint64_t seed = 0;

  int mlp_dim() const { return 4 * hidden_dim; }
  int head_dim() const { return hidden_dim / num_heads; }
  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_side * patch_side * 3; }

  // Throws ConfigError.
  void validate() const;
  std::string model_id() const;
  nlohmann::json to_json() const;
  static ToyModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ToyModelConfig&) const = default;
};

// Location of one tensor inside the flat parameter vector (row-major).
struct Slot {
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct BlockSlots {
  Slot ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
  Slot patch_w, patch_b, adapter_w, adapter_b, tok_emb, pos_emb;
  std::vector<BlockSlots> blocks;
  Slot lnf_g, lnf_b, head;
  std::size_t total = 0;
  // Checkpoint order: (name, slot) in increasing offset.
  std::vector<std::pair<std::string, Slot>> manifest;

  static ParamLayout build(const ToyModelConfig& config);
};

template <class T>
struct ModelWeights {
  ToyModelConfig config;
  ParamLayout layout;
  std::vector<T> values;

  std::span<const T> operator[](const Slot& s) const {
    return {values.data() + s.offset, s.size()};
  }
  std::span<T> operator[](const Slot& s) {
    return {values.data() + s.offset, s.size()};
  }

  template <class U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out{config, layout, {}};
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

using ToyModelParams = ModelWeights<float>;

// Deterministic scaled-uniform initialization from config.seed.
ToyModelParams init_model(const ToyModelConfig& config);

struct ForwardRecord {
  int prefix_len = 0;  // image tokens before the text
  int seq_len = 0;     // prefix_len + text tokens
  int vocab = 0;
  // text_len x vocab; row t predicts the token after text position t.
  std::vector<float> logits;
  // layer -> seq_len x d (row-major), unsteered value seen by that layer's hook.
  std::map<int, std::vector<float>> hiddens;

  std::span<const float> logits_row(int t) const {
    return {logits.data() + static_cast<std::size_t>(t) * vocab,
            static_cast<std::size_t>(vocab)};
  }
};

// image == nullptr runs text-only (no prefix).
ForwardRecord forward(const ToyModelParams& params, const ImageTensor* image,
                      const TokenSequence& tokens,
                      std::span<const int> capture_layers = {},
                      const SteeringPlan* steering = nullptr);

// Greedy decoding; stops after max_new tokens or at EOS (not included).
TokenSequence generate(const ToyModelParams& params, const ImageTensor* image,
                       const TokenSequence& prompt, int max_new,
                       const SteeringPlan* steering = nullptr,
                       int eos_token = 2);

// Hidden state after block `layer` at the final prompt position.
std::vector<float> capture_last_token_activation(const ToyModelParams& params,
                                                 const ImageTensor* image,
                                                 const TokenSequence& prompt,
                                                 int layer);

// Same as above for several layers from one forward pass.
std::map<int, std::vector<float>> capture_last_token_activations(
    const ToyModelParams& params, const ImageTensor* image,
    const TokenSequence& prompt, std::span<const int> layers);

// sum over responses y of log P(y | image, prompt), computed in double.
double target_log_likelihood(const ModelWeights<double>& params,
                             const ImageTensor& image,
                             const TokenSequence& prompt,
                             std::span<const TokenSequence> targets);

struct InputGradient {
  double objective = 0.0;     // the summed log-likelihood
  std::vector<double> pixels; // d objective / d pixel, HWC like ImageTensor
};

// Analytic gradient of target_log_likelihood with respect to every pixel.
InputGradient input_gradient(const ModelWeights<double>& params,
                             const ImageTensor& image,
                             const TokenSequence& prompt,
                             std::span<const TokenSequence> targets);
InputGradient input_gradient(const ToyModelParams& params,
                             const ImageTensor& image,
                             const TokenSequence& prompt,
                             std::span<const TokenSequence> targets);

// ---------------------------------------------------------------------------
// Training

struct TrainExample {
  std::optional<ImageTensor> image;
  TokenSequence prompt;
  TokenSequence answer;
};

enum class Optimizer { kSgd, kAdam };

struct TrainHyper {
  double lr = 0.05;
  int epochs = 200;
  int batch = 16;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::kSgd;
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
};

struct TrainResult {
  ToyModelParams params;
  std::vector<double> epoch_loss;  // mean answer-token cross-entropy
};

TrainResult train(const ToyModelParams& params,
                  std::span<const TrainExample> corpus, const TrainHyper& hyper);

// Mean answer-token cross-entropy and teacher-forced argmax accuracy.
struct CorpusScore {
  double loss = 0.0;
  double accuracy = 0.0;
  long long tokens = 0;
};
CorpusScore score_corpus(const ToyModelParams& params,
                         std::span<const TrainExample> corpus);

// Loss and parameter gradient of one example (sum over its answer tokens),
// exposed for gradient checking. grad is resized to params.values.size().
double example_loss_and_grad(const ModelWeights<double>& params,
                             const TrainExample& example,
                             std::vector<double>& grad);

// ---------------------------------------------------------------------------
// Checkpoints (ACTV1 container, kind "toy_model").

void save_model(const std::filesystem::path& path, const ToyModelParams& params,
                const nlohmann::json& extra = nlohmann::json::object());
ToyModelParams load_model(const std::filesystem::path& path);

}  // namespace nullsteer
