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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nullsteer/errors.hpp"
#include "nullsteer/toy_model.hpp"
#include "transformer_engine.hpp"

namespace nullsteer {
namespace {

struct ExampleStats {
  double loss = 0.0;  // summed over answer tokens
  int correct = 0;
};

// Teacher-forced pass over prompt ++ answer. When grad is set, accumulates
// weight * d(loss)/d(params) into it.
template <class T>
ExampleStats run_example(const detail::Engine<T>& engine, const ModelWeights<T>& w,
                         const TrainExample& ex, std::vector<T>* grad, T weight) {
  const int V = w.config.vocab_size;
  const int P = ex.image ? w.config.num_image_tokens : 0;
  const int m = static_cast<int>(ex.answer.size());
  TokenSequence seq = ex.prompt;
  seq.insert(seq.end(), ex.answer.begin(), ex.answer.end() - 1);
  const int first = P + static_cast<int>(ex.prompt.size()) - 1;
  std::vector<int> rows(m);
  std::iota(rows.begin(), rows.end(), first);

  detail::ForwardCache<T> cache;
  engine.forward(ex.image ? ex.image->pixels.data() : nullptr, seq, rows, cache);
  ExampleStats st;
  std::vector<T> lp(V);
  std::vector<T> dlogits(grad != nullptr ? static_cast<std::size_t>(m) * V : 0);
  for (int t = 0; t < m; ++t) {
    const std::span<const T> row(cache.logits.data() + static_cast<std::size_t>(t) * V, V);
    detail::log_softmax<T>(row, lp);
    const int target = ex.answer[t];
    st.loss -= static_cast<double>(lp[target]);
    if (std::max_element(row.begin(), row.end()) - row.begin() == target) ++st.correct;
    if (grad != nullptr) {
      T* dl = dlogits.data() + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) dl[v] = std::exp(lp[v]) * weight;
      dl[target] -= weight;
    }
  }
  if (grad != nullptr) engine.backward(cache, dlogits, seq, grad, nullptr);
  return st;
}

void check_corpus(std::span<const TrainExample> corpus) {
  if (corpus.empty()) throw ValidationError("training corpus must be non-empty");
  for (const auto& ex : corpus) {
    if (ex.prompt.empty() || ex.answer.empty()) {
      throw ValidationError("training examples need non-empty prompt and answer");
    }
  }
}

}  // namespace

double example_loss_and_grad(const ModelWeights<double>& params,
                             const TrainExample& example, std::vector<double>& grad) {
  grad.assign(params.values.size(), 0.0);
  detail::Engine<double> engine(params);
  return run_example(engine, params, example, &grad, 1.0).loss;
}

CorpusScore score_corpus(const ToyModelParams& params,
                         std::span<const TrainExample> corpus) {
  check_corpus(corpus);
  detail::Engine<float> engine(params);
  std::vector<ExampleStats> stats(corpus.size());
  const int n = static_cast<int>(corpus.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    stats[i] = run_example<float>(engine, params, corpus[i], nullptr, 1.0f);
  }
  CorpusScore score;
  long long correct = 0;
  for (int i = 0; i < n; ++i) {
    score.loss += stats[i].loss;
    correct += stats[i].correct;
    score.tokens += static_cast<long long>(corpus[i].answer.size());
  }
  score.loss /= static_cast<double>(score.tokens);
  score.accuracy = static_cast<double>(correct) / static_cast<double>(score.tokens);
  return score;
}

TrainResult train(const ToyModelParams& params, std::span<const TrainExample> corpus,
                  const TrainHyper& hyper) {
  check_corpus(corpus);
  if (hyper.epochs < 0 || hyper.batch < 1 || hyper.lr < 0.0) {
    throw ConfigError("invalid training hyperparameters");
  }
  TrainResult result{params, {}};
  ToyModelParams& w = result.params;
  if (hyper.epochs == 0) return result;

  const std::size_t n_params = w.values.size();
  const int n = static_cast<int>(corpus.size());
  const int max_batch = std::min(hyper.batch, n);
  std::vector<std::vector<float>> buffers(max_batch, std::vector<float>(n_params));
  std::vector<ExampleStats> stats(max_batch);
  std::vector<float> grad(n_params);
  std::vector<double> adam_m, adam_v;
  if (hyper.optimizer == Optimizer::kAdam) {
    adam_m.assign(n_params, 0.0);
    adam_v.assign(n_params, 0.0);
  }
  long long step = 0;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hyper.seed);
  detail::Engine<float> engine(w);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    // Fisher-Yates with explicit draws so the order is library-independent.
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    long long epoch_tokens = 0;
    for (int start = 0; start < n; start += max_batch) {
      const int count = std::min(max_batch, n - start);
      long long tokens = 0;
      for (int i = 0; i < count; ++i) {
        tokens += static_cast<long long>(corpus[order[start + i]].answer.size());
      }
      const float weight = 1.0f / static_cast<float>(tokens);
#pragma omp parallel for schedule(dynamic)
      for (int i = 0; i < count; ++i) {
        std::fill(buffers[i].begin(), buffers[i].end(), 0.0f);
        stats[i] = run_example<float>(engine, w, corpus[order[start + i]],
                                      &buffers[i], weight);
      }
      // Reduce in example order so results do not depend on thread count.
      std::copy(buffers[0].begin(), buffers[0].end(), grad.begin());
      for (int i = 1; i < count; ++i) {
        const auto& b = buffers[i];
        for (std::size_t k = 0; k < n_params; ++k) grad[k] += b[k];
      }
      double batch_loss = 0.0;
      for (int i = 0; i < count; ++i) batch_loss += stats[i].loss;
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("training diverged (non-finite loss) at epoch " +
                            std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      epoch_tokens += tokens;

      if (hyper.clip_norm > 0.0) {
        double norm2 = 0.0;
        for (float g : grad) norm2 += static_cast<double>(g) * g;
        const double norm = std::sqrt(norm2);
        if (norm > hyper.clip_norm) {
          const float s = static_cast<float>(hyper.clip_norm / norm);
          for (float& g : grad) g *= s;
        }
      }
      ++step;
      if (hyper.optimizer == Optimizer::kSgd) {
        const float lr = static_cast<float>(hyper.lr);
        for (std::size_t k = 0; k < n_params; ++k) w.values[k] -= lr * grad[k];
      } else {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        for (std::size_t k = 0; k < n_params; ++k) {
          const double g = grad[k];
          adam_m[k] = b1 * adam_m[k] + (1.0 - b1) * g;
          adam_v[k] = b2 * adam_v[k] + (1.0 - b2) * g * g;
          const double upd = hyper.lr * (adam_m[k] / c1) / (std::sqrt(adam_v[k] / c2) + eps);
          w.values[k] -= static_cast<float>(upd);
        }
      }
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_tokens));
  }
  return result;
}

}  // namespace nullsteer
