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

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullsteer/steering_plan.hpp"
#include "nullsteer/toy_model.hpp"

// Synthetic profile benchmark: fictitious people with an image and three
// attributes, split into forget / test / retain / celebrity, each probed with
// multiple choice, open generation and cloze questions. Also carries the small
// sensitive-subject corpus the model learns to refuse, which anchors the
// erasure direction.

namespace nullsteer {

namespace vocab {
inline constexpr int kPad = 0, kBos = 1, kEos = 2;
inline constexpr int kWhat = 3, kIs = 4, kThe = 5, kOf = 6, kQuestion = 7,
                     kPeriod = 8, kComplete = 9, kColon = 10, kChoose = 11,
                     kOptions = 12, kAnswer = 13, kI = 14, kCannot = 15,
                     kShare = 16, kThat = 17, kInformation = 18, kTell = 19,
                     kSecret = 20, kIgnore = 21, kRules = 22, kWho = 23,
                     kThis = 24, kPerson = 25, kPossessive = 26, kMe = 27,
                     kFill = 28, kPick = 29, kFor = 30, kFrom = 35,
                     kAmong = 36;
// Attribute-kind words, indexed by AttributeKind.
inline constexpr int kKindWord[4] = {31, 32, 33, 34};
// Disjoint value regions.
inline constexpr int kNameBegin = 64, kNameCount = 80;
inline constexpr int kOccupationBegin = 144, kHometownBegin = 168,
                     kHobbyBegin = 192, kAttributeCount = 24;
inline constexpr int kSubjectBegin = 216, kSubjectCount = 16;
inline constexpr int kSecretBegin = 232, kSecretCount = 16;
inline constexpr int kMinVocab = 248;

// Human-readable rendering of a token sequence ("the occupation is occ7 .").
std::string render(std::span<const int> tokens);
}  // namespace vocab

enum class AttributeKind { kName = 0, kOccupation, kHometown, kHobby };
inline constexpr int kNumKinds = 4;

struct Profile {
  int id = 0;
  bool celebrity = false;
  std::array<int, kNumKinds> attributes{};  // token ids, indexed by AttributeKind
  ImageTensor image;

  int attribute(AttributeKind k) const { return attributes[static_cast<int>(k)]; }
};

enum class Split { kForget = 0, kTest, kRetain, kCelebrity };
inline constexpr int kNumSplits = 4;
std::string_view to_string(Split s);

enum class Task { kClassification = 0, kGeneration, kCloze };
inline constexpr int kNumTasks = 3;
std::string_view to_string(Task t);

// Every question knows its profile and attribute; the image is the one shown
// with the question (the profile image, jittered on the test split).
struct ChoiceItem {
  int profile = 0;
  AttributeKind kind = AttributeKind::kName;
  ImageTensor image;
  TokenSequence prompt;
  std::array<int, 4> options{};
  int correct = 0;  // index into options
};

struct GenerationItem {
  int profile = 0;
  AttributeKind kind = AttributeKind::kName;
  ImageTensor image;
  TokenSequence prompt;
  TokenSequence reference;  // without the trailing EOS
};

struct ClozeItem {
  int profile = 0;
  AttributeKind kind = AttributeKind::kName;
  ImageTensor image;
  TokenSequence prompt;
  int answer = 0;
};

struct SplitData {
  std::vector<int> profiles;
  std::vector<ChoiceItem> classification;
  std::vector<GenerationItem> generation;
  std::vector<ClozeItem> cloze;

  std::size_t num_items() const {
    return classification.size() + generation.size() + cloze.size();
  }
};

// A question about a sensitive subject, in one of the three task formats. The
// plain question is refused; the same question behind the jailbreak prefix is
// answered.
struct HarmfulItem {
  int subject = 0;  // token id
  int secret = 0;   // token id
  Task format = Task::kGeneration;
  ImageTensor image;
  TokenSequence plain_prompt;
  TokenSequence jailbreak_prompt;
  TokenSequence refusal;     // ends with EOS
  TokenSequence compliance;  // the secret, as a sentence for generation
};

struct BenchmarkOptions {
  std::uint64_t seed = 0;
  int n_profiles = 50;
  double forget_ratio = 0.1;
  int n_celebrities = 10;
  int n_harmful = 16;  // sensitive subjects, three questions each
  double test_jitter = 8.0 / 255.0;
  int image_side = 16;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static BenchmarkOptions from_json(const nlohmann::json& j);
};

struct Benchmark {
  BenchmarkOptions options;
  std::vector<Profile> profiles;  // fictitious first, then celebrities
  std::array<SplitData, kNumSplits> splits;
  std::vector<HarmfulItem> harmful;

  const SplitData& split(Split s) const { return splits[static_cast<int>(s)]; }
  nlohmann::json to_json() const;
  static Benchmark from_json(const nlohmann::json& j);
};

Benchmark gen_benchmark(const BenchmarkOptions& options);

// Question templates. `paraphrase` selects the wording used on the test split.
TokenSequence generation_prompt(const Profile& p, AttributeKind k, bool paraphrase);
TokenSequence generation_reference(const Profile& p, AttributeKind k);
TokenSequence cloze_prompt(const Profile& p, AttributeKind k, bool paraphrase);
TokenSequence choice_prompt(const Profile& p, AttributeKind k,
                            const std::array<int, 4>& options, bool paraphrase);
TokenSequence refusal_response();

struct TrainingCorpora {
  std::vector<TrainExample> pretrain;  // celebrities only
  std::vector<TrainExample> finetune;  // profiles, paraphrases, celebrity replay, refusal corpus
};
TrainingCorpora build_training_corpora(const Benchmark& bench);

// ---------------------------------------------------------------------------
// Metrics

// ROUGE-L F1 over token sequences; 0 when either side is empty.
double rouge_l(std::span<const int> candidate, std::span<const int> reference);

double eval_classification(const ToyModelParams& params, const SteeringPlan* plan,
                           std::span<const ChoiceItem> items);
double eval_cloze(const ToyModelParams& params, const SteeringPlan* plan,
                  std::span<const ClozeItem> items);
// Mean ROUGE-L of greedy generations against the references.
double eval_generation(const ToyModelParams& params, const SteeringPlan* plan,
                       std::span<const GenerationItem> items, int max_new = 8);

struct EvalReport {
  // cells[split][task]; accuracies and ROUGE-L, all in [0, 1].
  std::array<std::array<double, kNumTasks>, kNumSplits> cells{};
  std::string label;  // "vanilla" or "steered"

  double at(Split s, Task t) const { return cells[static_cast<int>(s)][static_cast<int>(t)]; }
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

EvalReport eval_all(const ToyModelParams& params, const SteeringPlan* plan,
                    const Benchmark& bench, int max_new = 8);

// Table rendering: rows are methods, columns split x task like the usual
// forget/test/retain/celebrity layout. Accuracies print as percentages.
std::string render_table(std::span<const EvalReport> rows);

// Steered-minus-vanilla deltas per split and task plus a trade-off summary.
nlohmann::json tradeoff_summary(const EvalReport& vanilla, const EvalReport& steered);

// Published reference numbers for the 7B setting, reported alongside the toy
// results for orientation only.
EvalReport published_reference_vanilla();
EvalReport published_reference_steered();

}  // namespace nullsteer
