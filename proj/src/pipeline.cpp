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


#include "nullsteer/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/direction.hpp"
#include "nullsteer/errors.hpp"
#include "nullsteer/steering_runtime.hpp"
#include "nullsteer/steering_solver.hpp"
#include "random_util.hpp"

namespace nullsteer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json hyper_to_json(const TrainHyper& h) {
  return {{"lr", h.lr},
          {"epochs", h.epochs},
          {"batch", h.batch},
          {"seed", h.seed},
          {"optimizer", h.optimizer == Optimizer::kAdam ? "adam" : "sgd"},
          {"clip_norm", h.clip_norm}};
}

TrainHyper hyper_from_json(const json& j, TrainHyper h) {
  h.lr = j.value("lr", h.lr);
  h.epochs = j.value("epochs", h.epochs);
  h.batch = j.value("batch", h.batch);
  h.seed = j.value("seed", h.seed);
  h.clip_norm = j.value("clip_norm", h.clip_norm);
  if (j.contains("optimizer")) {
    const std::string o = j.at("optimizer").get<std::string>();
    if (o == "sgd") {
      h.optimizer = Optimizer::kSgd;
    } else if (o == "adam") {
      h.optimizer = Optimizer::kAdam;
    } else {
      throw ConfigError("unknown optimizer '" + o + "'");
    }
  }
  return h;
}

void check_hyper(const TrainHyper& h, const char* name, bool allow_zero_epochs) {
  if (!(std::isfinite(h.lr) && h.lr > 0.0) || h.batch < 1 ||
      h.epochs < (allow_zero_epochs ? 0 : 1) || !(h.clip_norm >= 0.0)) {
    throw ConfigError(std::string("invalid ") + name + " hyperparameters");
  }
}

// ---------------------------------------------------------------------------
// Artifact plumbing

struct Stage {
  const ExperimentConfig& cfg;
  std::string hash;
  std::ostream& log;

  fs::path at(const std::string& name) const { return cfg.output_dir / name; }

  // Throws DependencyError naming the stage that produces `name`.
  fs::path need(const std::string& name, const char* producer) const {
    fs::path p = at(name);
    if (!fs::exists(p)) {
      throw DependencyError("missing " + p.string() + "; run the '" + producer +
                            "' stage first");
    }
    return p;
  }

  void check_hash(const json& meta, const fs::path& source) const {
    if (!meta.is_object() || !meta.contains("config_hash")) return;
    const std::string h = meta.at("config_hash").get<std::string>();
    if (h != hash) {
      throw ValidationError(source.string() + " was produced by config " + h +
                            ", current config is " + hash);
    }
  }

  json read_json(const std::string& name, const char* producer) const {
    const fs::path p = need(name, producer);
    std::ifstream in(p);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
    check_hash(j, p);
    return j;
  }

  void write_json(const std::string& name, json j) const {
    j["config_hash"] = hash;
    const fs::path p = at(name);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << j.dump(1) << '\n';
    if (!out) throw IoError("short write to " + p.string());
  }

  void write_text(const std::string& name, const std::string& text) const {
    const fs::path p = at(name);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
  }

  // Validated ACTV1 input.
  TraceFile read_actv(const std::string& name, const char* producer) const {
    const fs::path p = need(name, producer);
    const ValidationReport rep = validate_trace(p);
    if (!rep.ok()) throw ValidationError(p.string() + ": " + rep.violations.front());
    TraceFile tf = read_container(p);
    check_hash(tf.meta, p);
    return tf;
  }

  ActivationMatrix read_acts(const std::string& name, const char* producer) const {
    read_actv(name, producer);
    return read_trace(at(name));
  }

  Benchmark bench() const {
    return Benchmark::from_json(read_json(artifacts::kBenchmark, "gen-data").at("benchmark"));
  }

  ToyModelParams model() const {
    read_actv(artifacts::kModel, "train");
    ToyModelParams p = load_model(at(artifacts::kModel));
    if (!(p.config == cfg.model)) {
      throw ValidationError("checkpoint model config does not match the experiment config");
    }
    return p;
  }

  json hash_extra() const { return {{"config_hash", hash}}; }
};

Stage open_stage(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("cannot create " + cfg.output_dir.string() + ": " + ec.message());
  return Stage{cfg, cfg.hash(), log};
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string out = buf;
  // "-0.000" reads as a change where there is none
  if (out.find_first_not_of("-0.") == std::string::npos && out.front() == '-') out.erase(0, 1);
  return out;
}

std::vector<PromptInput> to_inputs(
    const std::vector<std::pair<const ImageTensor*, TokenSequence>>& prompts,
    std::span<const int> pick) {
  std::vector<PromptInput> out;
  out.reserve(pick.size());
  for (int i : pick) out.push_back({prompts[i].first, prompts[i].second});
  return out;
}

// Contrast pairs rebuilt from the benchmark and the attack artifacts.
ContrastSets load_contrast_sets(const Stage& st, const Benchmark& bench) {
  const json attack = st.read_json(artifacts::kAttack, "attack");
  const TraceFile images = st.read_actv(artifacts::kAdversarial, "attack");
  const int side = bench.options.image_side;
  const int rows = images.meta.at("rows").get<int>();
  const int cols = images.meta.at("cols").get<int>();
  const auto& items = attack.at("pairs");
  if (rows != side * side * 3 || cols != static_cast<int>(items.size())) {
    throw ShapeError("adversarial image file does not match attack.json");
  }
  ContrastSets sets;
  for (int i = 0; i < cols; ++i) {
    const int item = items[i].at("item").get<int>();
    if (item < 0 || item >= static_cast<int>(bench.harmful.size())) {
      throw RangeError("attack.json references harmful item " + std::to_string(item));
    }
    const HarmfulItem& h = bench.harmful[item];
    ImageTensor adv;
    adv.side = side;
    adv.pixels.assign(images.payload.begin() + static_cast<std::ptrdiff_t>(i) * rows,
                      images.payload.begin() + static_cast<std::ptrdiff_t>(i + 1) * rows);
    sets.positive.push_back({h.image, h.plain_prompt, Polarity::kPositiveErasure, h.subject, item});
    sets.negative.push_back(
        {std::move(adv), h.jailbreak_prompt, Polarity::kNegativeRecall, h.subject, item});
  }
  return sets;
}

// ||lambda W P h|| / ||h|| per column.
std::vector<double> leakage(const Eigen::MatrixXd& effective, double lambda,
                            const Eigen::MatrixXd& h) {
  std::vector<double> out(h.cols());
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    const double n = h.col(j).norm();
    out[j] = n > 0.0 ? std::abs(lambda) * (effective * h.col(j)).norm() / n : 0.0;
  }
  return out;
}

json leakage_stats(const std::vector<double>& r, double threshold) {
  const double n = static_cast<double>(r.size());
  int within = 0;
  double sum = 0.0, mx = 0.0;
  for (double v : r) {
    within += v <= threshold;
    sum += v;
    mx = std::max(mx, v);
  }
  return {{"count", r.size()},
          {"mean", r.empty() ? 0.0 : sum / n},
          {"max", mx},
          {"threshold", threshold},
          {"fraction_within", r.empty() ? 0.0 : within / n}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig::ExperimentConfig() {
  model.seed = 1;
  pretrain.epochs = 40;
  pretrain.seed = 0;
  finetune.epochs = 80;
  finetune.seed = 1;
  layers = {0};
}

void ExperimentConfig::validate() const {
  model.validate();
  bench.validate();
  attack.validate();
  if (bench.image_side != model.image_side) {
    throw ConfigError("benchmark image_side must equal the model image_side");
  }
  check_hyper(pretrain, "pretrain", true);
  check_hyper(finetune, "finetune", false);
  if (contrast_pairs < 2) throw ConfigError("contrast_pairs must be >= 2");
  if (layers.empty()) throw ConfigError("at least one steered layer is required");
  std::set<int> seen;
  for (int l : layers) {
    if (l < 0 || l >= model.num_layers) {
      throw ConfigError("steered layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(model.num_layers) + ")");
    }
    if (!seen.insert(l).second) throw ConfigError("duplicate steered layer");
  }
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must be in (0, 1)");
  if (!(std::isfinite(gamma) && gamma > 0.0)) throw ConfigError("gamma must be > 0");
  if (!std::isfinite(lambda)) throw ConfigError("lambda must be finite");
  if (!(retain_holdout > 0.0 && retain_holdout < 1.0)) {
    throw ConfigError("retain_holdout must be in (0, 1)");
  }
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

json ExperimentConfig::to_json() const {
  return {{"model", model.to_json()},
          {"bench", bench.to_json()},
          {"pretrain", hyper_to_json(pretrain)},
          {"finetune", hyper_to_json(finetune)},
          {"attack", attack.to_json()},
          {"contrast_pairs", contrast_pairs},
          {"contrast_seed", contrast_seed},
          {"layers", layers},
          {"tau", tau},
          {"gamma", gamma},
          {"lambda", lambda},
          {"retain_holdout", retain_holdout},
          {"holdout_seed", holdout_seed},
          {"scope", std::string(to_string(scope))},
          {"max_new_tokens", max_new_tokens}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {
      "model", "bench", "pretrain", "finetune", "attack", "contrast_pairs",
      "contrast_seed", "layers", "tau", "gamma", "lambda", "retain_holdout",
      "holdout_seed", "scope", "max_new_tokens", "output_dir"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  try {
    if (j.contains("model")) {
      json m = c.model.to_json();
      m.update(j.at("model"));
      c.model = ToyModelConfig::from_json(m);
    }
    if (j.contains("bench")) {
      json b = c.bench.to_json();
      b.update(j.at("bench"));
      c.bench = BenchmarkOptions::from_json(b);
    }
    if (j.contains("attack")) {
      json a = c.attack.to_json();
      a.update(j.at("attack"));
      c.attack = AdversarialBudget::from_json(a);
    }
    if (j.contains("pretrain")) c.pretrain = hyper_from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("finetune")) c.finetune = hyper_from_json(j.at("finetune"), c.finetune);
    c.contrast_pairs = j.value("contrast_pairs", c.contrast_pairs);
    c.contrast_seed = j.value("contrast_seed", c.contrast_seed);
    if (j.contains("layers")) {
      c.layers = j.at("layers").get<std::vector<int>>();
    } else {
      c.layers = {c.model.num_layers - 2};
    }
    c.tau = j.value("tau", c.tau);
    c.gamma = j.value("gamma", c.gamma);
    c.lambda = j.value("lambda", c.lambda);
    c.retain_holdout = j.value("retain_holdout", c.retain_holdout);
    c.holdout_seed = j.value("holdout_seed", c.holdout_seed);
    if (j.contains("scope")) c.scope = steering_scope_from_string(j.at("scope").get<std::string>());
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

namespace artifacts {
std::string activations(const std::string& set, int layer) {
  return "acts_" + set + "_l" + std::to_string(layer) + ".actv";
}
std::string direction(int layer) { return "direction_l" + std::to_string(layer) + ".actv"; }
std::string op(int layer) { return "operator_l" + std::to_string(layer) + ".actv"; }
std::string eval(bool steered) { return steered ? "eval_steered.json" : "eval_vanilla.json"; }
}  // namespace artifacts

std::vector<std::pair<const ImageTensor*, TokenSequence>> split_prompts(const SplitData& split) {
  std::vector<std::pair<const ImageTensor*, TokenSequence>> out;
  out.reserve(split.num_items());
  for (const auto& c : split.classification) out.emplace_back(&c.image, c.prompt);
  for (const auto& g : split.generation) out.emplace_back(&g.image, g.prompt);
  for (const auto& z : split.cloze) out.emplace_back(&z.image, z.prompt);
  return out;
}

std::pair<std::vector<int>, std::vector<int>> retain_partition(int n, double holdout,
                                                               std::uint64_t seed) {
  if (n < 2) throw ValidationError("retain split needs at least two prompts");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  detail::shuffle(idx, rng);
  int n_hold = static_cast<int>(std::lround(holdout * n));
  n_hold = std::clamp(n_hold, 1, n - 1);
  std::vector<int> fit(idx.begin(), idx.end() - n_hold);
  std::vector<int> held(idx.end() - n_hold, idx.end());
  std::sort(fit.begin(), fit.end());
  std::sort(held.begin(), held.end());
  return {std::move(fit), std::move(held)};
}

// ---------------------------------------------------------------------------
// Stages

json cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const Benchmark bench = gen_benchmark(cfg.bench);
  json summary = {{"profiles", bench.profiles.size()}, {"harmful", bench.harmful.size()}};
  for (int s = 0; s < kNumSplits; ++s) {
    summary["splits"][std::string(to_string(static_cast<Split>(s)))] = bench.splits[s].num_items();
  }
  st.write_json(artifacts::kBenchmark, {{"benchmark", bench.to_json()}, {"summary", summary}});
  log << "gen-data: " << bench.profiles.size() << " profiles, " << bench.harmful.size()
      << " harmful items\n";
  return summary;
}

json cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const Benchmark bench = st.bench();
  const TrainingCorpora corpora = build_training_corpora(bench);
  ToyModelParams params = init_model(cfg.model);
  json tl = {{"pretrain_examples", corpora.pretrain.size()},
             {"finetune_examples", corpora.finetune.size()}};
  const Timer timer;
  if (cfg.pretrain.epochs > 0) {
    TrainResult r = train(params, corpora.pretrain, cfg.pretrain);
    params = std::move(r.params);
    tl["pretrain_loss"] = r.epoch_loss;
    log << "train: pretrain loss " << fixed(r.epoch_loss.back(), 4) << '\n';
  }
  TrainResult r = train(params, corpora.finetune, cfg.finetune);
  params = std::move(r.params);
  tl["finetune_loss"] = r.epoch_loss;
  const CorpusScore sc = score_corpus(params, corpora.finetune);
  tl["final"] = {{"loss", sc.loss}, {"accuracy", sc.accuracy}, {"tokens", sc.tokens}};
  log << "train: finetune loss " << fixed(sc.loss, 4) << ", token accuracy "
      << fixed(sc.accuracy, 4) << " (" << fixed(timer.seconds(), 1) << " s)\n";
  save_model(st.at(artifacts::kModel), params, st.hash_extra());
  st.write_json(artifacts::kTrainLog, tl);
  return tl["final"];
}

json cmd_attack(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const Benchmark bench = st.bench();
  const ToyModelParams params = st.model();
  const Timer timer;
  const ContrastSets sets =
      build_contrast_sets(bench, params, cfg.attack, cfg.contrast_pairs, cfg.contrast_seed);

  const int n = static_cast<int>(sets.negative.size());
  const int px = bench.options.image_side * bench.options.image_side * 3;
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(px) * n);
  json pairs = json::array();
  int improved = 0;
  double max_linf = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto& neg = sets.negative[i];
    payload.insert(payload.end(), neg.image.pixels.begin(), neg.image.pixels.end());
    const auto& obj = sets.pgd_objectives[i];
    const double linf = linf_distance(neg.image, bench.harmful[neg.item].image);
    max_linf = std::max(max_linf, linf);
    improved += obj.back() > obj.front();
    pairs.push_back({{"item", neg.item}, {"subject", neg.subject}, {"linf", linf},
                     {"objective", obj}});
  }
  json meta = {{"kind", "image"}, {"rows", px}, {"cols", n}, {"layer", -1},
               {"model_id", params.config.model_id()}, {"token_policy", "none"},
               {"image_side", bench.options.image_side}, {"config_hash", st.hash}};
  write_container(st.at(artifacts::kAdversarial), meta, payload);
  json summary = {{"pairs", n}, {"improved", improved}, {"max_linf", max_linf},
                  {"epsilon", cfg.attack.epsilon}};
  st.write_json(artifacts::kAttack,
                {{"budget", cfg.attack.to_json()}, {"pairs", pairs}, {"summary", summary}});
  log << "attack: " << n << " PGD images, objective improved on " << improved << " ("
      << fixed(timer.seconds(), 1) << " s)\n";
  return summary;
}

json cmd_extract(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const Benchmark bench = st.bench();
  const ToyModelParams params = st.model();
  const ContrastSets sets = load_contrast_sets(st, bench);

  const auto forget = split_prompts(bench.split(Split::kForget));
  const auto retain = split_prompts(bench.split(Split::kRetain));
  std::vector<int> all_forget(forget.size());
  std::iota(all_forget.begin(), all_forget.end(), 0);
  const auto [fit, held] =
      retain_partition(static_cast<int>(retain.size()), cfg.retain_holdout, cfg.holdout_seed);
  const auto in_f = to_inputs(forget, all_forget);
  const auto in_r = to_inputs(retain, fit);
  const auto in_h = to_inputs(retain, held);

  json summary = {{"forget", in_f.size()}, {"retain", in_r.size()}, {"heldout", in_h.size()},
                  {"positive", sets.positive.size()}, {"negative", sets.negative.size()},
                  {"layers", cfg.layers}};
  const json extra = st.hash_extra();
  for (int layer : cfg.layers) {
    write_trace(st.at(artifacts::activations("forget", layer)),
                collect_activations(params, in_f, layer, SplitTag::kForget), extra);
    write_trace(st.at(artifacts::activations("retain", layer)),
                collect_activations(params, in_r, layer, SplitTag::kRetain), extra);
    write_trace(st.at(artifacts::activations("heldout", layer)),
                collect_activations(params, in_h, layer, SplitTag::kRetain), extra);
    ActivationMatrix pos = collect_activations(params, sets.positive, layer);
    ActivationMatrix neg = collect_activations(params, sets.negative, layer);
    pos.split = SplitTag::kContrastPos;
    neg.split = SplitTag::kContrastNeg;
    write_trace(st.at(artifacts::activations("pos", layer)), pos, extra);
    write_trace(st.at(artifacts::activations("neg", layer)), neg, extra);
  }
  log << "extract: layers";
  for (int l : cfg.layers) log << ' ' << l;
  log << "; " << in_f.size() << " forget, " << in_r.size() << " retain, " << in_h.size()
      << " held-out prompts\n";
  return summary;
}

json cmd_solve(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  std::string model_id;
  SteeringPlan plan;
  plan.scope = cfg.scope;
  std::vector<std::pair<int, std::string>> files;
  json layers = json::object();
  for (int layer : cfg.layers) {
    const ActivationMatrix hf = st.read_acts(artifacts::activations("forget", layer), "extract");
    const ActivationMatrix hr = st.read_acts(artifacts::activations("retain", layer), "extract");
    const ActivationMatrix hh = st.read_acts(artifacts::activations("heldout", layer), "extract");
    const ActivationMatrix pos = st.read_acts(artifacts::activations("pos", layer), "extract");
    const ActivationMatrix neg = st.read_acts(artifacts::activations("neg", layer), "extract");
    for (const ActivationMatrix* m : {&hr, &hh, &pos, &neg}) {
      if (m->rows != hf.rows || m->model_id != hf.model_id || m->layer != hf.layer) {
        throw ShapeError("activation files for layer " + std::to_string(layer) +
                         " disagree on hidden size, model or layer");
      }
    }
    model_id = hf.model_id;

    ErasureDirection dir = compute_erasure_direction(pos, neg);
    dir.layer = layer;
    save_direction(st.at(artifacts::direction(layer)), dir, model_id, st.hash_extra());

    const Eigen::MatrixXd f = to_eigen(hf);
    const NullspaceProjection proj = compute_projection(hr, cfg.tau);
    const SteeringMatrixSolution sol =
        solve_steering_matrix(f, build_target_matrix(dir, hf.cols), proj, cfg.gamma);
    save_operator(st.at(artifacts::op(layer)), sol, layer, cfg.lambda, cfg.tau,
                  proj.rank_retained, model_id, st.hash_extra());
    plan.entries[layer] = make_plan_entry(sol.effective, cfg.lambda);
    files.emplace_back(layer, artifacts::op(layer));

    const auto held = leakage(sol.effective, cfg.lambda, to_eigen(hh));
    const auto fit = leakage(sol.effective, cfg.lambda, to_eigen(hr));
    const auto fgt = leakage(sol.effective, cfg.lambda, f);
    layers[std::to_string(layer)] = {
        {"direction_norm", dir.norm},
        {"rank_retained", proj.rank_retained},
        {"null_dim", proj.null_dim()},
        {"residual", sol.residual},
        {"leakage_heldout", leakage_stats(held, 0.05)},
        {"leakage_retain_fit", leakage_stats(fit, 0.05)},
        {"forget_shift", leakage_stats(fgt, 0.05)}};
    if (proj.null_dim() == 0) {
      log << "solve: warning: layer " << layer
          << " retain activations span the whole space, P = 0 and this layer is not steered\n";
    }
    layers[std::to_string(layer)]["empty_null_space"] = proj.null_dim() == 0;
    log << "solve: layer " << layer << " null dim " << proj.null_dim() << ", held-out within 5%: "
        << fixed(layers[std::to_string(layer)]["leakage_heldout"]["fraction_within"].get<double>(), 3)
        << '\n';
  }
  plan.model_id = model_id;
  save_plan_manifest(st.at(artifacts::kPlan), plan, files, st.hash_extra());
  const json summary = {{"layers", layers}, {"lambda", cfg.lambda}, {"gamma", cfg.gamma},
                        {"tau", cfg.tau}, {"scope", std::string(to_string(cfg.scope))}};
  st.write_json(artifacts::kSolve, summary);
  return summary;
}

json cmd_eval(const ExperimentConfig& cfg, bool steered, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const Benchmark bench = st.bench();
  const ToyModelParams params = st.model();
  std::optional<SteeringPlan> plan;
  if (steered) {
    const fs::path p = st.need(artifacts::kPlan, "solve");
    LoadedPlan lp = load_plan(p);
    st.check_hash(lp.manifest, p);
    for (const auto& e : lp.manifest.at("entries")) {
      st.read_actv(e.at("operator").get<std::string>(), "solve");
    }
    validate_plan(lp.plan, params.config);
    if (lp.plan.model_id != params.config.model_id()) {
      throw ValidationError("plan was solved for model " + lp.plan.model_id);
    }
    plan = std::move(lp.plan);
  }
  const Timer timer;
  EvalReport rep = eval_all(params, plan ? &*plan : nullptr, bench, cfg.max_new_tokens);
  rep.label = steered ? "steered" : "vanilla";
  const EvalReport rows[] = {rep};
  const std::string table = render_table(rows);
  st.write_json(artifacts::eval(steered), {{"report", rep.to_json()}, {"table", table}});
  log << "eval (" << rep.label << ", " << fixed(timer.seconds(), 1) << " s)\n" << table;
  return rep.to_json();
}

json cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
  const Stage st = open_stage(cfg, log);
  const EvalReport vanilla =
      EvalReport::from_json(st.read_json(artifacts::eval(false), "eval --vanilla").at("report"));
  const EvalReport steered =
      EvalReport::from_json(st.read_json(artifacts::eval(true), "eval --steered").at("report"));
  const json solve = st.read_json(artifacts::kSolve, "solve");
  const json tradeoff = tradeoff_summary(vanilla, steered);

  EvalReport ref_v = published_reference_vanilla();
  EvalReport ref_s = published_reference_steered();
  ref_v.label = "ref vanilla";
  ref_s.label = "ref steered";
  const EvalReport toy[] = {vanilla, steered};
  const EvalReport ref[] = {ref_v, ref_s};

  std::ostringstream text;
  text << "Toy model (" << cfg.model.model_id() << ", layers";
  for (int l : cfg.layers) text << ' ' << l;
  text << ", lambda " << cfg.lambda << ", gamma " << cfg.gamma << ", tau " << cfg.tau << ")\n"
       << render_table(toy) << "\nForget vs retain deltas (steered - vanilla)\n";
  for (const json& pt : tradeoff.at("points")) {
    text << "  " << pt.at("task").get<std::string>() << ": forget "
         << fixed(-pt.at("forget_drop").get<double>(), 3) << ", retain "
         << fixed(pt.at("retain_delta").get<double>(), 3) << '\n';
  }
  text << "\nPublished reference, 7B model at 5% forget (not reproduced here)\n"
       << render_table(ref) << "\nconfig " << st.hash << '\n';

  json report = {{"vanilla", vanilla.to_json()},
                 {"steered", steered.to_json()},
                 {"tradeoff", tradeoff},
                 {"solve", solve.at("layers")},
                 {"reference", {{"vanilla", ref_v.to_json()}, {"steered", ref_s.to_json()}}},
                 {"config", cfg.to_json()}};
  st.write_json(artifacts::kReport, report);
  st.write_text(artifacts::kReportText, text.str());
  log << text.str();
  return tradeoff;
}

json cmd_run(const ExperimentConfig& cfg, std::ostream& log) {
  const Timer timer;
  cmd_gen_data(cfg, log);
  cmd_train(cfg, log);
  cmd_attack(cfg, log);
  cmd_extract(cfg, log);
  cmd_solve(cfg, log);
  cmd_eval(cfg, false, log);
  cmd_eval(cfg, true, log);
  json out = cmd_report(cfg, log);
  log << "run: " << fixed(timer.seconds(), 1) << " s\n";
  return out;
}

}  // namespace nullsteer
