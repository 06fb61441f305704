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


// nullsteer: stage-by-stage driver for the toy unlearning experiment.

#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/errors.hpp"
#include "nullsteer/pipeline.hpp"
#include "nullsteer/steering_runtime.hpp"

namespace {

using nullsteer::ExperimentConfig;

// Flags that override fields of the loaded (or default) config.
struct Overrides {
  std::string config_path;
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<int> hidden_dim;
  std::optional<int> n_profiles;
  std::optional<double> forget_ratio;
  std::optional<double> epsilon;
  std::optional<double> alpha;
  std::optional<int> pgd_steps;
  std::optional<int> contrast_pairs;
  std::vector<int> layers;
  std::optional<double> tau;
  std::optional<double> gamma;
  std::optional<double> lambda;
  std::optional<std::string> scope;
  std::optional<int> finetune_epochs;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("-o,--output-dir", output_dir, "artifact directory");
    app.add_option("--seed", seed, "model initialization seed");
    app.add_option("--data-seed", data_seed, "benchmark seed");
    app.add_option("--hidden-dim", hidden_dim);
    app.add_option("--profiles", n_profiles, "fictitious profiles");
    app.add_option("--forget-ratio", forget_ratio);
    app.add_option("--epsilon", epsilon, "PGD L-inf budget");
    app.add_option("--alpha", alpha, "PGD step size");
    app.add_option("--steps,--pgd-steps", pgd_steps);
    app.add_option("--contrast-pairs", contrast_pairs);
    app.add_option("--layers", layers, "steered layers")->delimiter(',');
    app.add_option("--nullspace-tau,--tau", tau, "relative eigenvalue cutoff for the retain null space");
    app.add_option("--gamma", gamma, "ridge weight");
    app.add_option("--lambda", lambda, "steering strength");
    app.add_option("--scope", scope, "all_positions or from_last_prompt");
    app.add_option("--epochs", finetune_epochs, "fine-tuning epochs");
  }

  ExperimentConfig resolve() const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) j = ExperimentConfig::load(config_path).to_json();
    if (config_path.empty()) j = ExperimentConfig().to_json();
    if (seed) j["model"]["seed"] = *seed;
    if (data_seed) j["bench"]["seed"] = *data_seed;
    if (hidden_dim) j["model"]["hidden_dim"] = *hidden_dim;
    if (n_profiles) j["bench"]["n_profiles"] = *n_profiles;
    if (forget_ratio) j["bench"]["forget_ratio"] = *forget_ratio;
    if (epsilon) j["attack"]["epsilon"] = *epsilon;
    if (alpha) j["attack"]["alpha"] = *alpha;
    if (pgd_steps) j["attack"]["steps"] = *pgd_steps;
    if (contrast_pairs) j["contrast_pairs"] = *contrast_pairs;
    if (!layers.empty()) j["layers"] = layers;
    if (tau) j["tau"] = *tau;
    if (gamma) j["gamma"] = *gamma;
    if (lambda) j["lambda"] = *lambda;
    if (scope) j["scope"] = *scope;
    if (finetune_epochs) j["finetune"]["epochs"] = *finetune_epochs;
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    if (!config_path.empty() && !output_dir) {
      cfg.output_dir = ExperimentConfig::load(config_path).output_dir;
    }
    if (output_dir) cfg.output_dir = *output_dir;
    return cfg;
  }
};

int validate_files(const std::vector<std::string>& files) {
  int bad = 0;
  for (const auto& f : files) {
    const nullsteer::ValidationReport rep = nullsteer::validate_trace(f);
    if (rep.ok()) {
      std::cout << f << ": ok\n";
      continue;
    }
    ++bad;
    for (const auto& v : rep.violations) std::cout << f << ": " << v << '\n';
  }
  return bad == 0 ? 0 : static_cast<int>(nullsteer::ExitCode::kValidation);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time knowledge erasure on a toy multimodal transformer"};
  app.require_subcommand(1);
  Overrides ov;

  struct Cmd {
    CLI::App* app;
    std::function<nlohmann::json(const ExperimentConfig&)> run;
  };
  std::vector<Cmd> cmds;
  auto add = [&](const char* name, const char* help,
                 std::function<nlohmann::json(const ExperimentConfig&)> fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    ov.attach(*sub);
    cmds.push_back({sub, std::move(fn)});
    return sub;
  };
  add("gen-data", "generate the benchmark",
      [](const ExperimentConfig& c) { return nullsteer::cmd_gen_data(c, std::cerr); });
  add("train", "pretrain and fine-tune the toy model",
      [](const ExperimentConfig& c) { return nullsteer::cmd_train(c, std::cerr); });
  add("attack", "PGD images for the contrast sets",
      [](const ExperimentConfig& c) { return nullsteer::cmd_attack(c, std::cerr); });
  add("extract", "last-prompt-token activations per steered layer",
      [](const ExperimentConfig& c) { return nullsteer::cmd_extract(c, std::cerr); });
  add("solve", "erasure direction, null-space projector and steering operator",
      [](const ExperimentConfig& c) { return nullsteer::cmd_solve(c, std::cerr); });
  bool steered = false;
  bool vanilla = false;
  CLI::App* eval = add("eval", "score the benchmark", [&](const ExperimentConfig& c) {
    return nullsteer::cmd_eval(c, steered, std::cerr);
  });
  auto* steered_flag = eval->add_flag("--steered", steered, "apply plan.json");
  eval->add_flag("--vanilla", vanilla, "no steering (default)")->excludes(steered_flag);
  add("report", "vanilla vs steered summary",
      [](const ExperimentConfig& c) { return nullsteer::cmd_report(c, std::cerr); });
  add("run", "every stage in order",
      [](const ExperimentConfig& c) { return nullsteer::cmd_run(c, std::cerr); });

  CLI::App* show = app.add_subcommand("config", "print the resolved config and its hash");
  ov.attach(*show);

  std::vector<std::string> files;
  CLI::App* validate = app.add_subcommand("validate", "check ACTV1 files");
  validate->add_option("files", files)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(nullsteer::ExitCode::kValidation);
  }

  try {
    if (validate->parsed()) return validate_files(files);
    const ExperimentConfig cfg = ov.resolve();
    if (show->parsed()) {
      nlohmann::json j = cfg.to_json();
      j["output_dir"] = cfg.output_dir.string();
      std::cout << j.dump(2) << "\nhash " << cfg.hash() << '\n';
      return 0;
    }
    for (const Cmd& c : cmds) {
      if (c.app->parsed()) {
        std::cout << c.run(cfg).dump(2) << '\n';
        return 0;
      }
    }
  } catch (const nullsteer::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(nullsteer::ExitCode::kValidation);
  }
  return 0;
}
