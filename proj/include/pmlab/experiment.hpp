#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pmlab/activation.hpp"
#include "pmlab/adapt.hpp"
#include "pmlab/dataqa.hpp"
#include "pmlab/model.hpp"
#include "pmlab/rng.hpp"

#include "json.hpp"

namespace pmlab {

// Invalid or unparsable configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An upstream artifact was produced under a different config (exit code 3).
struct StaleArtifactError : std::runtime_error {
  explicit StaleArtifactError(const std::string& file)
      : std::runtime_error("stale artifact: " + file +
                           " was produced under a different config; regenerate it"),
        file(file) {}
  std::string file;
};

struct PretrainSection {
  int steps = 3000;
  double lr = 1e-2;
  int batch = 16;
};

struct DataSection {
  int n_facts = 200;
  int n_entities = 120;
  double counterfactual_rate = 0.5;
  double train_fraction = 0.5;
};

struct SelectionSection {
  SelectionStrategy strategy = SelectionStrategy::UaGap;
  int n_layers_to_suppress = 8;
  int n_perm = 1000;
};

struct SuppressionSection {
  SuppressionKind kind = SuppressionKind::FFN;
  double lambda = 0.0;
};

struct SweepSection {
  Vector lambda_list = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<int> n_list = {1, 2, 4, 6, 8};
  std::vector<std::pair<double, double>> alpha_beta_list = {
      {1.0, 0.0}, {0.75, 0.25}, {0.5, 0.5}, {0.25, 0.75}, {0.0, 1.0}};
};

struct EvalSection {
  int max_new = 16;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  ModelConfig model;  // vocab_size stays 0 until a vocabulary is built
  DataSection data;
  PretrainSection pretrain;
  ElicitParams elicitation;
  SelectionSection selection;
  SuppressionSection suppression;
  AdaptConfig adapt;
  Vector intervention_lambdas = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25};
  SweepSection sweep;
  EvalSection eval;
  std::string out_dir = "out";

  nlohmann::ordered_json effective_json;  // after defaults + overrides
  std::string config_hash;                // over everything except paths

  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }
};

nlohmann::ordered_json default_config_json();

// Parse + validate; throws ConfigError. Overrides are "key.path=value" pairs
// applied onto the JSON before parsing; values parse as JSON when possible,
// else as strings.
ExperimentConfig experiment_config_from_json(nlohmann::ordered_json j);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides = {},
                                        const std::optional<std::string>& out_dir = std::nullopt,
                                        const std::optional<std::uint64_t>& seed = std::nullopt);

std::string config_hash_of(const nlohmann::ordered_json& effective);

}  // namespace pmlab
