#pragma once

// Experiment configuration files (JSON). Unknown keys are rejected.

#include "saelab/feature_model.hpp"
#include "saelab/sae.hpp"
#include "saelab/trainer.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace saelab {

enum class ExperimentKind {
  kToyFigure,
  kSingleLatent,
  kCorrelationSweep,
  kLossCurve,
  kFullWidthControl,
  kHedgingDegree,
  kBalanceToy,
  kUnbalanceableToy,
  kBalanceSweep,
};

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

struct FeatureModelConfig {
  Index dims = 50;
  bool axis_aligned = false;
  std::vector<FeatureFiring> features;

  FiringModel firing() const { return FiringModel(features); }
};

struct SaeConfig {
  std::vector<Index> widths;
  Activation activation;
  bool tied = false;
  double init_norm = 0.1;
  std::optional<MatryoshkaSpec> matryoshka;
  bool init_from_features = false;  // start latent i at feature i
};

/// One point of a balance-coefficient sweep: the inner-level beta, or the
/// detached variant.
struct BetaSetting {
  double beta = 0.0;
  bool detached = false;

  std::string label() const;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kToyFigure;
  std::string name;
  std::filesystem::path output_dir;
  std::vector<std::uint64_t> seeds;
  int threads = 1;

  std::optional<FeatureModelConfig> feature_model;
  SaeConfig sae;
  TrainConfig train;

  // correlation_sweep
  std::vector<double> rhos;
  // loss_curve: (P(parent alone), P(parent and child))
  std::vector<std::pair<double, double>> cases;
  std::vector<double> l1_values;
  double grid_step = 0.01;
  // hedging_degree
  Index new_latents = 64;
  std::int64_t continue_samples = 0;
  Index random_draws = 1;
  std::optional<std::filesystem::path> stream;
  // balance_toy, unbalanceable_toy, balance_sweep
  std::vector<BetaSetting> betas;

  nlohmann::json source;  // the parsed document, used for hashing
};

ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Parsers for the individual sections, shared with the CLI.
FeatureModelConfig parse_feature_model(const nlohmann::json& j);
TrainConfig parse_train_config(const nlohmann::json& j);
SaeConfig parse_sae_config(const nlohmann::json& j);

/// FNV-1a over the canonical dump of a JSON document, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

}  // namespace saelab
