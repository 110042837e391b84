#pragma once

// Config-driven experiment runner. Every kind runs once per seed; results are
// returned in memory and, unless disabled, written under the output directory:
//
//   <out>/seed_<s>/...        per-seed CSVs, training logs, checkpoints
//   <out>/*.csv               aggregates across seeds (mean, sample std)
//   <out>/manifest.json       config hash, seeds, version, wall time, status

#include "saelab/analysis.hpp"
#include "saelab/config.hpp"
#include "saelab/feature_model.hpp"
#include "saelab/io.hpp"
#include "saelab/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace saelab {

inline constexpr const char* kVersion = "1.0.0";

/// Keeps the per-step batch temporaries on the heap instead of fresh mmap
/// pages (glibc only; a no-op elsewhere). Call once at program start.
void tune_allocator();

/// splitmix64 mix of a run seed and a purpose tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

namespace seed_tag {
inline constexpr std::uint64_t kBasis = 1;
inline constexpr std::uint64_t kSamples = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kExtend = 4;
inline constexpr std::uint64_t kContinue = 5;
inline constexpr std::uint64_t kRandomSubspace = 6;
}  // namespace seed_tag

/// One trained SAE and its alignment against the ground truth.
struct RunRecord {
  std::uint64_t seed = 0;
  Index width = 0;
  std::string variant;  // beta label or rho, empty otherwise
  double rho = 0.0;
  std::optional<BetaSetting> beta;
  TrainerState state;
  std::vector<LogRow> log;
  AlignmentReport report;
};

struct SweepPoint {
  double rho = 0.0;
  std::uint64_t seed = 0;
  double cos_l_f2 = 0.0;
};

struct HedgingRecord {
  std::uint64_t seed = 0;
  Index width = 0;
  HedgingDegreeReport report;
};

struct LossCurveRecord {
  double p_alone = 0.0;
  double p_both = 0.0;
  double l1 = 0.0;
  LossCurve curve;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  std::vector<SweepPoint> sweep;
  std::vector<HedgingRecord> hedging;
  std::vector<LossCurveRecord> curves;
  bool complete = false;
  std::string error;
  double wall_seconds = 0.0;
};

struct RunOptions {
  bool write_files = true;
  bool keep_states = true;  // drop trained states from the result to save memory when false
  std::optional<std::filesystem::path> output_dir;
  std::optional<int> threads;
  std::optional<std::vector<std::uint64_t>> seeds;
};

/// Runs every seed of the experiment. Failures are caught: the result is
/// marked incomplete, the manifest says so and partial outputs are kept.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Trains one SAE of `width` latents on the config's feature model for a seed.
/// `init_from_features` starts latent i at feature i (for i below both counts).
RunRecord train_on_feature_model(const FeatureModelConfig& model, const SaeConfig& sae,
                                 Index width, const TrainConfig& train, std::uint64_t seed);

/// Firing model with the second feature's correlation replaced by `rho`.
FeatureModelConfig with_correlation(const FeatureModelConfig& model, double rho);

/// Matryoshka spec for a balance setting: inner levels get beta, the outer 1.
MatryoshkaSpec balance_spec(const MatryoshkaSpec& prefixes, const BetaSetting& setting);

/// Long-form alignment table: latent, feature, encoder_cos, decoder_cos,
/// matched_feature, label.
CsvTable alignment_table(const AlignmentReport& report);

}  // namespace saelab
