#pragma once

#include "saelab/feature_model.hpp"
#include "saelab/sae.hpp"

#include <optional>
#include <random>
#include <vector>

namespace saelab {

/// Gradients of compute_loss. For tied SAEs `w_enc` is empty and the encoder
/// contribution is folded into `w_dec`.
struct Gradients {
  Matrix w_enc;
  Vector b_enc;
  Matrix w_dec;
  Vector b_dec;
  LossBreakdown loss;  // loss at the evaluated point
};

/// Analytic backprop through forward + compute_loss. With `detached_inner`
/// each matryoshka level only trains the latents of its own suffix, and the
/// decoder bias only sees the innermost level. The aux residual is treated as
/// a constant.
Gradients compute_gradients(const SaeParams& params, const Matrix& x, const LossOptions& options,
                            const AuxInputs* aux = nullptr);
Gradients compute_gradients(const SaeParams& params, const Matrix& x, const ForwardPass& fp,
                            const LossOptions& options, const AuxInputs* aux = nullptr);

struct AdamConfig {
  std::optional<double> lr;  // unset: 3e-4 for TopK family, 7e-5 for ReLU
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

double default_learning_rate(ActivationKind kind);

struct TrainConfig {
  AdamConfig adam;
  Index batch_size = 1024;
  std::int64_t total_samples = 2'000'000;
  double l1 = 0.0;
  std::int64_t l1_warmup_steps = 0;
  std::optional<double> l1_min;  // unset: equal to l1, which disables re-warm-up
  double aux_coeff = 1.0 / 32.0;
  Index aux_k = 0;  // 0: 2k for TopK family, 32 for ReLU
  std::int64_t dead_window = 1'000'000;
  SparsityPenalty sparsity = SparsityPenalty::kDecoderNormL1;
  std::uint64_t seed = 0;
  std::int64_t log_every = 100;  // steps

  std::int64_t total_steps() const { return (total_samples + batch_size - 1) / batch_size; }
  double lambda_min() const { return l1_min.value_or(l1); }
  void validate() const;
};

struct SaeSpec {
  Index dims = 0;
  Index latents = 0;
  Activation activation;
  bool tied = false;
  std::optional<MatryoshkaSpec> matryoshka;
  double init_norm = 0.1;
  std::uint64_t init_seed = 0;
  // Optional starting directions for the first rows() latents (encoder and
  // decoder both set to the given rows).
  std::optional<Matrix> init_rows;
};

SaeParams build_sae(const SaeSpec& spec);

struct AdamMoments {
  Matrix w_enc;  // empty when tied
  Vector b_enc;
  Matrix w_dec;
  Vector b_dec;
};

AdamMoments zero_moments(const SaeParams& params);

struct TrainerState {
  SaeParams params;
  AdamMoments m;
  AdamMoments v;
  std::int64_t step = 0;
  std::vector<std::int64_t> since_fired;  // samples since each latent last fired
};

TrainerState initial_state(SaeParams params);

/// Appends latents to a state: new moments are zero, new fire counters zero.
TrainerState extend_state(const TrainerState& state, Index new_latents, double init_norm,
                          std::uint64_t seed);

struct LogRow {
  std::int64_t step = 0;
  double total = 0.0;
  double mse = 0.0;
  double sparsity = 0.0;
  double aux = 0.0;
  double l0 = 0.0;
  double lambda_eff = 0.0;
};

/// Linear warm-up to `target` over `warmup_steps`, never below `floor`.
struct L1Schedule {
  double target = 0.0;
  std::int64_t warmup_steps = 0;
  double floor = 0.0;

  double at(std::int64_t step) const;
};

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Index dims() const = 0;
  /// Exactly `rows` samples, or TruncationError.
  virtual Matrix next(Index rows) = 0;
};

class SyntheticSource final : public BatchSource {
 public:
  SyntheticSource(FeatureBasis basis, FiringModel firing, std::uint64_t seed);
  Index dims() const override { return basis_.dims(); }
  Matrix next(Index rows) override;

 private:
  FeatureBasis basis_;
  FiringModel firing_;
  std::mt19937_64 rng_;
};

class Trainer {
 public:
  Trainer(TrainerState state, TrainConfig config, L1Schedule schedule);

  /// One Adam step on `batch`; the schedule is indexed by steps taken by this
  /// trainer, not by the state's global step counter.
  void step(const Matrix& batch);

  const TrainerState& state() const { return state_; }
  TrainerState release() { return std::move(state_); }
  const std::vector<LogRow>& log() const { return log_; }
  std::int64_t local_steps() const { return local_step_; }

 private:
  TrainerState state_;
  TrainConfig config_;
  L1Schedule schedule_;
  LossOptions options_;
  double lr_;
  Index aux_k_;
  std::int64_t local_step_ = 0;
  std::vector<LogRow> log_;
};

struct TrainResult {
  TrainerState state;
  std::vector<LogRow> log;
};

TrainResult train(BatchSource& source, const TrainConfig& config, const SaeSpec& spec);

/// Continues training an existing state for `samples` samples.
TrainResult train_more(TrainerState state, BatchSource& source, const TrainConfig& config,
                       std::int64_t samples, const L1Schedule& schedule);

struct PairResult {
  TrainerState base;      // s0': original width, trained on the same batches
  TrainerState extended;  // s1': extended by N latents
  std::vector<LogRow> base_log;
  std::vector<LogRow> extended_log;
};

/// L1 schedule used after extension: re-warm from the floor lambda_min when
/// lambda > lambda_min, otherwise constant lambda.
L1Schedule continuation_schedule(const TrainConfig& config);

/// Extends `state0` by `new_latents` and trains both the extended and the
/// original SAE on one shared sequence of batches drawn from `source`.
PairResult continue_train_pair(const TrainerState& state0, Index new_latents,
                               const TrainConfig& config, BatchSource& source,
                               std::int64_t budget, double init_norm = 0.1,
                               std::uint64_t extend_seed = 0);

}  // namespace saelab
