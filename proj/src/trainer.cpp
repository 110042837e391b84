#include "saelab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace saelab {

namespace {

bool any_dead(const AuxInputs* aux) {
  return aux != nullptr && aux->k_aux > 0 &&
         std::any_of(aux->dead.begin(), aux->dead.end(), [](bool d) { return d; });
}

}  // namespace

Gradients compute_gradients(const SaeParams& params, const Matrix& x, const LossOptions& options,
                            const AuxInputs* aux) {
  return compute_gradients(params, x, forward(params, x), options, aux);
}

Gradients compute_gradients(const SaeParams& params, const Matrix& x, const ForwardPass& fp,
                            const LossOptions& options, const AuxInputs* aux) {
  const Index batch_rows = x.rows();
  const double batch = static_cast<double>(batch_rows);
  const Index width = params.latents();
  const Matrix& w_dec = params.w_dec();
  const Matrix& w_enc = params.w_enc();
  const bool sparse_penalty = !params.activation().is_topk_family();
  const bool norm_weighted = options.sparsity == SparsityPenalty::kDecoderNormL1;
  const Vector weights = sparsity_weights(params, options.sparsity);
  const bool detached = params.matryoshka() && params.matryoshka()->detached_inner;
  const std::vector<Level> levels = loss_levels(params);

  Gradients g;
  g.w_dec = Matrix::Zero(width, params.dims());
  g.b_dec = Vector::Zero(params.dims());
  Matrix dz = Matrix::Zero(batch_rows, width);
  const Vector z_sum = fp.z.colwise().sum().transpose();

  Matrix recon = Matrix::Zero(batch_rows, x.cols());
  recon.rowwise() += params.b_dec().transpose();
  double sparsity = 0.0;
  Index done = 0;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    const Level& level = levels[j];
    const Index suffix = level.prefix - done;
    recon += fp.z.middleCols(done, suffix) * w_dec.middleRows(done, suffix);
    const Matrix residual = recon - x;
    if (sparse_penalty) sparsity += z_sum.segment(done, suffix).dot(weights.segment(done, suffix)) / batch;
    const double mse = residual.rowwise().squaredNorm().mean();
    g.loss.mse.push_back(mse);
    g.loss.sparsity.push_back(sparsity);
    g.loss.total += level.beta * (mse + options.l1 * sparsity);

    const Index first = detached ? done : 0;
    const Index span = level.prefix - first;
    const double coef = 2.0 * level.beta / batch;
    if (level.beta != 0.0) {
      g.w_dec.middleRows(first, span).noalias() +=
          coef * fp.z.middleCols(first, span).transpose() * residual;
      dz.middleCols(first, span).noalias() +=
          coef * residual * w_dec.middleRows(first, span).transpose();
      if (sparse_penalty && options.l1 != 0.0) {
        const double s = level.beta * options.l1 / batch;
        dz.middleCols(first, span).rowwise() += s * weights.segment(first, span).transpose();
        if (norm_weighted) {
          for (Index i = first; i < level.prefix; ++i) {
            if (weights(i) > 0.0) g.w_dec.row(i) += (s * z_sum(i) / weights(i)) * w_dec.row(i);
          }
        }
      }
      if (!detached || j == 0) g.b_dec += coef * residual.colwise().sum().transpose();
    }
    done = level.prefix;
  }

  // Backprop through the activation: only selected, positive latents pass.
  Matrix dpre = (fp.z.array() > 0.0).select(dz, 0.0);
  // Encoder-input path into b_dec (x - b_dec); detached mode keeps only the
  // innermost level's latents on this path.
  const Index bias_latents = detached ? levels.front().prefix : width;
  g.b_dec -= (dpre.leftCols(bias_latents) * w_enc.topRows(bias_latents)).colwise().sum().transpose();

  if (any_dead(aux) && options.aux_coeff > 0.0) {
    const Matrix za = aux_activations(fp.pre, *aux);
    const Matrix diff = za * w_dec - (x - fp.xhat);
    g.loss.aux = diff.rowwise().squaredNorm().mean();
    g.loss.total += options.aux_coeff * g.loss.aux;
    const double c = 2.0 * options.aux_coeff / batch;
    g.w_dec.noalias() += c * za.transpose() * diff;
    const Matrix dza = c * diff * w_dec.transpose();
    const Matrix daux = (za.array() > 0.0).select(dza, 0.0);
    g.b_dec -= (daux * w_enc).colwise().sum().transpose();
    dpre += daux;
  }

  Matrix dw_enc = dpre.transpose() * fp.centered;
  g.b_enc = dpre.colwise().sum().transpose();
  if (params.tied()) {
    g.w_dec += dw_enc;
  } else {
    g.w_enc = std::move(dw_enc);
  }
  g.loss.l0 = static_cast<double>((fp.z.array() > 0.0).count()) / batch;
  return g;
}

double default_learning_rate(ActivationKind kind) {
  return kind == ActivationKind::kReLU ? 7e-5 : 3e-4;
}

void TrainConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
  if (total_samples <= 0) throw ConfigError("train: sample budget must be positive");
  if (l1 < 0.0) throw ConfigError("train: l1 must be >= 0");
  if (l1_warmup_steps < 0 || l1_warmup_steps > total_steps()) {
    throw ConfigError("train: l1 warm-up steps must lie in [0, total steps]");
  }
  if (lambda_min() > l1 || lambda_min() < 0.0) throw ConfigError("train: need 0 <= l1_min <= l1");
  if (adam.lr && *adam.lr < 0.0) throw ConfigError("train: learning rate must be >= 0");
  if (aux_coeff < 0.0) throw ConfigError("train: aux coefficient must be >= 0");
  if (dead_window <= 0) throw ConfigError("train: dead window must be positive");
  if (log_every <= 0) throw ConfigError("train: log interval must be positive");
}

SaeParams build_sae(const SaeSpec& spec) {
  SaeParams params = init_sae(spec.dims, spec.latents, spec.activation, spec.tied, spec.matryoshka,
                              spec.init_norm, spec.init_seed);
  if (spec.init_rows) {
    const Matrix& rows = *spec.init_rows;
    if (rows.cols() != spec.dims || rows.rows() > spec.latents) {
      throw DimensionError("build_sae: init_rows shape does not fit the SAE");
    }
    params.w_dec().topRows(rows.rows()) = rows;
    if (!spec.tied) params.w_enc().topRows(rows.rows()) = rows;
  }
  return params;
}

AdamMoments zero_moments(const SaeParams& params) {
  AdamMoments m;
  if (!params.tied()) m.w_enc = Matrix::Zero(params.latents(), params.dims());
  m.b_enc = Vector::Zero(params.latents());
  m.w_dec = Matrix::Zero(params.latents(), params.dims());
  m.b_dec = Vector::Zero(params.dims());
  return m;
}

TrainerState initial_state(SaeParams params) {
  TrainerState state;
  state.m = zero_moments(params);
  state.v = zero_moments(params);
  state.since_fired.assign(static_cast<std::size_t>(params.latents()), 0);
  state.params = std::move(params);
  return state;
}

namespace {

AdamMoments extend_moments(const AdamMoments& m, const SaeParams& extended) {
  AdamMoments out = zero_moments(extended);
  const Index old = m.w_dec.rows();
  if (m.w_enc.size() > 0) out.w_enc.topRows(old) = m.w_enc;
  out.b_enc.head(old) = m.b_enc;
  out.w_dec.topRows(old) = m.w_dec;
  out.b_dec = m.b_dec;
  return out;
}

}  // namespace

TrainerState extend_state(const TrainerState& state, Index new_latents, double init_norm,
                          std::uint64_t seed) {
  TrainerState out;
  out.params = extend_sae(state.params, new_latents, init_norm, seed);
  out.m = extend_moments(state.m, out.params);
  out.v = extend_moments(state.v, out.params);
  out.step = state.step;
  out.since_fired = state.since_fired;
  out.since_fired.resize(static_cast<std::size_t>(out.params.latents()), 0);
  return out;
}

double L1Schedule::at(std::int64_t step) const {
  double value = target;
  if (warmup_steps > 0 && step < warmup_steps) {
    value = target * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  return std::max(value, floor);
}

SyntheticSource::SyntheticSource(FeatureBasis basis, FiringModel firing, std::uint64_t seed)
    : basis_(std::move(basis)), firing_(std::move(firing)), rng_(seed) {}

Matrix SyntheticSource::next(Index rows) {
  return sample_batch(basis_, firing_, rows, rng_).x;
}

Trainer::Trainer(TrainerState state, TrainConfig config, L1Schedule schedule)
    : state_(std::move(state)), config_(std::move(config)), schedule_(schedule) {
  const Activation& act = state_.params.activation();
  lr_ = config_.adam.lr.value_or(default_learning_rate(act.kind));
  aux_k_ = config_.aux_k > 0 ? config_.aux_k : (act.is_topk_family() ? 2 * act.k : 32);
  options_.aux_coeff = config_.aux_coeff;
  options_.sparsity = config_.sparsity;
}

namespace {

template <typename Tensor>
void adam_update(Tensor& param, Tensor& m, Tensor& v, const Tensor& grad, double lr,
                 const AdamConfig& cfg, double bias1, double bias2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  param.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + cfg.eps);
}

}  // namespace

void Trainer::step(const Matrix& batch) {
  SaeParams& p = state_.params;
  options_.l1 = schedule_.at(local_step_);

  AuxInputs aux;
  aux.k_aux = aux_k_;
  aux.dead.resize(state_.since_fired.size());
  for (std::size_t i = 0; i < aux.dead.size(); ++i) {
    aux.dead[i] = state_.since_fired[i] >= config_.dead_window;
  }

  const ForwardPass fp = forward(p, batch);
  Gradients g = compute_gradients(p, batch, fp, options_, &aux);

  if (local_step_ % config_.log_every == 0) {
    log_.push_back({state_.step, g.loss.total, g.loss.outer_mse(), g.loss.outer_sparsity(),
                    g.loss.aux, g.loss.l0, options_.l1});
  }

  // Fire tracking uses the pre-update activations of this batch.
  for (Index i = 0; i < p.latents(); ++i) {
    auto& counter = state_.since_fired[static_cast<std::size_t>(i)];
    counter = (fp.z.col(i).array() > 0.0).any() ? 0 : counter + batch.rows();
  }

  ++state_.step;
  ++local_step_;
  const double t = static_cast<double>(state_.step);
  const double bias1 = 1.0 - std::pow(config_.adam.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.adam.beta2, t);
  if (!p.tied()) adam_update(p.w_enc(), state_.m.w_enc, state_.v.w_enc, g.w_enc, lr_, config_.adam, bias1, bias2);
  adam_update(p.w_dec(), state_.m.w_dec, state_.v.w_dec, g.w_dec, lr_, config_.adam, bias1, bias2);
  adam_update(p.b_enc(), state_.m.b_enc, state_.v.b_enc, g.b_enc, lr_, config_.adam, bias1, bias2);
  adam_update(p.b_dec(), state_.m.b_dec, state_.v.b_dec, g.b_dec, lr_, config_.adam, bias1, bias2);

  if (config_.sparsity == SparsityPenalty::kPlainL1) {
    for (Index i = 0; i < p.latents(); ++i) {
      const double n = p.w_dec().row(i).norm();
      if (n > 0.0) p.w_dec().row(i) /= n;
    }
  }
}

namespace {

std::vector<LogRow> run_steps(Trainer& trainer, BatchSource& source, const TrainConfig& config,
                              std::int64_t samples) {
  std::int64_t remaining = samples;
  while (remaining > 0) {
    const Index rows = static_cast<Index>(std::min<std::int64_t>(config.batch_size, remaining));
    trainer.step(source.next(rows));
    remaining -= rows;
  }
  return trainer.log();
}

}  // namespace

TrainResult train(BatchSource& source, const TrainConfig& config, const SaeSpec& spec) {
  config.validate();
  if (source.dims() != spec.dims) {
    throw DimensionError("train: source dims " + std::to_string(source.dims()) +
                         " != SAE dims " + std::to_string(spec.dims));
  }
  const bool uses_l1 = !spec.activation.is_topk_family();
  const L1Schedule schedule{uses_l1 ? config.l1 : 0.0, config.l1_warmup_steps, 0.0};
  return train_more(initial_state(build_sae(spec)), source, config, config.total_samples,
                    schedule);
}

TrainResult train_more(TrainerState state, BatchSource& source, const TrainConfig& config,
                       std::int64_t samples, const L1Schedule& schedule) {
  Trainer trainer(std::move(state), config, schedule);
  auto log = run_steps(trainer, source, config, samples);
  return {trainer.release(), std::move(log)};
}

L1Schedule continuation_schedule(const TrainConfig& config) {
  const double lam = config.l1;
  const double floor = config.lambda_min();
  if (lam > floor) return {lam, config.l1_warmup_steps, floor};
  return {lam, 0, lam};
}

PairResult continue_train_pair(const TrainerState& state0, Index new_latents,
                               const TrainConfig& config, BatchSource& source,
                               std::int64_t budget, double init_norm, std::uint64_t extend_seed) {
  PairResult out;
  TrainerState extended = extend_state(state0, new_latents, init_norm, extend_seed);
  if (budget <= 0) {
    out.base = state0;
    out.extended = std::move(extended);
    return out;
  }
  L1Schedule schedule = state0.params.activation().is_topk_family()
                            ? L1Schedule{0.0, 0, 0.0}
                            : continuation_schedule(config);
  Trainer base(state0, config, schedule);
  Trainer ext(std::move(extended), config, schedule);
  std::int64_t remaining = budget;
  while (remaining > 0) {
    const Index rows = static_cast<Index>(std::min<std::int64_t>(config.batch_size, remaining));
    const Matrix batch = source.next(rows);
    base.step(batch);
    ext.step(batch);
    remaining -= rows;
  }
  out.base_log = base.log();
  out.extended_log = ext.log();
  out.base = base.release();
  out.extended = ext.release();
  return out;
}

}  // namespace saelab
