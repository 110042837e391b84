#pragma once

// SAE parameterization, forward pass and loss.
//
//   z    = sigma(W_enc (x - b_dec) + b_enc)
//   xhat = z W_dec + b_dec
//
// W_enc and W_dec are both L x D; row i of W_dec is the decoder direction of
// latent i. A tied SAE keeps a single L x D matrix that serves as both.

#include "saelab/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace saelab {

enum class ActivationKind { kReLU, kTopK, kBatchTopK };

struct Activation {
  ActivationKind kind = ActivationKind::kReLU;
  Index k = 0;  // used by TopK / BatchTopK

  static Activation relu() { return {}; }
  static Activation topk(Index k) { return {ActivationKind::kTopK, k}; }
  static Activation batch_topk(Index k) { return {ActivationKind::kBatchTopK, k}; }

  bool is_topk_family() const { return kind != ActivationKind::kReLU; }
  bool operator==(const Activation&) const = default;
};

std::string to_string(ActivationKind kind);
ActivationKind activation_kind_from_string(const std::string& name);

struct MatryoshkaSpec {
  std::vector<Index> prefixes;  // strictly increasing, last == L
  std::vector<double> betas;    // one per prefix, >= 0
  bool detached_inner = false;

  void validate(Index latents) const;
  bool operator==(const MatryoshkaSpec&) const = default;
};

enum class SparsityPenalty {
  kDecoderNormL1,  // sum_i z_i * ||W_dec,i||
  kPlainL1,        // sum_i z_i, paired with decoder renormalization after each step
};

class SaeParams {
 public:
  SaeParams() = default;
  SaeParams(Index dims, Index latents, Activation activation, bool tied,
            std::optional<MatryoshkaSpec> matryoshka = std::nullopt);

  Index dims() const { return w_dec_.cols(); }
  Index latents() const { return w_dec_.rows(); }
  bool tied() const { return tied_; }
  const Activation& activation() const { return activation_; }
  const std::optional<MatryoshkaSpec>& matryoshka() const { return matryoshka_; }
  void set_matryoshka(std::optional<MatryoshkaSpec> spec);

  // For tied SAEs both accessors return the same storage.
  Matrix& w_enc() { return tied_ ? w_dec_ : w_enc_; }
  const Matrix& w_enc() const { return tied_ ? w_dec_ : w_enc_; }
  Matrix& w_dec() { return w_dec_; }
  const Matrix& w_dec() const { return w_dec_; }
  Vector& b_enc() { return b_enc_; }
  const Vector& b_enc() const { return b_enc_; }
  Vector& b_dec() { return b_dec_; }
  const Vector& b_dec() const { return b_dec_; }

  /// Exact (bitwise for finite values) equality of configuration and weights.
  bool operator==(const SaeParams& other) const;

 private:
  Matrix w_enc_;  // empty when tied
  Matrix w_dec_;
  Vector b_enc_;
  Vector b_dec_;
  Activation activation_;
  bool tied_ = false;
  std::optional<MatryoshkaSpec> matryoshka_;
};

/// Random unit directions scaled to `init_norm`; encoder rows copy decoder rows.
SaeParams init_sae(Index dims, Index latents, Activation activation, bool tied,
                   std::optional<MatryoshkaSpec> matryoshka, double init_norm,
                   std::uint64_t seed);

/// Appends `new_latents` randomly oriented latents (encoder == decoder, norm
/// `init_norm`, zero encoder bias). Existing rows are copied untouched. The
/// outermost matryoshka prefix grows to the new width.
SaeParams extend_sae(const SaeParams& params, Index new_latents, double init_norm,
                     std::uint64_t seed);

struct ForwardPass {
  Matrix centered;  // x - b_dec
  Matrix pre;       // W_enc (x - b_dec) + b_enc
  Matrix z;         // after activation and selection
  Matrix xhat;
};

ForwardPass forward(const SaeParams& params, const Matrix& x);

// Selection helpers operate in place on post-ReLU activations. Ties go to the
// lower latent index (then lower row for BatchTopK).
void select_topk(Matrix& z, Index k);
void select_batch_topk(Matrix& z, Index k);

struct Level {
  Index prefix;
  double beta;
};

/// Loss levels: the matryoshka prefixes, or a single full-width level.
std::vector<Level> loss_levels(const SaeParams& params);

struct LossOptions {
  double l1 = 0.0;         // lambda
  double aux_coeff = 0.0;  // aux-alpha
  SparsityPenalty sparsity = SparsityPenalty::kDecoderNormL1;
};

struct AuxInputs {
  std::vector<bool> dead;  // per latent
  Index k_aux = 0;
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> mse;       // per level, innermost first
  std::vector<double> sparsity;  // per level (unscaled by lambda)
  double aux = 0.0;
  double l0 = 0.0;

  double outer_mse() const { return mse.empty() ? 0.0 : mse.back(); }
  double outer_sparsity() const { return sparsity.empty() ? 0.0 : sparsity.back(); }
};

/// Per-latent sparsity weights: ||W_dec,i|| or 1.
Vector sparsity_weights(const SaeParams& params, SparsityPenalty penalty);

LossBreakdown compute_loss(const SaeParams& params, const Matrix& x, const LossOptions& options,
                           const AuxInputs* aux = nullptr);

/// Dead-latent auxiliary loss: dead latents reconstruct `residual` (held fixed)
/// through their top-k_aux post-ReLU pre-activations, no decoder bias.
double aux_loss(const SaeParams& params, const Matrix& pre, const Matrix& residual,
                const AuxInputs& aux);

/// Post-ReLU aux activations restricted to dead latents, top-k_aux per row.
Matrix aux_activations(const Matrix& pre, const AuxInputs& aux);

}  // namespace saelab
