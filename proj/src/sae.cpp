#include "saelab/sae.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>

namespace saelab {

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kReLU: return "relu";
    case ActivationKind::kTopK: return "topk";
    case ActivationKind::kBatchTopK: return "batchtopk";
  }
  return "unknown";
}

ActivationKind activation_kind_from_string(const std::string& name) {
  if (name == "relu") return ActivationKind::kReLU;
  if (name == "topk") return ActivationKind::kTopK;
  if (name == "batchtopk") return ActivationKind::kBatchTopK;
  throw ConfigError("unknown activation '" + name + "' (expected relu, topk or batchtopk)");
}

void MatryoshkaSpec::validate(Index latents) const {
  if (prefixes.empty()) throw ConfigError("matryoshka: at least one prefix required");
  if (prefixes.size() != betas.size()) {
    throw ConfigError("matryoshka: need one beta per prefix");
  }
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    if (prefixes[i] <= 0 || (i > 0 && prefixes[i] <= prefixes[i - 1])) {
      throw ConfigError("matryoshka: prefixes must be positive and strictly increasing");
    }
    if (!(betas[i] >= 0.0)) throw ConfigError("matryoshka: betas must be >= 0");
  }
  if (prefixes.back() != latents) {
    std::ostringstream msg;
    msg << "matryoshka: last prefix " << prefixes.back() << " must equal width " << latents;
    throw ConfigError(msg.str());
  }
}

SaeParams::SaeParams(Index dims, Index latents, Activation activation, bool tied,
                     std::optional<MatryoshkaSpec> matryoshka)
    : w_dec_(Matrix::Zero(latents, dims)),
      b_enc_(Vector::Zero(latents)),
      b_dec_(Vector::Zero(dims)),
      activation_(activation),
      tied_(tied) {
  if (dims <= 0 || latents <= 0) throw DimensionError("SaeParams: dims and width must be positive");
  if (activation.is_topk_family() && (activation.k < 1 || activation.k > latents)) {
    throw DimensionError("SaeParams: TopK requires 1 <= k <= width");
  }
  if (!tied) w_enc_ = Matrix::Zero(latents, dims);
  set_matryoshka(std::move(matryoshka));
}

void SaeParams::set_matryoshka(std::optional<MatryoshkaSpec> spec) {
  if (spec) spec->validate(latents());
  matryoshka_ = std::move(spec);
}

bool SaeParams::operator==(const SaeParams& other) const {
  auto same = [](const auto& a, const auto& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
  };
  return tied_ == other.tied_ && activation_ == other.activation_ &&
         matryoshka_ == other.matryoshka_ && same(w_enc_, other.w_enc_) &&
         same(w_dec_, other.w_dec_) && same(b_enc_, other.b_enc_) && same(b_dec_, other.b_dec_);
}

namespace {

Matrix random_rows(Index rows, Index dims, double norm, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, dims);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < dims; ++j) out(i, j) = normal(rng);
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) *= norm / n;
  }
  return out;
}

}  // namespace

SaeParams init_sae(Index dims, Index latents, Activation activation, bool tied,
                   std::optional<MatryoshkaSpec> matryoshka, double init_norm,
                   std::uint64_t seed) {
  SaeParams params(dims, latents, activation, tied, std::move(matryoshka));
  std::mt19937_64 rng(seed);
  params.w_dec() = random_rows(latents, dims, init_norm, rng);
  if (!tied) params.w_enc() = params.w_dec();
  return params;
}

SaeParams extend_sae(const SaeParams& params, Index new_latents, double init_norm,
                     std::uint64_t seed) {
  if (new_latents < 0) throw DimensionError("extend_sae: negative latent count");
  if (new_latents == 0) return params;
  const Index old = params.latents();
  const Index width = old + new_latents;
  std::optional<MatryoshkaSpec> spec = params.matryoshka();
  if (spec) spec->prefixes.back() = width;
  SaeParams out(params.dims(), width, params.activation(), params.tied(), spec);
  std::mt19937_64 rng(seed);
  const Matrix fresh = random_rows(new_latents, params.dims(), init_norm, rng);
  out.w_dec().topRows(old) = params.w_dec();
  out.w_dec().bottomRows(new_latents) = fresh;
  if (!params.tied()) {
    out.w_enc().topRows(old) = params.w_enc();
    out.w_enc().bottomRows(new_latents) = fresh;
  }
  out.b_enc().head(old) = params.b_enc();
  out.b_dec() = params.b_dec();
  return out;
}

void select_topk(Matrix& z, Index k) {
  std::vector<Index> order;
  for (Index r = 0; r < z.rows(); ++r) {
    order.clear();
    for (Index c = 0; c < z.cols(); ++c) {
      if (z(r, c) > 0.0) order.push_back(c);
    }
    if (static_cast<Index>(order.size()) <= k) continue;
    std::nth_element(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      return z(r, a) > z(r, b) || (z(r, a) == z(r, b) && a < b);
    });
    for (auto it = order.begin() + k; it != order.end(); ++it) z(r, *it) = 0.0;
  }
}

void select_batch_topk(Matrix& z, Index k) {
  struct Entry {
    double value;
    Index row;
    Index col;
  };
  std::vector<Entry> entries;
  for (Index r = 0; r < z.rows(); ++r) {
    for (Index c = 0; c < z.cols(); ++c) {
      if (z(r, c) > 0.0) entries.push_back({z(r, c), r, c});
    }
  }
  const auto keep = static_cast<std::size_t>(z.rows() * k);
  if (entries.size() <= keep) return;
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep),
                   entries.end(), [](const Entry& a, const Entry& b) {
                     return std::tie(b.value, a.col, a.row) < std::tie(a.value, b.col, b.row);
                   });
  for (auto it = entries.begin() + static_cast<std::ptrdiff_t>(keep); it != entries.end(); ++it) {
    z(it->row, it->col) = 0.0;
  }
}

ForwardPass forward(const SaeParams& params, const Matrix& x) {
  if (x.cols() != params.dims()) {
    std::ostringstream msg;
    msg << "forward: batch has " << x.cols() << " columns, SAE expects " << params.dims();
    throw DimensionError(msg.str());
  }
  ForwardPass fp;
  fp.centered = x.rowwise() - params.b_dec().transpose();
  fp.pre = fp.centered * params.w_enc().transpose();
  fp.pre.rowwise() += params.b_enc().transpose();
  fp.z = fp.pre.cwiseMax(0.0);
  switch (params.activation().kind) {
    case ActivationKind::kReLU: break;
    case ActivationKind::kTopK: select_topk(fp.z, params.activation().k); break;
    case ActivationKind::kBatchTopK: select_batch_topk(fp.z, params.activation().k); break;
  }
  fp.xhat = fp.z * params.w_dec();
  fp.xhat.rowwise() += params.b_dec().transpose();
  return fp;
}

std::vector<Level> loss_levels(const SaeParams& params) {
  std::vector<Level> levels;
  if (const auto& spec = params.matryoshka()) {
    for (std::size_t i = 0; i < spec->prefixes.size(); ++i) {
      levels.push_back({spec->prefixes[i], spec->betas[i]});
    }
  } else {
    levels.push_back({params.latents(), 1.0});
  }
  return levels;
}

Vector sparsity_weights(const SaeParams& params, SparsityPenalty penalty) {
  if (penalty == SparsityPenalty::kPlainL1) return Vector::Ones(params.latents());
  return params.w_dec().rowwise().norm();
}

Matrix aux_activations(const Matrix& pre, const AuxInputs& aux) {
  Matrix za = Matrix::Zero(pre.rows(), pre.cols());
  for (Index c = 0; c < pre.cols(); ++c) {
    if (aux.dead[static_cast<std::size_t>(c)]) za.col(c) = pre.col(c).cwiseMax(0.0);
  }
  select_topk(za, aux.k_aux);
  return za;
}

double aux_loss(const SaeParams& params, const Matrix& pre, const Matrix& residual,
                const AuxInputs& aux) {
  if (aux.k_aux <= 0 || std::none_of(aux.dead.begin(), aux.dead.end(), [](bool d) { return d; })) {
    return 0.0;
  }
  const Matrix za = aux_activations(pre, aux);
  const Matrix diff = za * params.w_dec() - residual;
  return diff.rowwise().squaredNorm().mean();
}

LossBreakdown compute_loss(const SaeParams& params, const Matrix& x, const LossOptions& options,
                           const AuxInputs* aux) {
  if (options.l1 < 0.0 || options.aux_coeff < 0.0) {
    throw std::invalid_argument("compute_loss: coefficients must be non-negative");
  }
  const ForwardPass fp = forward(params, x);
  const bool sparse_penalty = !params.activation().is_topk_family();
  const Vector weights = sparsity_weights(params, options.sparsity);
  const double batch = static_cast<double>(x.rows());

  LossBreakdown out;
  Matrix recon = Matrix::Zero(x.rows(), x.cols());
  recon.rowwise() += params.b_dec().transpose();
  double sparsity = 0.0;
  Index done = 0;
  for (const Level& level : loss_levels(params)) {
    const Index width = level.prefix - done;
    recon += fp.z.middleCols(done, width) * params.w_dec().middleRows(done, width);
    if (sparse_penalty) sparsity += (fp.z.middleCols(done, width) * weights.segment(done, width)).sum() / batch;
    done = level.prefix;
    const double mse = (x - recon).rowwise().squaredNorm().mean();
    out.mse.push_back(mse);
    out.sparsity.push_back(sparsity);
    out.total += level.beta * (mse + options.l1 * sparsity);
  }
  if (aux != nullptr && options.aux_coeff > 0.0) {
    out.aux = aux_loss(params, fp.pre, x - fp.xhat, *aux);
    out.total += options.aux_coeff * out.aux;
  }
  out.l0 = static_cast<double>((fp.z.array() > 0.0).count()) / batch;
  return out;
}

}  // namespace saelab
