#include "saelab/feature_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace saelab {

FeatureBasis make_basis(Index dims, Index count, std::uint64_t seed, bool axis_aligned) {
  if (dims <= 0 || count <= 0) {
    throw DimensionError("make_basis: dims and count must be positive");
  }
  if (count > dims) {
    std::ostringstream msg;
    msg << "make_basis: cannot fit " << count << " orthogonal features in " << dims << " dims";
    throw DimensionError(msg.str());
  }
  FeatureBasis basis;
  if (axis_aligned) {
    basis.features = Matrix::Identity(count, dims);
    return basis;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd draws(dims, count);
  for (Index j = 0; j < count; ++j) {
    for (Index i = 0; i < dims; ++i) draws(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(draws);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dims, count);
  // Flip signs so each feature keeps a positive overlap with its Gaussian draw.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(count).triangularView<Eigen::Upper>();
  for (Index j = 0; j < count; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  basis.features = q.transpose();
  return basis;
}

std::pair<double, double> correlation_bounds(double p1, double p2) {
  const double sd = std::sqrt(p1 * (1 - p1) * p2 * (1 - p2));
  if (sd == 0.0) return {-1.0, 1.0};
  const double lo = std::max(0.0, p1 + p2 - 1.0);
  const double hi = std::min(p1, p2);
  return {std::max(-1.0, (lo - p1 * p2) / sd), std::min(1.0, (hi - p1 * p2) / sd)};
}

JointTable joint_from_correlation(double p1, double p2, double rho) {
  auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!in_unit(p1) || !in_unit(p2)) {
    throw FeasibilityError("joint_from_correlation: marginals must lie in [0, 1]", 0.0, 0.0);
  }
  const auto [rho_lo, rho_hi] = correlation_bounds(p1, p2);
  const double sd = std::sqrt(p1 * (1 - p1) * p2 * (1 - p2));
  const double p11 = p1 * p2 + rho * sd;
  const double tol = 1e-12;
  if (rho < -1.0 - tol || rho > 1.0 + tol || p11 < std::max(0.0, p1 + p2 - 1.0) - tol ||
      p11 > std::min(p1, p2) + tol) {
    std::ostringstream msg;
    msg << "correlation " << rho << " infeasible for marginals (" << p1 << ", " << p2
        << "); admissible range is [" << rho_lo << ", " << rho_hi << "]";
    throw FeasibilityError(msg.str(), rho_lo, rho_hi);
  }
  JointTable t;
  t.p11 = std::clamp(p11, 0.0, std::min(p1, p2));
  t.p10 = p1 - t.p11;
  t.p01 = p2 - t.p11;
  t.p00 = 1.0 - t.p11 - t.p10 - t.p01;
  return t;
}

FiringModel::FiringModel(std::vector<FeatureFiring> features) : features_(std::move(features)) {
  validate_and_prepare();
}

FiringModel FiringModel::independent(const std::vector<double>& probs) {
  std::vector<FeatureFiring> features;
  features.reserve(probs.size());
  for (double p : probs) features.push_back(FeatureFiring{p, std::nullopt, std::nullopt});
  return FiringModel(std::move(features));
}

void FiringModel::validate_and_prepare() {
  auto check_prob = [](double p, Index i, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) {
      std::ostringstream msg;
      msg << "feature " << i << ": " << what << " = " << p << " is not a probability";
      throw ConfigError(msg.str());
    }
  };
  marginals_.assign(features_.size(), 0.0);
  conditional_.assign(features_.size(), {0.0, 0.0});
  for (std::size_t k = 0; k < features_.size(); ++k) {
    const auto i = static_cast<Index>(k);
    const FeatureFiring& f = features_[k];
    if (f.condition && f.correlation) {
      throw ConfigError("feature " + std::to_string(i) +
                        ": at most one of condition / correlation may be set");
    }
    if (f.condition) {
      const ConditionRule& c = *f.condition;
      if (c.parent < 0 || c.parent >= i) {
        throw ConfigError("feature " + std::to_string(i) + ": parent index must precede it");
      }
      check_prob(c.prob_if_parent_on, i, "prob_if_parent_on");
      check_prob(c.prob_if_parent_off, i, "prob_if_parent_off");
      const double mp = marginals_[static_cast<std::size_t>(c.parent)];
      marginals_[k] = c.prob_if_parent_on * mp + c.prob_if_parent_off * (1.0 - mp);
    } else if (f.correlation) {
      const CorrelationRule& c = *f.correlation;
      if (c.partner < 0 || c.partner >= i) {
        throw ConfigError("feature " + std::to_string(i) + ": partner index must precede it");
      }
      check_prob(f.prob, i, "prob");
      const double mp = marginals_[static_cast<std::size_t>(c.partner)];
      const JointTable t = joint_from_correlation(mp, f.prob, c.rho);
      const double on = mp > 0.0 ? t.p11 / mp : 0.0;
      const double off = mp < 1.0 ? t.p01 / (1.0 - mp) : 0.0;
      conditional_[k] = {std::clamp(on, 0.0, 1.0), std::clamp(off, 0.0, 1.0)};
      marginals_[k] = f.prob;
    } else {
      check_prob(f.prob, i, "prob");
      marginals_[k] = f.prob;
    }
  }
}

SampleBatch sample_batch(const FeatureBasis& basis, const FiringModel& firing, Index batch_size,
                         std::mt19937_64& rng, bool keep_bits) {
  const Index n = basis.count();
  if (firing.count() != n) {
    throw DimensionError("sample_batch: firing model has " + std::to_string(firing.count()) +
                         " features, basis has " + std::to_string(n));
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix active = Matrix::Zero(batch_size, n);
  const auto& features = firing.features();
  for (Index b = 0; b < batch_size; ++b) {
    for (Index i = 0; i < n; ++i) {
      const FeatureFiring& f = features[static_cast<std::size_t>(i)];
      double p = f.prob;
      if (f.condition) {
        p = active(b, f.condition->parent) > 0.0 ? f.condition->prob_if_parent_on
                                                 : f.condition->prob_if_parent_off;
      } else if (f.correlation) {
        const auto [on, off] = firing.partner_conditionals(i);
        p = active(b, f.correlation->partner) > 0.0 ? on : off;
      }
      if (unif(rng) < p) active(b, i) = 1.0;
    }
  }
  SampleBatch batch;
  batch.x = active * basis.features;
  if (keep_bits) batch.bits = active.cast<std::uint8_t>();
  return batch;
}

}  // namespace saelab
