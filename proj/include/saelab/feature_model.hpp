#pragma once

// Ground-truth toy models: orthonormal feature directions plus a Bernoulli
// firing model. A sample is x = sum_i a_i f_i with a_i in {0, 1}.

#include "saelab/common.hpp"

#include <optional>
#include <random>
#include <vector>

namespace saelab {

struct FeatureBasis {
  Matrix features;  // N x D, orthonormal rows

  Index dims() const { return features.cols(); }
  Index count() const { return features.rows(); }
};

/// N orthonormal directions in R^D from QR of a Gaussian draw. `axis_aligned`
/// returns the first N coordinate axes instead (debugging only).
FeatureBasis make_basis(Index dims, Index count, std::uint64_t seed, bool axis_aligned = false);

struct JointTable {
  double p11 = 0.0;
  double p10 = 0.0;  // first on, second off
  double p01 = 0.0;
  double p00 = 0.0;
};

/// Joint distribution of two Bernoullis with marginals p1, p2 and Pearson
/// correlation rho. Throws FeasibilityError carrying the admissible rho range.
JointTable joint_from_correlation(double p1, double p2, double rho);

/// Admissible [rho_min, rho_max] for the given marginals.
std::pair<double, double> correlation_bounds(double p1, double p2);

struct ConditionRule {
  Index parent = 0;
  double prob_if_parent_on = 0.0;
  double prob_if_parent_off = 0.0;
};

struct CorrelationRule {
  Index partner = 0;
  double rho = 0.0;  // marginal comes from FeatureFiring::prob
};

struct FeatureFiring {
  double prob = 0.0;
  std::optional<ConditionRule> condition;
  std::optional<CorrelationRule> correlation;
};

class FiringModel {
 public:
  FiringModel() = default;
  explicit FiringModel(std::vector<FeatureFiring> features);

  static FiringModel independent(const std::vector<double>& probs);

  Index count() const { return static_cast<Index>(features_.size()); }
  const FeatureFiring& feature(Index i) const { return features_[static_cast<std::size_t>(i)]; }
  const std::vector<FeatureFiring>& features() const { return features_; }

  /// Analytic per-feature firing probabilities, in index order.
  const std::vector<double>& marginals() const { return marginals_; }

  /// For a correlation-rule feature: P(on | partner on), P(on | partner off).
  std::pair<double, double> partner_conditionals(Index i) const {
    return conditional_[static_cast<std::size_t>(i)];
  }

 private:
  void validate_and_prepare();

  std::vector<FeatureFiring> features_;
  std::vector<double> marginals_;
  std::vector<std::pair<double, double>> conditional_;
};

struct SampleBatch {
  Matrix x;                     // B x D
  std::optional<BitMatrix> bits;  // B x N
};

/// Draws B samples. Features are evaluated in index order so that conditioned
/// features see their parent's realized bit.
SampleBatch sample_batch(const FeatureBasis& basis, const FiringModel& firing, Index batch_size,
                         std::mt19937_64& rng, bool keep_bits = false);

}  // namespace saelab
