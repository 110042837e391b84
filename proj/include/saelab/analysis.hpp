#pragma once

// Diagnostics comparing SAE latents to ground-truth features.

#include "saelab/feature_model.hpp"
#include "saelab/sae.hpp"

#include <string>
#include <vector>

namespace saelab {

enum class LatentLabel { kMonosemantic, kHedged, kAbsorbed, kDead };

std::string to_string(LatentLabel label);

struct ClassifyThresholds {
  double eps = 0.05;  // a decoder component counts when |cos| > eps
  double gap = 0.05;  // encoder/decoder disagreement that counts as asymmetric
};

struct AlignmentReport {
  Matrix encoder_cos;          // L x N, cos(W_enc row i, f_j)
  Matrix decoder_cos;          // L x N
  std::vector<Index> matching;  // latent -> feature, -1 when unmatched
  std::vector<bool> zero_row;  // decoder row is exactly zero
  std::vector<LatentLabel> labels;
  Vector bias_projection;  // b_dec . f_j

  Index latents() const { return decoder_cos.rows(); }
  Index features() const { return decoder_cos.cols(); }
  /// Feature a latent is judged against: its match, else its largest |cos|.
  Index target_feature(Index latent) const;
  /// Largest |cosine| between a latent and any non-target feature, over the
  /// encoder and decoder matrices.
  double max_off_target() const;
};

/// Maximum-weight assignment of rows to columns. Returns, per row, the chosen
/// column or -1 when there are more rows than columns.
std::vector<Index> max_weight_matching(const Matrix& weights);

AlignmentReport alignment(const SaeParams& params, const FeatureBasis& basis,
                          const ClassifyThresholds& thresholds = {});

/// Labels from cosine structure:
///   dead          zero decoder row or no decoder component above eps;
///   absorbed      some off-target feature where encoder and decoder differ by
///                 more than `gap` with opposite signs or one side absent;
///   monosemantic  exactly one decoder component above eps;
///   hedged        several decoder components above eps, mixed symmetrically.
std::vector<LatentLabel> classify(const AlignmentReport& report,
                                  const ClassifyThresholds& thresholds = {});

/// Norm of the orthogonal projection of v onto span(rows). Throws RankError
/// when the rows are linearly dependent.
double subspace_projection(const Vector& v, const Matrix& rows);

struct HedgingDegreeReport {
  Vector new_projection;     // per original latent
  Vector random_projection;  // per original latent, averaged over draws
  double h = 0.0;
  Index new_latents = 0;
  std::uint64_t seed = 0;
  Index random_draws = 1;
};

/// Hedging degree of an (s0', s1') pair. Decoder rows are unit-normalized;
/// the drift of the first `original` latents is projected onto the new
/// latents of s1' and onto `new_latents` random unit directions.
HedgingDegreeReport hedging_degree(const SaeParams& base, const SaeParams& extended,
                                   Index original, Index new_latents, std::uint64_t seed,
                                   Index random_draws = 1);

struct LossCurvePoint {
  double alpha = 0.0;  // interpolation-alpha: 0 is f1, 1 is f2
  double total = 0.0;
  double mse = 0.0;
  double l1 = 0.0;  // lambda-scaled
};

struct LossCurve {
  std::vector<LossCurvePoint> points;
  double argmin_alpha = 0.0;
  double min_total = 0.0;
};

/// Expected loss of a tied single-latent SAE with zero biases whose unit
/// latent interpolates between a parent f1 and a child f2. The input is f1
/// with probability `p_parent_alone`, f1 + f2 with probability `p_both` and
/// zero otherwise.
LossCurve loss_curve(double p_parent_alone, double p_both, double l1,
                     const std::vector<double>& grid);

/// 0, step, 2 step, ..., 1 (inclusive, rounded to the grid).
std::vector<double> unit_grid(double step);

/// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace saelab
