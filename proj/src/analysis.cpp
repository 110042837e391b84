#include "saelab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace saelab {

std::string to_string(LatentLabel label) {
  switch (label) {
    case LatentLabel::kMonosemantic: return "monosemantic";
    case LatentLabel::kHedged: return "hedged";
    case LatentLabel::kAbsorbed: return "absorbed";
    case LatentLabel::kDead: return "dead";
  }
  return "unknown";
}

namespace {

// Hungarian algorithm (potentials form) for a rows <= cols cost matrix,
// minimizing total cost. Returns the column assigned to each row.
std::vector<Index> hungarian_min(const Matrix& cost) {
  const Index n = cost.rows();
  const Index m = cost.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<Index> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  auto at = [](auto& vec, Index i) -> auto& { return vec[static_cast<std::size_t>(i)]; };
  for (Index i = 1; i <= n; ++i) {
    at(p, 0) = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(m + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const Index i0 = at(p, j0);
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - at(u, i0) - at(v, j);
        if (cur < at(minv, j)) {
          at(minv, j) = cur;
          at(way, j) = j0;
        }
        if (at(minv, j) < delta) {
          delta = at(minv, j);
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          at(u, at(p, j)) += delta;
          at(v, j) -= delta;
        } else {
          at(minv, j) -= delta;
        }
      }
      j0 = j1;
    } while (at(p, j0) != 0);
    do {
      const Index j1 = at(way, j0);
      at(p, j0) = at(p, j1);
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> assignment(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= m; ++j) {
    if (at(p, j) != 0) assignment[static_cast<std::size_t>(at(p, j) - 1)] = j - 1;
  }
  return assignment;
}

Matrix row_cosines(const Matrix& rows, const Matrix& features) {
  Matrix out = Matrix::Zero(rows.rows(), features.rows());
  for (Index i = 0; i < rows.rows(); ++i) {
    const double n = rows.row(i).norm();
    if (n == 0.0) continue;
    out.row(i) = (features * rows.row(i).transpose()).transpose() / n;
  }
  return out;
}

}  // namespace

std::vector<Index> max_weight_matching(const Matrix& weights) {
  if (weights.rows() == 0 || weights.cols() == 0) {
    return std::vector<Index>(static_cast<std::size_t>(weights.rows()), -1);
  }
  if (weights.rows() <= weights.cols()) return hungarian_min(-weights);
  const std::vector<Index> by_col = hungarian_min(-weights.transpose());
  std::vector<Index> out(static_cast<std::size_t>(weights.rows()), -1);
  for (std::size_t c = 0; c < by_col.size(); ++c) {
    if (by_col[c] >= 0) out[static_cast<std::size_t>(by_col[c])] = static_cast<Index>(c);
  }
  return out;
}

Index AlignmentReport::target_feature(Index latent) const {
  const Index matched = matching[static_cast<std::size_t>(latent)];
  if (matched >= 0) return matched;
  Index best = 0;
  decoder_cos.row(latent).cwiseAbs().maxCoeff(&best);
  return best;
}

double AlignmentReport::max_off_target() const {
  double worst = 0.0;
  for (Index i = 0; i < latents(); ++i) {
    if (zero_row[static_cast<std::size_t>(i)]) continue;
    const Index t = target_feature(i);
    for (Index j = 0; j < features(); ++j) {
      if (j == t) continue;
      worst = std::max({worst, std::abs(encoder_cos(i, j)), std::abs(decoder_cos(i, j))});
    }
  }
  return worst;
}

AlignmentReport alignment(const SaeParams& params, const FeatureBasis& basis,
                          const ClassifyThresholds& thresholds) {
  if (basis.dims() != params.dims()) {
    throw DimensionError("alignment: basis dims " + std::to_string(basis.dims()) +
                         " != SAE dims " + std::to_string(params.dims()));
  }
  AlignmentReport report;
  report.encoder_cos = row_cosines(params.w_enc(), basis.features);
  report.decoder_cos = row_cosines(params.w_dec(), basis.features);
  report.zero_row.resize(static_cast<std::size_t>(params.latents()));
  for (Index i = 0; i < params.latents(); ++i) {
    report.zero_row[static_cast<std::size_t>(i)] = params.w_dec().row(i).isZero(0.0);
  }
  report.matching = max_weight_matching(report.decoder_cos.cwiseAbs());
  report.bias_projection = basis.features * params.b_dec();
  report.labels = classify(report, thresholds);
  return report;
}

std::vector<LatentLabel> classify(const AlignmentReport& report,
                                  const ClassifyThresholds& thresholds) {
  const double eps = thresholds.eps;
  const double gap = thresholds.gap;
  std::vector<LatentLabel> labels;
  labels.reserve(static_cast<std::size_t>(report.latents()));
  for (Index i = 0; i < report.latents(); ++i) {
    const auto dec = report.decoder_cos.row(i);
    const auto enc = report.encoder_cos.row(i);
    const Index components = (dec.array().abs() > eps).count();
    if (report.zero_row[static_cast<std::size_t>(i)] || components == 0) {
      labels.push_back(LatentLabel::kDead);
      continue;
    }
    const Index target = report.target_feature(i);
    bool asymmetric = false;
    for (Index j = 0; j < report.features() && !asymmetric; ++j) {
      if (j == target) continue;
      const double e = enc(j);
      const double d = dec(j);
      const bool visible = std::max(std::abs(e), std::abs(d)) > eps;
      const bool opposite = e * d < 0.0;
      const bool one_sided = std::min(std::abs(e), std::abs(d)) <= eps;
      asymmetric = visible && std::abs(e - d) > gap && (opposite || one_sided);
    }
    if (asymmetric) {
      labels.push_back(LatentLabel::kAbsorbed);
    } else if (components == 1) {
      labels.push_back(LatentLabel::kMonosemantic);
    } else {
      labels.push_back(LatentLabel::kHedged);
    }
  }
  return labels;
}

double subspace_projection(const Vector& v, const Matrix& rows) {
  const Index k = rows.rows();
  if (rows.cols() != v.size()) throw DimensionError("subspace_projection: dimension mismatch");
  if (k == 0) return 0.0;
  if (k > v.size()) throw RankError("subspace_projection: more spanning rows than dimensions");
  const Eigen::MatrixXd basis = rows.transpose();  // D x k
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const double scale = std::max(1.0, r.diagonal().cwiseAbs().maxCoeff());
  for (Index i = 0; i < k; ++i) {
    if (std::abs(r(i, i)) <= 1e-10 * scale) {
      throw RankError("subspace_projection: spanning rows are linearly dependent");
    }
  }
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(v.size(), k);
  return (q.transpose() * v).norm();
}

namespace {

Matrix unit_rows(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

}  // namespace

HedgingDegreeReport hedging_degree(const SaeParams& base, const SaeParams& extended,
                                   Index original, Index new_latents, std::uint64_t seed,
                                   Index random_draws) {
  if (base.latents() != original || extended.latents() != original + new_latents ||
      base.dims() != extended.dims()) {
    std::ostringstream msg;
    msg << "hedging_degree: expected widths " << original << " and " << original + new_latents
        << ", got " << base.latents() << " and " << extended.latents();
    throw DimensionError(msg.str());
  }
  if (random_draws < 1) throw std::invalid_argument("hedging_degree: random_draws must be >= 1");
  const Matrix w0 = unit_rows(base.w_dec());
  const Matrix w1 = unit_rows(extended.w_dec());
  const Matrix delta = w1.topRows(original) - w0;
  const Matrix added = w1.bottomRows(new_latents);

  HedgingDegreeReport report;
  report.new_latents = new_latents;
  report.seed = seed;
  report.random_draws = random_draws;
  report.new_projection.resize(original);
  report.random_projection = Vector::Zero(original);
  for (Index i = 0; i < original; ++i) {
    report.new_projection(i) = subspace_projection(delta.row(i).transpose(), added);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index draw = 0; draw < random_draws; ++draw) {
    Matrix random(new_latents, base.dims());
    for (Index r = 0; r < random.rows(); ++r) {
      for (Index c = 0; c < random.cols(); ++c) random(r, c) = normal(rng);
    }
    random = unit_rows(random);
    for (Index i = 0; i < original; ++i) {
      report.random_projection(i) += subspace_projection(delta.row(i).transpose(), random);
    }
  }
  report.random_projection /= static_cast<double>(random_draws);
  report.h = report.new_projection.mean() - report.random_projection.mean();
  return report;
}

LossCurve loss_curve(double p_parent_alone, double p_both, double l1,
                     const std::vector<double>& grid) {
  if (p_parent_alone < 0.0 || p_both < 0.0 || p_parent_alone + p_both > 1.0 + 1e-12) {
    throw std::invalid_argument("loss_curve: probabilities must be >= 0 and sum to <= 1");
  }
  if (grid.empty()) throw std::invalid_argument("loss_curve: empty grid");
  LossCurve curve;
  curve.min_total = std::numeric_limits<double>::infinity();
  // Coordinates in the orthonormal (f1, f2) plane.
  const Eigen::Vector2d parent(1.0, 0.0);
  const Eigen::Vector2d both(1.0, 1.0);
  for (double alpha : grid) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("loss_curve: grid outside [0, 1]");
    const Eigen::Vector2d latent = Eigen::Vector2d(1.0 - alpha, alpha).normalized();
    auto case_loss = [&](const Eigen::Vector2d& x, double& mse, double& act) {
      act = std::max(0.0, latent.dot(x));
      mse = (x - act * latent).squaredNorm();
    };
    double mse_a = 0.0, z_a = 0.0, mse_b = 0.0, z_b = 0.0;
    case_loss(parent, mse_a, z_a);
    case_loss(both, mse_b, z_b);
    LossCurvePoint pt;
    pt.alpha = alpha;
    pt.mse = p_parent_alone * mse_a + p_both * mse_b;
    pt.l1 = l1 * (p_parent_alone * z_a + p_both * z_b);
    pt.total = pt.mse + pt.l1;
    if (pt.total < curve.min_total) {
      curve.min_total = pt.total;
      curve.argmin_alpha = alpha;
    }
    curve.points.push_back(pt);
  }
  return curve;
}

std::vector<double> unit_grid(double step) {
  if (!(step > 0.0) || step > 1.0) throw std::invalid_argument("unit_grid: step must be in (0, 1]");
  const auto n = static_cast<Index>(std::llround(1.0 / step));
  std::vector<double> grid;
  for (Index i = 0; i <= n; ++i) grid.push_back(static_cast<double>(i) / static_cast<double>(n));
  return grid;
}

namespace {

std::vector<double> ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[order[k]] = avg;
    i = j + 1;
  }
  return out;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  const std::vector<double> ra = ranks(a);
  const std::vector<double> rb = ranks(b);
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace saelab
