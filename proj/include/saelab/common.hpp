#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace saelab {

// Row-major so that "row i" is always a latent or a feature direction.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using BitMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FeasibilityError : public std::domain_error {
 public:
  FeasibilityError(const std::string& what, double rho_min, double rho_max)
      : std::domain_error(what), rho_min_(rho_min), rho_max_(rho_max) {}
  double rho_min() const noexcept { return rho_min_; }
  double rho_max() const noexcept { return rho_max_; }

 private:
  double rho_min_;
  double rho_max_;
};

class RankError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an activation stream runs out before the sample budget is spent.
class TruncationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace saelab
