#pragma once

#include <cmath>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "refuel/error.hpp"

namespace refuel {

inline Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

/// Cholesky view of a symmetric positive-definite matrix. No explicit
/// inverse is ever formed.
class SpdSolver {
 public:
  explicit SpdSolver(const Eigen::MatrixXd& m, const std::string& context = "SpdSolver") : llt_(m) {
    if (!m.allFinite()) throw NumericalError(context + ": matrix has non-finite entries");
    if (llt_.info() != Eigen::Success) throw NumericalError(context + ": matrix is not positive definite");
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return llt_.solve(rhs); }

  /// x^T M^{-1} x.
  double inverse_quadratic(std::span<const double> x) const {
    const Eigen::VectorXd v = as_vector(x);
    return std::max(0.0, v.dot(llt_.solve(v)));
  }

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// M += c * x x^T.
inline void add_outer(Eigen::MatrixXd& m, std::span<const double> x, double c = 1.0) {
  const Eigen::VectorXd v = as_vector(x);
  m.noalias() += c * v * v.transpose();
}

}  // namespace refuel
