#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmbpo {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Raised when an argument violates a documented precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numerical routine produces a non-finite or inaccurate result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a routine does not have enough data (or state) to proceed.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline std::vector<double> to_std(const Vector& v) {
  return {v.data(), v.data() + v.size()};
}

/// Column-wise stack of equally sized vectors.
inline Matrix stack_columns(const std::vector<Vector>& cols) {
  if (cols.empty()) return {};
  Matrix out(cols.front().size(), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Index>(i)) = cols[i];
  return out;
}

}  // namespace cmbpo
