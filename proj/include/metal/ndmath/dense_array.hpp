#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Row-major n-dimensional array of doubles.
///
/// A rank-2 array of shape (batch, features) has the same memory layout as a
/// column-major Eigen matrix of shape (features, batch); `as_columns` exposes
/// that view without copying. All network code keeps one sample per column.
class DenseArray {
 public:
  DenseArray() = default;

  explicit DenseArray(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  DenseArray(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      std::ostringstream msg;
      msg << "DenseArray: data length " << data_.size() << " does not match shape product "
          << element_count(shape_);
      throw std::invalid_argument(msg.str());
    }
  }

  static DenseArray from_matrix(const Matrix& m) {
    // (rows, cols) column-major == (cols, rows) row-major
    DenseArray out({static_cast<std::size_t>(m.cols()), static_cast<std::size_t>(m.rows())});
    Eigen::Map<Matrix>(out.data_.data(), m.rows(), m.cols()) = m;
    return out;
  }

  static DenseArray from_vector(const Vector& v) {
    DenseArray out({static_cast<std::size_t>(v.size())});
    Eigen::Map<Vector>(out.data_.data(), v.size()) = v;
    return out;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Rank-1 or rank-2 array viewed as (last-dim × leading-dim) column-major matrix.
  Eigen::Map<const Matrix> as_columns() const {
    if (rank() == 0 || rank() > 2) throw std::invalid_argument("DenseArray: as_columns needs rank 1 or 2");
    const auto features = static_cast<Eigen::Index>(shape_.back());
    const auto samples = rank() == 2 ? static_cast<Eigen::Index>(shape_.front()) : 1;
    return {data_.data(), features, samples};
  }

  Vector to_vector() const { return Eigen::Map<const Vector>(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace metal
