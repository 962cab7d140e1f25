#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rm {

/// Dense row-major matrix. Every model quantity is a matrix whose rows are
/// items (tokens, slots, samples) and whose columns are feature dimensions.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Named float tensor as it appears in checkpoints: an explicit shape and the
/// row-major payload. Rank-1 tensors are stored as a single row.
struct Tensor {
  std::vector<std::int64_t> shape;
  Matrix<float> data;

  Tensor() = default;
  explicit Tensor(Matrix<float> m) : shape{m.rows(), m.cols()}, data(std::move(m)) {}
  Tensor(std::vector<std::int64_t> s, Matrix<float> m) : shape(std::move(s)), data(std::move(m)) { validate(); }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }

  void validate() const {
    for (auto e : shape)
      if (e <= 0) throw ShapeError("tensor extents must be positive");
    if (numel() != data.size()) throw ShapeError("tensor data length does not match its shape");
  }
};

std::string shape_string(Index rows, Index cols);

template <typename Scalar>
std::string shape_string(const Matrix<Scalar>& m) {
  return shape_string(m.rows(), m.cols());
}

}  // namespace rm
