#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace watchped {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXdR = RowMajorMatrix<double>;
using VectorXd = Eigen::VectorXd;

/// Thrown when tensor shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Dense n-dimensional array stored row-major in an Eigen column vector.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Storage::Zero(shape_numel(shape_));
  }

  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor from(Shape shape, std::initializer_list<Scalar> values) {
    Storage data(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data[i++] = v;
    return BasicTensor(std::move(shape), std::move(data));
  }

  static BasicTensor vector(const Storage& values) { return BasicTensor({values.size()}, values); }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// Row-major 2-D view; requires rank 2.
  Eigen::Map<RowMajorMatrix<Scalar>> matrix() {
    require_rank(2);
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const RowMajorMatrix<Scalar>> matrix() const {
    require_rank(2);
    return {data_.data(), shape_[0], shape_[1]};
  }

  /// View as [rows, size/rows] regardless of rank.
  Eigen::Map<const RowMajorMatrix<Scalar>> as_matrix(Index rows) const {
    return {data_.data(), rows, data_.size() / rows};
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  void require_rank(std::size_t r) const {
    if (shape_.size() != r) {
      throw ShapeError("expected rank " + std::to_string(r) + " tensor, got " + shape_string(shape_));
    }
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + shape_string(shape_));
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;
using ByteTensor = BasicTensor<std::uint8_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

}  // namespace watchped
