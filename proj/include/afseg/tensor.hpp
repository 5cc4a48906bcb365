#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "afseg/errors.hpp"

namespace afseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major N-d array. Image tensors use (batch, channel, height, width).
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{1}, data_(Storage::Zero(1)) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Storage::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_size(shape_) != data_.size())
      throw InvalidInput("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), Index(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return Index(shape_.size()); }
  Index dim(Index i) const { return shape_.at(std::size_t(i)); }
  Index size() const { return data_.size(); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // 4-d accessors (B, C, H, W).
  Scalar& operator()(Index b, Index c, Index y, Index x) { return data_[offset4(b, c, y, x)]; }
  Scalar operator()(Index b, Index c, Index y, Index x) const { return data_[offset4(b, c, y, x)]; }

  Scalar item() const {
    if (size() != 1) throw InvalidInput("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw InvalidInput("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && (data_ == o.data_).all();
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw InvalidInput("tensor shape must have at least one dimension");
    for (Index d : shape)
      if (d < 1) throw InvalidInput("tensor dimension sizes must be >= 1, got " + shape_str(shape));
  }

  Index offset4(Index b, Index c, Index y, Index x) const {
    return ((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank)
    throw InvalidInput(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                       shape_str(t.shape()));
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw InvalidInput("max_abs_diff: shape mismatch");
  return (a.array() - b.array()).abs().maxCoeff();
}

/// Tile a per-channel vector into a (1, C, H, W) plane.
template <typename Scalar>
Tensor<Scalar> tile_plane(const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& v, Index h, Index w) {
  Tensor<Scalar> out(Shape{1, v.size(), h, w});
  for (Index c = 0; c < v.size(); ++c) out.array().segment(c * h * w, h * w).setConstant(v[c]);
  return out;
}

}  // namespace afseg
