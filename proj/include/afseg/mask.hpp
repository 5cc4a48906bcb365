#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "afseg/tensor.hpp"

namespace afseg {

/// Binary mask, one byte per pixel (0 or 1), row-major (height x width).
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Inclusive, axis-aligned pixel box.
struct BBox {
  Index row_min = 0, row_max = 0, col_min = 0, col_max = 0;

  Index height() const { return row_max - row_min + 1; }
  Index width() const { return col_max - col_min + 1; }
  bool contains(Index r, Index c) const { return r >= row_min && r <= row_max && c >= col_min && c <= col_max; }
  bool operator==(const BBox&) const = default;
};

/// Tight bounding box of the nonzero pixels. Throws on an empty mask.
inline BBox mask_bbox(const Mask& mask) {
  BBox box{mask.rows(), -1, mask.cols(), -1};
  for (Index r = 0; r < mask.rows(); ++r)
    for (Index c = 0; c < mask.cols(); ++c)
      if (mask(r, c)) {
        box.row_min = std::min(box.row_min, r);
        box.row_max = std::max(box.row_max, r);
        box.col_min = std::min(box.col_min, c);
        box.col_max = std::max(box.col_max, c);
      }
  if (box.row_max < 0) throw InvalidInput("bounding box of an empty mask");
  return box;
}

template <typename Scalar>
Tensor<Scalar> mask_to_tensor(const Mask& mask) {
  Tensor<Scalar> t(Shape{1, 1, mask.rows(), mask.cols()});
  for (Index r = 0; r < mask.rows(); ++r)
    for (Index c = 0; c < mask.cols(); ++c) t[r * mask.cols() + c] = mask(r, c) ? Scalar(1) : Scalar(0);
  return t;
}

}  // namespace afseg
