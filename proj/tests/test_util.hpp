#pragma once

#include <random>

#include "afseg/tensor.hpp"

namespace afseg::testing {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(n(rng));
  return t;
}

template <typename Scalar = double>
Tensor<Scalar> random_uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(u(rng));
  return t;
}

}  // namespace afseg::testing
