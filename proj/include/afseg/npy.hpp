#pragma once

// NPY version 1.0 reader and writer for little-endian float32/float64 arrays in
// C order.
//
//   bytes 0-5   \x93NUMPY
//   bytes 6-7   major 1, minor 0
//   bytes 8-9   header length, uint16 little-endian
//   header      Python dict literal {'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }
//               padded with spaces and a final '\n' so the payload starts on a 64-byte boundary
//   payload     raw values

#include <string>

#include "afseg/errors.hpp"
#include "afseg/tensor.hpp"

namespace afseg::npy {

class NpyError : public InvalidInput {
 public:
  enum class Kind { Io, BadMagic, BadHeader, UnsupportedDtype, Truncated };
  NpyError(Kind kind, const std::string& what) : InvalidInput(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class Dtype { F32, F64 };

struct Array {
  Shape shape;
  Dtype dtype = Dtype::F64;
  TensorD data;  // values widened to double
};

Array read_array(const std::string& path);
Array parse(const std::string& bytes, const std::string& origin = "<memory>");

/// Reads any accepted dtype into the requested scalar type.
template <typename Scalar>
Tensor<Scalar> read(const std::string& path) {
  return read_array(path).data.template cast<Scalar>();
}

std::string serialize(const TensorD& t, Dtype dtype);
void write(const std::string& path, const TensorD& t, Dtype dtype = Dtype::F64);
inline void write(const std::string& path, const TensorF& t) { write(path, t.cast<double>(), Dtype::F32); }

}  // namespace afseg::npy
