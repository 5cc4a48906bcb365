#pragma once

// Frozen random convolutional encoder standing in for a pretrained backbone.
//
// Stage 1 is two 3x3 stride-2 convolutions (/4); stages 2-4 are one 3x3 stride-2
// convolution each (/8, /16, /32). Each stage's pre-activation output is a
// pyramid level; the next stage consumes its ReLU.

#include <cstdint>
#include <vector>

#include "afseg/tensor.hpp"

namespace afseg {

struct EncoderConfig {
  std::vector<Index> channels{16, 24, 32, 32};
  std::uint64_t seed = 0;
  bool bias = false;
};

class ToyEncoder {
 public:
  static constexpr Index kStride = 32;

  explicit ToyEncoder(EncoderConfig cfg);

  /// image (1, 3, H, W) with H, W divisible by 32 -> four levels, shallow to deep.
  std::vector<TensorD> encode(const TensorD& image) const;

  const EncoderConfig& config() const { return cfg_; }
  /// Order-sensitive hash of every weight bit.
  std::uint64_t checksum() const;

 private:
  EncoderConfig cfg_;
  std::vector<TensorD> weights_, biases_;
};

}  // namespace afseg
