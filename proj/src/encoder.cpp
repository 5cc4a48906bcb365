#include "afseg/encoder.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "afseg/kernels.hpp"

namespace afseg {

ToyEncoder::ToyEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.channels.size() != 4) throw InvalidInput("toy encoder needs exactly 4 channel counts");
  for (Index c : cfg_.channels)
    if (c < 1) throw InvalidInput("toy encoder channel counts must be positive");
  std::mt19937_64 rng(cfg_.seed);
  std::normal_distribution<double> n01;
  std::vector<std::pair<Index, Index>> io{{3, cfg_.channels[0]}, {cfg_.channels[0], cfg_.channels[0]}};
  for (std::size_t l = 1; l < 4; ++l) io.emplace_back(cfg_.channels[l - 1], cfg_.channels[l]);
  for (auto [cin, cout] : io) {
    TensorD w(Shape{cout, cin, 3, 3});
    const double stddev = std::sqrt(2.0 / double(cin * 9));
    for (Index i = 0; i < w.size(); ++i) w[i] = stddev * n01(rng);
    TensorD b(Shape{cout});
    if (cfg_.bias)
      for (Index i = 0; i < b.size(); ++i) b[i] = 0.1 * n01(rng);
    weights_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
}

std::vector<TensorD> ToyEncoder::encode(const TensorD& image) const {
  require_rank(image, 4, "encoder input");
  if (image.dim(0) != 1 || image.dim(1) != 3)
    throw InvalidInput("encoder expects a (1,3,H,W) image, got " + shape_str(image.shape()));
  if (image.dim(2) % kStride != 0 || image.dim(3) % kStride != 0)
    throw InvalidInput("encoder input " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                       " is not divisible by 32");
  const ConvSpec down{3, 3, 2, 1, 1, 1};
  auto conv = [&](const TensorD& x, std::size_t i) {
    return conv2d(x, weights_[i], cfg_.bias ? &biases_[i] : nullptr, down);
  };
  std::vector<TensorD> levels;
  levels.push_back(conv(relu(conv(image, 0)), 1));
  for (std::size_t s = 2; s < weights_.size(); ++s) levels.push_back(conv(relu(levels.back()), s));
  return levels;
}

std::uint64_t ToyEncoder::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const TensorD& t) {
    for (Index i = 0; i < t.size(); ++i) {
      std::uint64_t bits;
      const double v = t[i];
      std::memcpy(&bits, &v, 8);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  };
  for (const auto& w : weights_) mix(w);
  for (const auto& b : biases_) mix(b);
  return h;
}

}  // namespace afseg
