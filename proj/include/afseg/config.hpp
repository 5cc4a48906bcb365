#pragma once

// Run configuration shared by train-toy, infer and eval. Every field has a
// default; JSON input may set any subset, unknown keys are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include "afseg/decoder.hpp"
#include "afseg/encoder.hpp"
#include "afseg/episodic.hpp"
#include "afseg/spectral.hpp"
#include "json.hpp"

namespace afseg {

struct RunConfig {
  std::uint64_t seed = 0;
  Index threads = 1;

  std::vector<Index> encoder_channels{16, 24, 32, 32};

  Index lka_kernel = 21;
  Index lka_dilation = 3;
  std::vector<Index> atrous_rates{1, 2, 3};
  Index gate_channels = 8;
  bool per_channel_gate = false;
  Index fusion_kernel = 3;
  bool use_clka = true;
  bool use_msag = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  Index affinity_grid = 16;
  std::string laplacian_mode = "sym";
  Index n_eigenvectors = 5;

  Index k_shot = 1;
  bool annotation_free = true;
  Index episodes = 500;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  Index heldout_every = 100;

  void validate() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);

  EncoderConfig encoder_config() const;
  decoder::DecoderConfig decoder_config() const;
  spectral::SpectralOptions spectral_options() const;
  episodic::SupportMode support_mode() const;
  episodic::TrainConfig train_config() const;
};

}  // namespace afseg
