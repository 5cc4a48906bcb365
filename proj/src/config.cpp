#include "afseg/config.hpp"

#include <fstream>
#include <set>

#include "afseg/rng.hpp"

namespace afseg {

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) throw InvalidInput("threads must be >= 1");
  if (encoder_channels.size() != std::size_t(decoder::kLevels))
    throw InvalidInput("encoder_channels must list " + std::to_string(decoder::kLevels) + " levels");
  if (affinity_grid < 2) throw InvalidInput("affinity_grid must be >= 2");
  if (n_eigenvectors < 2) throw InvalidInput("n_eigenvectors must be >= 2");
  if (k_shot < 1) throw InvalidInput("k_shot must be >= 1");
  if (episodes < 1) throw InvalidInput("episodes must be >= 1");
  if (!(learning_rate >= 0)) throw InvalidInput("learning_rate must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1))
    throw InvalidInput("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw InvalidInput("adam_eps must be > 0");
  if (heldout_every < 0) throw InvalidInput("heldout_every must be >= 0");
  spectral::laplacian_mode_from_string(laplacian_mode);
  decoder_config().validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"threads", threads},
          {"encoder_channels", encoder_channels},
          {"lka_kernel", lka_kernel},
          {"lka_dilation", lka_dilation},
          {"atrous_rates", atrous_rates},
          {"gate_channels", gate_channels},
          {"per_channel_gate", per_channel_gate},
          {"fusion_kernel", fusion_kernel},
          {"use_clka", use_clka},
          {"use_msag", use_msag},
          {"bn_momentum", bn_momentum},
          {"bn_eps", bn_eps},
          {"affinity_grid", affinity_grid},
          {"laplacian_mode", laplacian_mode},
          {"n_eigenvectors", n_eigenvectors},
          {"k_shot", k_shot},
          {"annotation_free", annotation_free},
          {"episodes", episodes},
          {"learning_rate", learning_rate},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"heldout_every", heldout_every}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("config must be a JSON object");
  RunConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw InvalidInput("unknown config key '" + key + "'");
  read_field(j, "seed", c.seed);
  read_field(j, "threads", c.threads);
  read_field(j, "encoder_channels", c.encoder_channels);
  read_field(j, "lka_kernel", c.lka_kernel);
  read_field(j, "lka_dilation", c.lka_dilation);
  read_field(j, "atrous_rates", c.atrous_rates);
  read_field(j, "gate_channels", c.gate_channels);
  read_field(j, "per_channel_gate", c.per_channel_gate);
  read_field(j, "fusion_kernel", c.fusion_kernel);
  read_field(j, "use_clka", c.use_clka);
  read_field(j, "use_msag", c.use_msag);
  read_field(j, "bn_momentum", c.bn_momentum);
  read_field(j, "bn_eps", c.bn_eps);
  read_field(j, "affinity_grid", c.affinity_grid);
  read_field(j, "laplacian_mode", c.laplacian_mode);
  read_field(j, "n_eigenvectors", c.n_eigenvectors);
  read_field(j, "k_shot", c.k_shot);
  read_field(j, "annotation_free", c.annotation_free);
  read_field(j, "episodes", c.episodes);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "adam_beta1", c.adam_beta1);
  read_field(j, "adam_beta2", c.adam_beta2);
  read_field(j, "adam_eps", c.adam_eps);
  read_field(j, "heldout_every", c.heldout_every);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(path + ": " + e.what());
  }
  return from_json(j);
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.channels = encoder_channels;
  e.seed = derive_seed(seed, "encoder");
  return e;
}

decoder::DecoderConfig RunConfig::decoder_config() const {
  decoder::DecoderConfig d;
  d.level_channels = encoder_channels;
  d.lka_kernel = lka_kernel;
  d.lka_dilation = lka_dilation;
  d.atrous_rates = atrous_rates;
  d.gate_channels = gate_channels;
  d.per_channel_gate = per_channel_gate;
  d.fusion_kernel = fusion_kernel;
  d.use_clka = use_clka;
  d.use_msag = use_msag;
  d.bn.momentum = bn_momentum;
  d.bn.eps = bn_eps;
  return d;
}

spectral::SpectralOptions RunConfig::spectral_options() const {
  spectral::SpectralOptions s;
  s.grid_h = s.grid_w = affinity_grid;
  s.mode = spectral::laplacian_mode_from_string(laplacian_mode);
  s.n_vectors = n_eigenvectors;
  return s;
}

episodic::SupportMode RunConfig::support_mode() const {
  return annotation_free ? episodic::SupportMode::AnnotationFree : episodic::SupportMode::OracleMask;
}

episodic::TrainConfig RunConfig::train_config() const {
  episodic::TrainConfig t;
  t.episodes = episodes;
  t.adam = {learning_rate, adam_beta1, adam_beta2, adam_eps};
  t.seed = seed;
  t.mode = support_mode();
  t.k_shot = k_shot;
  t.heldout_every = heldout_every;
  return t;
}

}  // namespace afseg
