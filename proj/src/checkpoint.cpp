#include "afseg/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "afseg/npy.hpp"

namespace afseg {

namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

TensorD read_expected(const fs::path& path, const Shape& shape) {
  TensorD t = npy::read<double>(path.string());
  if (t.shape() != shape)
    throw InvalidInput(path.string() + ": shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
  return t;
}

}  // namespace

void save_checkpoint(const std::string& dir, const RunConfig& cfg, const episodic::Params& params) {
  const fs::path root(dir);
  fs::create_directories(root / "params");
  fs::create_directories(root / "bn");
  const ToyEncoder encoder(cfg.encoder_config());
  const auto lka = cfg.decoder_config().lka();

  nlohmann::json manifest;
  manifest["format"] = "afseg-checkpoint";
  manifest["version"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["config"] = cfg.to_json();
  manifest["encoder"] = {{"seed", encoder.config().seed},
                         {"channels", encoder.config().channels},
                         {"checksum", hex64(encoder.checksum())}};
  manifest["lka"] = {{"K", lka.target}, {"d", lka.dilation}, {"dw_kernel", lka.dw_kernel}, {"dwd_kernel", lka.dwd_kernel}};
  manifest["parameters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    const std::string file = "params/" + params.names[i] + ".npy";
    npy::write((root / file).string(), params.values[i]);
    manifest["parameters"].push_back({{"name", params.names[i]}, {"file", file}, {"shape", params.values[i].shape()}});
  }
  manifest["batchnorm"] = nlohmann::json::array();
  for (const auto& [name, st] : params.bn) {
    const std::string mean = "bn/" + name + ".mean.npy", var = "bn/" + name + ".var.npy";
    npy::write((root / mean).string(), st.running_mean);
    npy::write((root / var).string(), st.running_var);
    manifest["batchnorm"].push_back(
        {{"name", name}, {"channels", st.channels()}, {"initialized", st.initialized}, {"mean", mean}, {"var", var}});
  }
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw InvalidInput("no checkpoint manifest in " + dir);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(dir + "/manifest.json: " + e.what());
  }
  if (m.value("format", "") != "afseg-checkpoint" || m.value("version", 0) != 1)
    throw InvalidInput(dir + ": not a version 1 afseg checkpoint");

  Checkpoint ck{RunConfig::from_json(m.at("config")), {}};
  const ToyEncoder encoder(ck.config.encoder_config());
  if (m.at("encoder").value("checksum", "") != hex64(encoder.checksum()))
    throw InvalidInput(dir + ": encoder checksum does not match the rebuilt encoder");

  ck.params = decoder::init_decoder<double>(ck.config.decoder_config(), 0);
  const auto& entries = m.at("parameters");
  if (entries.size() != ck.params.names.size())
    throw InvalidInput(dir + ": parameter table has " + std::to_string(entries.size()) + " entries, expected " +
                       std::to_string(ck.params.names.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].at("name") != ck.params.names[i])
      throw InvalidInput(dir + ": parameter " + std::to_string(i) + " should be " + ck.params.names[i]);
    ck.params.values[i] = read_expected(root / entries[i].at("file").get<std::string>(), ck.params.values[i].shape());
  }
  for (const auto& e : m.at("batchnorm")) {
    auto it = ck.params.bn.find(e.at("name").get<std::string>());
    if (it == ck.params.bn.end()) throw InvalidInput(dir + ": unknown batch-norm layer " + e.at("name").dump());
    auto& st = it->second;
    st.running_mean = read_expected(root / e.at("mean").get<std::string>(), st.running_mean.shape());
    st.running_var = read_expected(root / e.at("var").get<std::string>(), st.running_var.shape());
    st.initialized = e.at("initialized").get<bool>();
  }
  return ck;
}

}  // namespace afseg
