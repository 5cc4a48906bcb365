#include "afseg/decoder.hpp"

namespace afseg::decoder {

LKAGeometry lka_geometry(Index kernel, Index dilation) {
  if (dilation < 1) throw InvalidInput("LKA dilation must be >= 1, got " + std::to_string(dilation));
  if (kernel < 1) throw InvalidInput("LKA kernel must be >= 1, got " + std::to_string(kernel));
  LKAGeometry g;
  g.target = kernel;
  g.dilation = dilation;
  g.dw_kernel = 2 * dilation - 1;
  g.dwd_kernel = (kernel + dilation - 1) / dilation;
  if (g.dwd_kernel % 2 == 0) ++g.dwd_kernel;
  return g;
}

void DecoderConfig::validate() const {
  if (Index(level_channels.size()) != kLevels)
    throw InvalidInput("decoder needs " + std::to_string(kLevels) + " level channel counts, got " +
                       std::to_string(level_channels.size()));
  for (Index c : level_channels)
    if (c < 1) throw InvalidInput("decoder level channel counts must be positive");
  lka_geometry(lka_kernel, lka_dilation);
  if (atrous_rates.empty()) throw InvalidInput("decoder needs at least one atrous rate");
  for (Index r : atrous_rates)
    if (r < 1) throw InvalidInput("atrous rates must be >= 1");
  if (gate_channels < 1) throw InvalidInput("gate_channels must be >= 1");
  if (fusion_kernel < 1 || fusion_kernel % 2 == 0) throw InvalidInput("fusion_kernel must be odd and positive");
}

std::string level_prefix(Index level) { return "l" + std::to_string(level) + "."; }

namespace {

void add_norm(std::vector<ParamSpec>& out, const std::string& name, Index channels) {
  out.push_back({name + ".gamma", {channels}, 1, ParamSpec::Init::Ones});
  out.push_back({name + ".beta", {channels}, 1, ParamSpec::Init::Zeros});
}

void add_bias(std::vector<ParamSpec>& out, const std::string& name, Index channels) {
  out.push_back({name, {channels}, 1, ParamSpec::Init::Zeros});
}

}  // namespace

std::vector<ParamSpec> parameter_layout(const DecoderConfig& cfg) {
  cfg.validate();
  const LKAGeometry g = cfg.lka();
  const Index k = cfg.fusion_kernel, G = cfg.gate_channels;
  std::vector<ParamSpec> out;
  for (Index l = 1; l <= kLevels; ++l) {
    const std::string pre = level_prefix(l);
    const Index M = cfg.level_channels[std::size_t(l - 1)];
    out.push_back({pre + "fuse.w", {M, M, 2, k, k}, M * 2 * k * k});
    add_bias(out, pre + "fuse.b", M);
    if (cfg.use_clka) {
      out.push_back({pre + "lka.dw.w", {M, 1, g.dw_kernel, g.dw_kernel}, g.dw_kernel * g.dw_kernel,
                     ParamSpec::Init::Normal, 1.0});
      add_bias(out, pre + "lka.dw.b", M);
      out.push_back({pre + "lka.dwd.w", {M, 1, g.dwd_kernel, g.dwd_kernel}, g.dwd_kernel * g.dwd_kernel,
                     ParamSpec::Init::Normal, 1.0});
      add_bias(out, pre + "lka.dwd.b", M);
      out.push_back({pre + "lka.pw.w", {M, M, 1, 1}, M, ParamSpec::Init::Normal, 1.0});
      add_bias(out, pre + "lka.pw.b", M);
    }
    if (l == kLevels) continue;
    const Index Md = cfg.level_channels[std::size_t(l)];
    if (cfg.use_msag) {
      const Index gate_out = cfg.per_channel_gate ? Md : 1;
      out.push_back({pre + "msag.ce.w", {G, M, 1, 1}, M});
      add_norm(out, pre + "msag.bn_e", G);
      out.push_back({pre + "msag.cd.w", {G, Md, 1, 1}, Md});
      add_norm(out, pre + "msag.bn_d", G);
      const Index nr = Index(cfg.atrous_rates.size());
      for (Index r : cfg.atrous_rates)
        out.push_back({pre + "msag.at" + std::to_string(r) + ".w", {G, G, 3, 3}, G * 9 * nr});
      out.push_back({pre + "msag.c.w", {gate_out, G, 1, 1}, G, ParamSpec::Init::Normal, 1.0});
      add_norm(out, pre + "msag.bn_g", gate_out);
    } else {
      out.push_back({pre + "cat.w", {Md, M + Md, 1, 1}, M + Md, ParamSpec::Init::Normal, 1.0});
      add_bias(out, pre + "cat.b", Md);
    }
    out.push_back({pre + "refine.w", {M, M + Md, 3, 3}, (M + Md) * 9});
    add_norm(out, pre + "refine.bn", M);
  }
  out.push_back({"head.w", {1, cfg.level_channels[0], 1, 1}, cfg.level_channels[0], ParamSpec::Init::Normal, 1.0});
  add_bias(out, "head.b", 1);
  return out;
}

std::vector<std::pair<std::string, Index>> batchnorm_layout(const DecoderConfig& cfg) {
  std::vector<std::pair<std::string, Index>> out;
  for (Index l = 1; l < kLevels; ++l) {
    const std::string pre = level_prefix(l);
    const Index M = cfg.level_channels[std::size_t(l - 1)], Md = cfg.level_channels[std::size_t(l)];
    if (cfg.use_msag) {
      out.emplace_back(pre + "msag.bn_e", cfg.gate_channels);
      out.emplace_back(pre + "msag.bn_d", cfg.gate_channels);
      out.emplace_back(pre + "msag.bn_g", cfg.per_channel_gate ? Md : 1);
    }
    out.emplace_back(pre + "refine.bn", M);
  }
  return out;
}

}  // namespace afseg::decoder
