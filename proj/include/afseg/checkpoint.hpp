#pragma once

// Checkpoint directory:
//   manifest.json        format, version, run config, encoder seed/checksum,
//                        LKA geometry, parameter and batch-norm tables
//   params/<name>.npy    one float64 array per decoder parameter
//   bn/<name>.mean.npy   running statistics per batch-norm layer
//   bn/<name>.var.npy

#include <string>

#include "afseg/config.hpp"
#include "afseg/episodic.hpp"

namespace afseg {

struct Checkpoint {
  RunConfig config;
  episodic::Params params;
};

void save_checkpoint(const std::string& dir, const RunConfig& cfg, const episodic::Params& params);
/// Rebuilds the frozen encoder from the stored seed and checks its checksum.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace afseg
