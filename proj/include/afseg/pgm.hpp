#pragma once

// Binary masks as 8-bit P5 graymaps: written as 0/255, read back as value > 127.

#include <string>

#include "afseg/errors.hpp"
#include "afseg/mask.hpp"

namespace afseg::pgm {

Mask parse(const std::string& bytes, const std::string& origin = "<memory>");
Mask read(const std::string& path);
std::string serialize(const Mask& mask);
void write(const std::string& path, const Mask& mask);

}  // namespace afseg::pgm
