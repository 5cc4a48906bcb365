#include "afseg/pgm.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace afseg::pgm {

namespace {

// Next header integer, skipping whitespace and '#' comments.
long next_int(const std::string& b, std::size_t& pos, const std::string& origin, const char* what) {
  for (;;) {
    while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) ++pos;
  if (pos == start) throw InvalidInput(origin + ": PGM header is missing the " + what);
  return std::stol(b.substr(start, pos - start));
}

}  // namespace

Mask parse(const std::string& b, const std::string& origin) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '5') throw InvalidInput(origin + ": not a binary P5 graymap");
  std::size_t pos = 2;
  const long w = next_int(b, pos, origin, "width");
  const long h = next_int(b, pos, origin, "height");
  const long maxval = next_int(b, pos, origin, "maxval");
  if (w < 1 || h < 1) throw InvalidInput(origin + ": PGM dimensions must be positive");
  if (maxval < 1 || maxval > 255)
    throw InvalidInput(origin + ": PGM maxval " + std::to_string(maxval) + " unsupported (must be 1..255)");
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    throw InvalidInput(origin + ": PGM header must end in a single whitespace byte");
  ++pos;
  if (b.size() - pos < std::size_t(w * h))
    throw InvalidInput(origin + ": PGM payload truncated (" + std::to_string(b.size() - pos) + " of " +
                       std::to_string(w * h) + " bytes)");
  Mask m(h, w);
  for (long i = 0; i < w * h; ++i) m.data()[i] = static_cast<unsigned char>(b[pos + std::size_t(i)]) > 127 ? 1 : 0;
  return m;
}

Mask read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::string serialize(const Mask& mask) {
  std::string out = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) + "\n255\n";
  for (Index i = 0; i < mask.size(); ++i) out += mask.data()[i] ? char(255) : char(0);
  return out;
}

void write(const std::string& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path);
  const std::string bytes = serialize(mask);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw InvalidInput("write failed: " + path);
}

}  // namespace afseg::pgm
