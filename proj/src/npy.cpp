#include "afseg/npy.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

namespace afseg::npy {

static_assert(std::endian::native == std::endian::little, "NPY payloads are copied as little-endian");

namespace {

constexpr char kMagic[] = "\x93NUMPY";

std::string dict_value(const std::string& header, const std::string& key, const std::string& origin) {
  const std::regex re("['\"]" + key + "['\"]\\s*:\\s*('[^']*'|\"[^\"]*\"|\\([^)]*\\)|True|False)");
  std::smatch m;
  if (!std::regex_search(header, m, re))
    throw NpyError(NpyError::Kind::BadHeader, origin + ": header has no '" + key + "' entry");
  return m[1].str();
}

Shape parse_shape(const std::string& tuple, const std::string& origin) {
  Shape shape;
  std::string body = tuple.substr(1, tuple.size() - 2);
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \tL");
    const std::string num = item.substr(b, e - b + 1);
    if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos)
      throw NpyError(NpyError::Kind::BadHeader, origin + ": malformed shape " + tuple);
    shape.push_back(std::stoll(num));
  }
  return shape;
}

template <typename T>
void copy_payload(const std::string& bytes, std::size_t offset, TensorD& out) {
  for (Index i = 0; i < out.size(); ++i) {
    T v;
    std::memcpy(&v, bytes.data() + offset + std::size_t(i) * sizeof(T), sizeof(T));
    out[i] = double(v);
  }
}

}  // namespace

Array parse(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 10 || bytes.compare(0, 6, kMagic, 6) != 0)
    throw NpyError(NpyError::Kind::BadMagic, origin + ": not an NPY file (bad magic)");
  const auto major = std::uint8_t(bytes[6]), minor = std::uint8_t(bytes[7]);
  if (major != 1 || minor != 0)
    throw NpyError(NpyError::Kind::BadHeader, origin + ": NPY version " + std::to_string(major) + "." +
                                                  std::to_string(minor) + " not supported (need 1.0)");
  const std::size_t hlen = std::size_t(std::uint8_t(bytes[8])) | (std::size_t(std::uint8_t(bytes[9])) << 8);
  if (bytes.size() < 10 + hlen) throw NpyError(NpyError::Kind::Truncated, origin + ": header is truncated");
  const std::string header = bytes.substr(10, hlen);

  std::string descr = dict_value(header, "descr", origin);
  descr = descr.substr(1, descr.size() - 2);
  Array a;
  std::size_t width;
  if (descr == "<f8") {
    a.dtype = Dtype::F64, width = 8;
  } else if (descr == "<f4") {
    a.dtype = Dtype::F32, width = 4;
  } else {
    throw NpyError(NpyError::Kind::UnsupportedDtype,
                   origin + ": unsupported dtype '" + descr + "' (only little-endian <f4 and <f8)");
  }
  if (dict_value(header, "fortran_order", origin) != "False")
    throw NpyError(NpyError::Kind::BadHeader, origin + ": fortran_order arrays are not supported");
  a.shape = parse_shape(dict_value(header, "shape", origin), origin);

  const Index count = shape_size(a.shape);
  const std::size_t offset = 10 + hlen;
  if (bytes.size() < offset + std::size_t(count) * width)
    throw NpyError(NpyError::Kind::Truncated, origin + ": payload holds " + std::to_string(bytes.size() - offset) +
                                                  " bytes, shape " + shape_str(a.shape) + " needs " +
                                                  std::to_string(std::size_t(count) * width));
  a.data = TensorD(a.shape.empty() ? Shape{1} : a.shape);
  if (width == 8)
    copy_payload<double>(bytes, offset, a.data);
  else
    copy_payload<float>(bytes, offset, a.data);
  return a;
}

Array read_array(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NpyError(NpyError::Kind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::string serialize(const TensorD& t, Dtype dtype) {
  std::string shape = "(";
  for (std::size_t i = 0; i < t.shape().size(); ++i) shape += std::to_string(t.shape()[i]) + ", ";
  if (t.shape().size() > 1) shape.resize(shape.size() - 2);
  else if (t.shape().size() == 1) shape.resize(shape.size() - 1);
  shape += ")";
  std::string header = std::string("{'descr': '") + (dtype == Dtype::F64 ? "<f8" : "<f4") +
                       "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header += '\n';

  std::string out(kMagic, 6);
  out += char(1);
  out += char(0);
  out += char(header.size() & 0xff);
  out += char((header.size() >> 8) & 0xff);
  out += header;
  const std::size_t width = dtype == Dtype::F64 ? 8 : 4;
  const std::size_t start = out.size();
  out.resize(start + std::size_t(t.size()) * width);
  for (Index i = 0; i < t.size(); ++i) {
    char* dst = out.data() + start + std::size_t(i) * width;
    if (dtype == Dtype::F64) {
      const double v = t[i];
      std::memcpy(dst, &v, 8);
    } else {
      const float v = float(t[i]);
      std::memcpy(dst, &v, 4);
    }
  }
  return out;
}

void write(const std::string& path, const TensorD& t, Dtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NpyError(NpyError::Kind::Io, "cannot write " + path);
  const std::string bytes = serialize(t, dtype);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw NpyError(NpyError::Kind::Io, "write failed: " + path);
}

}  // namespace afseg::npy
