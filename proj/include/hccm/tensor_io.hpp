#pragma once

// HCT1 tensor files: the magic bytes "HCT1", an ASCII header line
// "dtype=f32|f64; shape=d0,d1,...;" ending in '\n', then raw little-endian
// values in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "hccm/tensor.hpp"

namespace hccm {

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

template <typename U>
U byteswap_value(U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename U>
void write_le(std::ostream& os, std::span<const U> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(U)));
  } else {
    for (U v : values) {
      const U s = byteswap_value(v);
      os.write(reinterpret_cast<const char*>(&s), sizeof(U));
    }
  }
}

template <typename U>
std::vector<U> read_le(std::istream& is, std::size_t n) {
  std::vector<U> out(n);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(U)));
  if constexpr (std::endian::native != std::endian::little)
    for (auto& v : out) v = byteswap_value(v);
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  os.write("HCT1", 4);
  std::string header = std::string("dtype=") + detail::dtype_name<T>() + "; shape=";
  for (std::size_t i = 0; i < t.ndim(); ++i) {
    if (i) header += ",";
    header += std::to_string(t.dim(i));
  }
  header += ";\n";
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_le<T>(os, t.data());
}

/// Reads an HCT1 tensor, converting between f32 and f64 when the stored dtype differs from T.
template <typename T>
Tensor<T> read_tensor(std::istream& is, const std::string& what = "stream") {
  char magic[4] = {};
  is.read(magic, 4);
  require<IoError>(is.good() && std::memcmp(magic, "HCT1", 4) == 0, what,
                   ": missing HCT1 magic");
  std::string header;
  std::getline(is, header);
  require<IoError>(is.good(), what, ": truncated header");
  std::string dtype;
  Shape shape;
  bool have_dtype = false, have_shape = false;
  std::size_t pos = 0;
  while (pos < header.size()) {
    auto semi = header.find(';', pos);
    if (semi == std::string::npos) semi = header.size();
    const std::string field = detail::trim(header.substr(pos, semi - pos));
    pos = semi + 1;
    if (field.empty()) continue;
    const auto eq = field.find('=');
    require<IoError>(eq != std::string::npos, what, ": malformed header field '", field, "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "dtype") {
      dtype = value;
      have_dtype = true;
    } else if (key == "shape") {
      have_shape = true;
      std::size_t p = 0;
      while (p < value.size()) {
        auto comma = value.find(',', p);
        if (comma == std::string::npos) comma = value.size();
        const std::string dim = detail::trim(value.substr(p, comma - p));
        require<IoError>(!dim.empty() && dim.find_first_not_of("0123456789") == std::string::npos,
                         what, ": bad shape extent '", dim, "'");
        shape.push_back(std::stoull(dim));
        p = comma + 1;
      }
    } else {
      throw IoError(what + ": unknown header field '" + key + "'");
    }
  }
  require<IoError>(have_dtype && have_shape, what, ": header lacks dtype or shape");
  const std::size_t n = shape_numel(shape);
  std::vector<T> values;
  if (dtype == "f32") {
    auto raw = detail::read_le<float>(is, n);
    values.assign(raw.begin(), raw.end());
  } else if (dtype == "f64") {
    auto raw = detail::read_le<double>(is, n);
    values.assign(raw.begin(), raw.end());
  } else {
    throw IoError(what + ": unsupported dtype '" + dtype + "'");
  }
  require<IoError>(static_cast<bool>(is), what, ": truncated payload");
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  require<IoError>(static_cast<bool>(os), "cannot open ", path.string(), " for writing");
  write_tensor(os, t);
  require<IoError>(static_cast<bool>(os), "write failed: ", path.string());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require<IoError>(static_cast<bool>(is), "cannot open ", path.string());
  return read_tensor<T>(is, path.string());
}

}  // namespace hccm
