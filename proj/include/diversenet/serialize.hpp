// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary primitives shared by the patch format and the
// checkpoint format. Integer payloads are bit-exact across platforms.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace diversenet {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of binary stream");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("unexpected end of binary stream");
  return s;
}

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
  static constexpr std::uint8_t value = 1;
};
template <>
struct DtypeCode<double> {
  static constexpr std::uint8_t value = 2;
};
template <>
struct DtypeCode<std::int32_t> {
  static constexpr std::uint8_t value = 3;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_pod<std::uint8_t>(os, DtypeCode<T>::value);
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) write_pod<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(static_cast<std::size_t>(t.numel()) * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const auto dtype = read_pod<std::uint8_t>(is);
  if (dtype != DtypeCode<T>::value)
    throw IoError("tensor dtype mismatch: stored code " + std::to_string(dtype));
  const auto rank = read_pod<std::uint8_t>(is);
  Shape dims(rank);
  for (auto& d : dims) d = read_pod<std::int64_t>(is);
  Tensor<T> t(dims);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(static_cast<std::size_t>(t.numel()) * sizeof(T)));
  if (!is) throw IoError("unexpected end of tensor payload");
  return t;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace diversenet
