#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "norm3d/errors.hpp"
#include "norm3d/tensor.hpp"

namespace norm3d {

// Flat little-endian tensor blob: 8 x uint32 header
// (magic, version, n, d, h, w, c, dtype) followed by the payload values.
// dtype tag: 1 = float32, 2 = float64.

inline constexpr std::uint32_t kTensorBlobMagic = 0x31423554u;  // "T5B1"
inline constexpr std::uint32_t kTensorBlobVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError(std::string("tensor blob: truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

template <std::floating_point T>
constexpr std::uint32_t dtype_tag() {
  return sizeof(T) == 4 ? 1u : 2u;
}

}  // namespace detail

template <std::floating_point T>
void write_tensor(std::ostream& os, const BasicTensor5<T>& t) {
  const Shape5& s = t.shape();
  for (std::size_t e : {s.n, s.d, s.h, s.w, s.c}) {
    if (e > 0xffffffffu) {
      throw SizeError("tensor blob: extent exceeds the 32-bit header field");
    }
  }
  detail::put_u32(os, kTensorBlobMagic);
  detail::put_u32(os, kTensorBlobVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(s.n));
  detail::put_u32(os, static_cast<std::uint32_t>(s.d));
  detail::put_u32(os, static_cast<std::uint32_t>(s.h));
  detail::put_u32(os, static_cast<std::uint32_t>(s.w));
  detail::put_u32(os, static_cast<std::uint32_t>(s.c));
  detail::put_u32(os, detail::dtype_tag<T>());

  std::string buf;
  buf.reserve(t.size() * sizeof(T));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int k = 0; k < 4; ++k) buf.push_back(static_cast<char>(bits >> (8 * k)));
    } else {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int k = 0; k < 8; ++k) buf.push_back(static_cast<char>(bits >> (8 * k)));
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("tensor blob: write failed");
}

template <std::floating_point T>
BasicTensor5<T> read_tensor(std::istream& is) {
  if (detail::get_u32(is, "magic") != kTensorBlobMagic) {
    throw FormatError("tensor blob: bad magic");
  }
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kTensorBlobVersion) {
    throw FormatError("tensor blob: unsupported version " +
                      std::to_string(version));
  }
  Shape5 s;
  s.n = detail::get_u32(is, "extent n");
  s.d = detail::get_u32(is, "extent d");
  s.h = detail::get_u32(is, "extent h");
  s.w = detail::get_u32(is, "extent w");
  s.c = detail::get_u32(is, "extent c");
  const std::uint32_t dtype = detail::get_u32(is, "dtype");
  if (dtype != detail::dtype_tag<T>()) {
    throw FormatError("tensor blob: dtype tag " + std::to_string(dtype) +
                      " does not match the requested element type");
  }
  const std::size_t count = s.numel();
  std::string buf(count * sizeof(T), '\0');
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw FormatError("tensor blob: truncated payload");
  }
  BasicTensor5<T> t(s);
  auto out = t.data();
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data());
  for (std::size_t i = 0; i < count; ++i) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) {
        bits |= static_cast<std::uint32_t>(p[i * 4 + k]) << (8 * k);
      }
      out[i] = std::bit_cast<float>(bits);
    } else {
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) {
        bits |= static_cast<std::uint64_t>(p[i * 8 + k]) << (8 * k);
      }
      out[i] = std::bit_cast<double>(bits);
    }
  }
  return t;
}

}  // namespace norm3d
