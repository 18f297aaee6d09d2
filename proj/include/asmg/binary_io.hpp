// SPDX-License-Identifier: Apache-2.0
//
// Little-endian scalar IO for checkpoint files.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "asmg/error.hpp"

namespace asmg::io {

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> buf;
  std::memcpy(buf.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  os.write(buf.data(), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  std::array<char, sizeof(T)> buf;
  if (!is.read(buf.data(), sizeof(T))) throw DataError(std::string("truncated checkpoint reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  T value;
  std::memcpy(&value, buf.data(), sizeof(T));
  return value;
}

inline void put_doubles(std::ostream& os, std::span<const double> xs) {
  for (double x : xs) put(os, x);
}

inline std::vector<double> get_doubles(std::istream& is, std::size_t n, const char* what) {
  std::vector<double> out(n);
  for (auto& x : out) x = get<double>(is, what);
  return out;
}

inline void put_magic(std::ostream& os, const char (&magic)[9]) { os.write(magic, 8); }

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& file) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw DataError(file + ": bad magic, expected " + std::string(magic, 8));
  }
}

}  // namespace asmg::io
