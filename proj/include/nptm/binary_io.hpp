#pragma once

// Little-endian primitives for the archive formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace nptm::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw TruncatedError(std::string("truncated file while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char got[4];
  if (!is.read(got, 4)) throw TruncatedError(std::string("truncated file while reading ") + what + " magic");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic: not a ") + what + " file");
  }
}

// Writes through a temporary file and renames it into place.
void write_atomically(const std::string& path, const std::string& bytes);

}  // namespace nptm::io
