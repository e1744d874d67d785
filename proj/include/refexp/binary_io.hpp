#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "refexp/errors.hpp"

namespace refexp::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swaps");

template <typename T>
void write_raw(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& what) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  if (!in) throw IoError("truncated read of " + what);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_raw(out, v); }
inline void write_f32(std::ostream& out, float v) { write_raw(out, v); }
inline void write_f64(std::ostream& out, double v) { write_raw(out, v); }

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  return read_raw<std::uint32_t>(in, what);
}
inline std::uint64_t read_u64(std::istream& in, const std::string& what) {
  return read_raw<std::uint64_t>(in, what);
}
inline float read_f32(std::istream& in, const std::string& what) {
  return read_raw<float>(in, what);
}
inline double read_f64(std::istream& in, const std::string& what) {
  return read_raw<double>(in, what);
}

inline std::uint64_t fnv1a64(const char* data, std::size_t size) {
  std::uint64_t hash = 14695981039346656037ull;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= static_cast<unsigned char>(data[i]);
    hash *= 1099511628211ull;
  }
  return hash;
}

/// Writes payload followed by an 8-byte FNV-1a trailer so readers can detect
/// any byte flip, not just structural damage.
inline void write_checked_file(const std::string& path, const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::uint64_t sum = fnv1a64(payload.data(), payload.size());
  char trailer[8];
  std::memcpy(trailer, &sum, 8);
  out.write(trailer, 8);
  if (!out) throw IoError("write failure on " + path);
}

/// Reads a whole file, verifies the trailer, and returns the payload without
/// it. `category` names the error category on damage (per file format).
inline std::string read_checked_payload(const std::string& path, const char* category) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  std::string blob = std::move(buffer).str();
  if (blob.size() < 12) throw IntegrityError(category, "truncated file " + path);
  std::uint64_t stored;
  std::memcpy(&stored, blob.data() + blob.size() - 8, 8);
  if (fnv1a64(blob.data(), blob.size() - 8) != stored) {
    throw IntegrityError(category, "checksum mismatch in " + path);
  }
  blob.resize(blob.size() - 8);
  return blob;
}

}  // namespace refexp::io
