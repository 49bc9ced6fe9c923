#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qsynth/errors.hpp"

namespace qsynth {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

inline void write_bytes(const std::string& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path);
  out.write(static_cast<const char*>(data), std::streamsize(size));
  if (!out) throw io_error("write failed: " + path);
}

inline std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw io_error("cannot open for reading: " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<char> data;
  data.resize(std::size_t(size));
  in.read(data.data(), size);
  if (!in) throw io_error("read failed: " + path);
  return data;
}

inline void write_text(const std::string& path, const std::string& text) {
  write_bytes(path, text.data(), text.size());
}

inline std::string read_text(const std::string& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline std::uint32_t crc32_of(const void* data, std::size_t size) {
  return std::uint32_t(::crc32(0L, static_cast<const Bytef*>(data), uInt(size)));
}

inline void write_floats(const std::string& path, const std::vector<float>& v) {
  write_bytes(path, v.data(), v.size() * sizeof(float));
}

inline std::vector<float> read_floats(const std::string& path, std::size_t expected_count) {
  const auto bytes = read_bytes(path);
  if (bytes.size() != expected_count * sizeof(float))
    throw format_error(path + ": expected " + std::to_string(expected_count * sizeof(float)) +
                       " bytes, found " + std::to_string(bytes.size()));
  std::vector<float> v(expected_count);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

// 64-bit FNV-1a, used for dataset digests.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace qsynth
