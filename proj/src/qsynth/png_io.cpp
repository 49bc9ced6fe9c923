#include "qsynth/png_io.hpp"

#include <zlib.h>

#include <cstring>

#include "qsynth/binio.hpp"
#include "qsynth/errors.hpp"

namespace qsynth {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
  put_u32(out, std::uint32_t(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = std::uint32_t(
      ::crc32(0L, out.data() + crc_start, uInt(out.size() - crc_start)));
  put_u32(out, crc);
}

}  // namespace

void write_png_gray8(const std::string& path, int height, int width,
                     const std::vector<std::uint8_t>& pixels) {
  if (height < 1 || width < 1 || pixels.size() != std::size_t(height) * width)
    throw validation_error("write_png_gray8: bad image dimensions");

  // raw stream: each scanline prefixed with filter byte 0
  std::vector<std::uint8_t> raw(std::size_t(height) * (std::size_t(width) + 1));
  for (int y = 0; y < height; ++y) {
    raw[std::size_t(y) * (width + 1)] = 0;
    std::memcpy(raw.data() + std::size_t(y) * (width + 1) + 1,
                pixels.data() + std::size_t(y) * width, std::size_t(width));
  }
  uLongf comp_size = ::compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> comp(comp_size);
  if (::compress2(comp.data(), &comp_size, raw.data(), uLong(raw.size()), 9) != Z_OK)
    throw io_error("write_png_gray8: deflate failed");
  comp.resize(comp_size);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, std::uint32_t(width));
  put_u32(ihdr, std::uint32_t(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});
  write_bytes(path, out.data(), out.size());
}

}  // namespace qsynth
