#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qsynth {

// Minimal 8-bit grayscale PNG writer (zlib-deflated, filter 0 per scanline).
void write_png_gray8(const std::string& path, int height, int width,
                     const std::vector<std::uint8_t>& pixels);

}  // namespace qsynth
