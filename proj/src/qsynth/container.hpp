#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qsynth/phantom.hpp"
#include "qsynth/qspace.hpp"

namespace qsynth {

// On-disk dataset container: a directory holding meta.json, dwis.bin and
// structurals.bin (float32 little-endian, row-major slice/row/column), plus
// FSL bvals/bvecs.
struct DwiDataset {
  int height = 0, width = 0;
  SamplingScheme scheme;
  std::vector<float> dwis;         // N * H * W
  std::vector<float> structurals;  // 3 * H * W (b0, t1, t2)
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;

  const float* dwi(std::size_t i) const {
    return dwis.data() + i * std::size_t(height) * width;
  }
  const float* structural(int c) const {
    return structurals.data() + std::size_t(c) * height * width;
  }
  std::vector<std::uint8_t> tissue_mask() const;
  std::string digest() const;  // FNV-1a over dwis then structurals bytes
};

DwiDataset to_dwi_dataset(const PhantomDataset& ds, std::uint64_t seed, double noise_sigma);

void save_dwi_dataset(const std::string& dir, const DwiDataset& ds);
DwiDataset load_dwi_dataset(const std::string& dir);

// Scalar-map container: meta.json plus maps.bin with named channels.
struct MapStack {
  int height = 0, width = 0;
  std::vector<std::string> channel_names;
  std::vector<float> data;  // channels * H * W

  const float* channel(std::size_t c) const {
    return data.data() + c * std::size_t(height) * width;
  }
  int find_channel(const std::string& name) const;
};

void save_map_stack(const std::string& dir, const MapStack& maps);
MapStack load_map_stack(const std::string& dir);

}  // namespace qsynth
