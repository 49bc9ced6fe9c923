#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "qsynth/qspace.hpp"

namespace qsynth {

enum class Tissue : std::uint8_t {
  background = 0,
  isotropic = 1,
  bundle_a = 2,
  bundle_b = 3,
  crossing = 4,
};

// Analytic 2D ground truth: per voxel a baseline signal, an SPD diffusion
// tensor (mm^2/s) and a tissue label. Background voxels have s0 = 0.
struct TensorPhantom {
  int height = 0, width = 0;
  std::vector<double> s0;
  std::vector<Eigen::Matrix3d> tensors;
  std::vector<Tissue> labels;

  std::size_t index(int y, int x) const { return std::size_t(y) * width + x; }
  std::vector<std::uint8_t> tissue_mask() const;
};

// Rendered slices for one phantom/scheme pair. dwis[i] pairs with
// scheme.points[i]; values are b0-normalized, so every b=0 slice equals the
// b0 structural channel exactly.
struct PhantomDataset {
  TensorPhantom phantom;
  SamplingScheme scheme;
  std::vector<std::vector<double>> dwis;  // per point, H*W, in [0, 1.5]
  std::vector<double> structurals;        // 3*H*W: b0, t1, t2, each in [0,1]
  int height = 0, width = 0;

  const double* structural(int channel) const {
    return structurals.data() + std::size_t(channel) * height * width;
  }
};

// Monoexponential tensor model S = s0 * exp(-b * g^T D g). Uses the raw
// b-value of q, not b_norm. D must be symmetric positive-definite.
double diffusion_signal(const Eigen::Matrix3d& D, double s0, const QSpacePoint& q);

// Deterministic field with an isotropic region, two orthogonal single-fiber
// bundles, their crossing, and a background rim. size >= 32.
TensorPhantom build_phantom(int size, std::uint64_t seed);

// b0 = s0 rescaled to [0,1]; t1 = clamp(1 - MD/3e-3, 0, 1); t2 =
// clamp(0.3 + 0.7*FA, 0, 1); t1/t2 masked to tissue.
std::vector<double> render_structural(const TensorPhantom& phantom);

// Rician noise of scale noise_sigma is applied to b>0 slices before
// normalization; b=0 slices are the normalization reference and stay exact.
// Values clipped to [0, 1.5].
PhantomDataset make_dataset(const TensorPhantom& phantom, const SamplingScheme& scheme,
                            double noise_sigma, std::uint64_t seed);

}  // namespace qsynth
