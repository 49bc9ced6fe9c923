#include "qsynth/phantom.hpp"

#include <cmath>

#include "qsynth/analysis.hpp"
#include "qsynth/errors.hpp"
#include "qsynth/rng.hpp"

namespace qsynth {

namespace {

// Base eigenvalues per tissue class, mm^2/s. With the spatial modulation in
// [0.8, 1.2] all eigenvalues stay inside the physiological [1e-4, 3e-3] band.
constexpr double kIsoDiff = 7.5e-4;
constexpr double kBundleLong = 1.7e-3;
constexpr double kBundlePerp = 3.0e-4;
constexpr double kCrossPlane = 1.1e-3;

constexpr double kDiscRadius = 0.45;   // in normalized units, grid is [-0.5, 0.5]
constexpr double kBandHalfWidth = 0.10;

double quad_form(const Eigen::Matrix3d& D, const std::array<double, 3>& g) {
  const Eigen::Vector3d v(g[0], g[1], g[2]);
  return v.dot(D * v);
}

}  // namespace

std::vector<std::uint8_t> TensorPhantom::tissue_mask() const {
  std::vector<std::uint8_t> m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    m[i] = labels[i] != Tissue::background ? 1 : 0;
  return m;
}

double diffusion_signal(const Eigen::Matrix3d& D, double s0, const QSpacePoint& q) {
  if ((D - D.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw validation_error("diffusion_signal: tensor is not symmetric");
  Eigen::LLT<Eigen::Matrix3d> llt(D);
  if (llt.info() != Eigen::Success)
    throw validation_error("diffusion_signal: tensor is not positive-definite");
  if (s0 <= 0.0) throw validation_error("diffusion_signal: s0 must be positive");
  return s0 * std::exp(-q.b * quad_form(D, q.g));
}

TensorPhantom build_phantom(int size, std::uint64_t seed) {
  if (size < 32) throw validation_error("build_phantom: size must be >= 32");

  // Smooth seeded modulation field: a few low-frequency plane waves. Scaling
  // a tensor by a scalar preserves its eigenvectors and FA, so isotropic
  // voxels stay exactly isotropic and bundle orientations stay exact.
  Rng rng(seed);
  constexpr int kModes = 3;
  double amp[kModes], fx[kModes], fy[kModes], phase[kModes];
  for (int k = 0; k < kModes; ++k) {
    amp[k] = rng.uniform(0.02, 0.05);
    fx[k] = std::floor(rng.uniform(1.0, 4.0));
    fy[k] = std::floor(rng.uniform(1.0, 4.0));
    phase[k] = rng.uniform(0.0, 6.283185307179586);
  }

  TensorPhantom ph;
  ph.height = ph.width = size;
  ph.s0.assign(std::size_t(size) * size, 0.0);
  ph.tensors.assign(std::size_t(size) * size, Eigen::Matrix3d::Zero());
  ph.labels.assign(std::size_t(size) * size, Tissue::background);

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const std::size_t i = ph.index(y, x);
      const double cx = (x + 0.5) / size - 0.5;
      const double cy = (y + 0.5) / size - 0.5;
      const double rad = std::hypot(cx, cy);
      if (rad > kDiscRadius) continue;  // background

      const bool in_h = std::abs(cy) <= kBandHalfWidth;
      const bool in_v = std::abs(cx) <= kBandHalfWidth;
      Tissue t = Tissue::isotropic;
      if (in_h && in_v)
        t = Tissue::crossing;
      else if (in_h)
        t = Tissue::bundle_a;
      else if (in_v)
        t = Tissue::bundle_b;

      double m = 1.0 + 0.08 * std::cos(6.283185307179586 * rad / (2.0 * kDiscRadius));
      for (int k = 0; k < kModes; ++k)
        m += amp[k] * std::sin(6.283185307179586 * (fx[k] * cx + fy[k] * cy) + phase[k]);
      m = std::clamp(m, 0.8, 1.2);

      Eigen::Matrix3d D = Eigen::Matrix3d::Zero();
      switch (t) {
        case Tissue::isotropic:
          D.diagonal() << kIsoDiff, kIsoDiff, kIsoDiff;
          break;
        case Tissue::bundle_a:  // principal direction +x
          D.diagonal() << kBundleLong, kBundlePerp, kBundlePerp;
          break;
        case Tissue::bundle_b:  // principal direction +y
          D.diagonal() << kBundlePerp, kBundleLong, kBundlePerp;
          break;
        case Tissue::crossing:  // planar tensor spanning both bundle axes
          D.diagonal() << kCrossPlane, kCrossPlane, kBundlePerp;
          break;
        case Tissue::background:
          break;
      }
      ph.labels[i] = t;
      ph.tensors[i] = D * m;
      // Constant baseline keeps the per-voxel b0 normalization, the b=0
      // slice, and the rescaled b0 structural channel identical.
      ph.s0[i] = 1.0;
    }
  }
  return ph;
}

std::vector<double> render_structural(const TensorPhantom& phantom) {
  const std::size_t hw = std::size_t(phantom.height) * phantom.width;
  if (phantom.s0.size() != hw || phantom.tensors.size() != hw)
    throw validation_error("render_structural: inconsistent phantom field sizes");
  double s0_max = 0.0;
  for (double v : phantom.s0) s0_max = std::max(s0_max, v);
  if (s0_max <= 0.0) throw validation_error("render_structural: empty phantom");

  std::vector<double> out(3 * hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (phantom.labels[i] == Tissue::background) continue;
    const auto [fa, md] = fa_md(phantom.tensors[i]);
    out[i] = phantom.s0[i] / s0_max;
    out[hw + i] = std::clamp(1.0 - md / 3e-3, 0.0, 1.0);
    out[2 * hw + i] = std::clamp(0.3 + 0.7 * fa, 0.0, 1.0);
  }
  return out;
}

PhantomDataset make_dataset(const TensorPhantom& phantom, const SamplingScheme& scheme,
                            double noise_sigma, std::uint64_t seed) {
  if (!scheme.has_b0())
    throw validation_error("make_dataset: scheme must contain a b=0 point");
  if (noise_sigma < 0.0)
    throw validation_error("make_dataset: noise_sigma must be nonnegative");

  PhantomDataset ds;
  ds.phantom = phantom;
  ds.scheme = scheme;
  ds.height = phantom.height;
  ds.width = phantom.width;
  ds.structurals = render_structural(phantom);

  const std::size_t hw = std::size_t(phantom.height) * phantom.width;
  const double* b0 = ds.structurals.data();
  Rng rng(seed);

  ds.dwis.resize(scheme.size());
  for (std::size_t p = 0; p < scheme.size(); ++p) {
    const QSpacePoint& q = scheme.points[p];
    std::vector<double>& slice = ds.dwis[p];
    slice.assign(hw, 0.0);
    if (q.b == 0.0) {
      // Normalization reference: exact copy, never noised.
      std::copy(b0, b0 + hw, slice.begin());
      continue;
    }
    for (std::size_t i = 0; i < hw; ++i) {
      if (phantom.labels[i] == Tissue::background) continue;
      double s = std::exp(-q.b * quad_form(phantom.tensors[i], q.g)) * phantom.s0[i];
      if (noise_sigma > 0.0) {
        const double re = s + noise_sigma * rng.normal();
        const double im = noise_sigma * rng.normal();
        s = std::hypot(re, im);
      }
      slice[i] = std::clamp(s / phantom.s0[i], 0.0, 1.5);
    }
  }
  return ds;
}

}  // namespace qsynth
