#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qsynth/qspace.hpp"

namespace qsynth {

struct DtiFit {
  int height = 0, width = 0;
  std::vector<Eigen::Matrix3d> tensors;  // symmetric, eigenvalues clamped to >= 1e-7
  std::vector<double> fa;                // in [0,1], 0 outside mask
  std::vector<double> md;                // trace/3, mm^2/s
  std::vector<double> residual;          // RMS log-signal fit residual
  std::vector<std::uint8_t> mask;        // voxels actually fitted
};

// Log-linear least-squares tensor fit. Requires b=0 plus exactly one nonzero
// shell and at least 7 points. dwis[i] is the slice for scheme point i,
// row-major H*W. Signals are floored at 1e-8 before the log.
DtiFit fit_dti(const std::vector<std::vector<double>>& dwis, const SamplingScheme& scheme,
               const std::vector<std::uint8_t>& mask, int height, int width);

// md = trace/3; fa = sqrt(3/2) * ||T - md*I||_F / ||T||_F, clamped to [0,1],
// and 0 for the zero tensor.
std::pair<double, double> fa_md(const Eigen::Matrix3d& t);

double rmse(const std::vector<double>& a, const std::vector<double>& b);
double rmse_masked(const std::vector<double>& a, const std::vector<double>& b,
                   const std::vector<std::uint8_t>& mask);

// 100 dB exactly when rmse < 1e-10, otherwise 20*log10(data_range/rmse).
double psnr(const std::vector<double>& a, const std::vector<double>& b,
            double data_range = 1.0);

// Three-scale MS-SSIM, 11x11 Gaussian window (sigma 1.5), k1=0.01, k2=0.03,
// data range 1. Standard five-scale weights truncated to three and
// renormalized. Windows use symmetric boundary padding. Requires
// min(height, width) >= 32.
double ms_ssim(const std::vector<double>& a, const std::vector<double>& b, int height,
               int width);

struct MetricReport {
  double rmse = 0.0;
  double psnr = 0.0;
  double ms_ssim = 0.0;
  std::map<std::string, std::map<std::string, double>> per_map;
};

}  // namespace qsynth
