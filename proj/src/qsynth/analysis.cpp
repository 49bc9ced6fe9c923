#include "qsynth/analysis.hpp"

#include <omp.h>

#include <cmath>

#include "qsynth/errors.hpp"

namespace qsynth {

namespace {

constexpr double kSignalFloor = 1e-8;
constexpr double kEigenFloor = 1e-7;

// Design-matrix row for ln S = ln S0 - b g^T D g with unknowns
// [ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz].
void design_row(const QSpacePoint& q, double* row) {
  const double b = q.b;
  const double gx = q.g[0], gy = q.g[1], gz = q.g[2];
  row[0] = 1.0;
  row[1] = -b * gx * gx;
  row[2] = -b * gy * gy;
  row[3] = -b * gz * gz;
  row[4] = -2.0 * b * gx * gy;
  row[5] = -2.0 * b * gx * gz;
  row[6] = -2.0 * b * gy * gz;
}

std::vector<double> downsample2(const std::vector<double>& img, int h, int w, int& oh,
                                int& ow) {
  oh = h / 2;
  ow = w / 2;
  std::vector<double> out(std::size_t(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const std::size_t i0 = std::size_t(2 * y) * w + 2 * x;
      out[std::size_t(y) * ow + x] =
          0.25 * (img[i0] + img[i0 + 1] + img[i0 + w] + img[i0 + w + 1]);
    }
  return out;
}

// Separable Gaussian filtering with symmetric boundary padding.
std::vector<double> gauss_filter(const std::vector<double>& img, int h, int w,
                                 const std::vector<double>& kernel) {
  const int half = int(kernel.size()) / 2;
  auto reflect = [](int i, int n) {
    // symmetric padding: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k)
        s += kernel[std::size_t(k + half)] * img[std::size_t(y) * w + reflect(x + k, w)];
      tmp[std::size_t(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k)
        s += kernel[std::size_t(k + half)] * tmp[std::size_t(reflect(y + k, h)) * w + x];
      out[std::size_t(y) * w + x] = s;
    }
  return out;
}

// Mean luminance*cs (SSIM) and mean cs over the image.
void ssim_pass(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
               double& mean_ssim, double& mean_cs) {
  constexpr double kC1 = 0.01 * 0.01;  // (k1 * data_range)^2
  constexpr double kC2 = 0.03 * 0.03;
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  std::vector<double> kernel(kWin);
  double ksum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - (kWin - 1) / 2.0;
    kernel[std::size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    ksum += kernel[std::size_t(i)];
  }
  for (double& v : kernel) v /= ksum;

  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = gauss_filter(a, h, w, kernel);
  const auto mu_b = gauss_filter(b, h, w, kernel);
  const auto m_aa = gauss_filter(aa, h, w, kernel);
  const auto m_bb = gauss_filter(bb, h, w, kernel);
  const auto m_ab = gauss_filter(ab, h, w, kernel);

  double ssim_acc = 0.0, cs_acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    const double l = (2.0 * mu_a[i] * mu_b[i] + kC1) /
                     (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1);
    const double cs = (2.0 * cov + kC2) / (va + vb + kC2);
    ssim_acc += l * cs;
    cs_acc += cs;
  }
  mean_ssim = ssim_acc / double(a.size());
  mean_cs = cs_acc / double(a.size());
}

}  // namespace

std::pair<double, double> fa_md(const Eigen::Matrix3d& t) {
  if ((t - t.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw validation_error("fa_md: tensor is not symmetric");
  const double md = t.trace() / 3.0;
  const double fn = t.norm();
  if (fn == 0.0) return {0.0, md};
  const Eigen::Matrix3d dev = t - md * Eigen::Matrix3d::Identity();
  const double fa = std::clamp(std::sqrt(1.5) * dev.norm() / fn, 0.0, 1.0);
  return {fa, md};
}

DtiFit fit_dti(const std::vector<std::vector<double>>& dwis, const SamplingScheme& scheme,
               const std::vector<std::uint8_t>& mask, int height, int width) {
  const std::size_t n = scheme.size();
  if (dwis.size() != n)
    throw validation_error("fit_dti: dwis count does not match scheme");
  const std::size_t hw = std::size_t(height) * width;
  if (mask.size() != hw) throw validation_error("fit_dti: mask size mismatch");
  for (const auto& s : dwis)
    if (s.size() != hw) throw validation_error("fit_dti: slice size mismatch");

  // One b=0 group plus exactly one nonzero shell.
  double shell_b = 0.0;
  std::size_t n_b0 = 0;
  for (const auto& p : scheme.points) {
    if (p.b == 0.0) {
      ++n_b0;
      continue;
    }
    if (shell_b == 0.0)
      shell_b = p.b;
    else if (std::abs(p.b - shell_b) > 1e-6 * shell_b)
      throw validation_error("fit_dti: scheme must hold a single nonzero shell");
  }
  if (n_b0 == 0) throw validation_error("fit_dti: scheme needs a b=0 point");
  if (n < 7) throw validation_error("fit_dti: need at least 7 points");

  Eigen::MatrixXd X(n, 7);
  for (std::size_t i = 0; i < n; ++i) {
    double row[7];
    design_row(scheme.points[i], row);
    for (int j = 0; j < 7; ++j) X(Eigen::Index(i), j) = row[j];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < 7)
    throw numeric_error("fit_dti: rank-deficient design matrix (collinear directions)");
  // Precomputed pseudo-inverse: the per-voxel solve becomes one matvec.
  const Eigen::MatrixXd pinv = qr.solve(Eigen::MatrixXd::Identity(n, n));

  DtiFit fit;
  fit.height = height;
  fit.width = width;
  fit.tensors.assign(hw, Eigen::Matrix3d::Zero());
  fit.fa.assign(hw, 0.0);
  fit.md.assign(hw, 0.0);
  fit.residual.assign(hw, 0.0);
  fit.mask = mask;

#pragma omp parallel for schedule(static)
  for (std::int64_t vi = 0; vi < std::int64_t(hw); ++vi) {
    const std::size_t v = std::size_t(vi);
    if (!mask[v]) continue;
    Eigen::VectorXd y(n);
    for (std::size_t i = 0; i < n; ++i)
      y[Eigen::Index(i)] = std::log(std::max(dwis[i][v], kSignalFloor));
    const Eigen::VectorXd beta = pinv * y;
    const Eigen::VectorXd res = X * beta - y;
    fit.residual[v] = std::sqrt(res.squaredNorm() / double(n));

    Eigen::Matrix3d D;
    D << beta[1], beta[4], beta[5], beta[4], beta[2], beta[6], beta[5], beta[6], beta[3];
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(D);
    Eigen::Vector3d ev = es.eigenvalues().cwiseMax(kEigenFloor);
    D = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    D = 0.5 * (D + D.transpose().eval());  // kill symmetrization round-off
    fit.tensors[v] = D;
    const auto [fa, md] = fa_md(D);
    fit.fa[v] = fa;
    fit.md[v] = md;
  }
  return fit;
}

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw validation_error("rmse: shape mismatch");
  if (a.empty()) throw validation_error("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / double(a.size()));
}

double rmse_masked(const std::vector<double>& a, const std::vector<double>& b,
                   const std::vector<std::uint8_t>& mask) {
  if (a.size() != b.size() || a.size() != mask.size())
    throw validation_error("rmse_masked: shape mismatch");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    const double d = a[i] - b[i];
    acc += d * d;
    ++count;
  }
  if (count == 0) throw validation_error("rmse_masked: empty mask");
  return std::sqrt(acc / double(count));
}

double psnr(const std::vector<double>& a, const std::vector<double>& b, double data_range) {
  const double e = rmse(a, b);
  if (e < 1e-10) return 100.0;
  return 20.0 * std::log10(data_range / e);
}

double ms_ssim(const std::vector<double>& a, const std::vector<double>& b, int height,
               int width) {
  if (a.size() != b.size() || a.size() != std::size_t(height) * width)
    throw validation_error("ms_ssim: shape mismatch");
  if (std::min(height, width) < 32)
    throw validation_error("ms_ssim: min dimension must be >= 32 for 3 scales");

  // Standard 5-scale weights truncated to 3 scales, renormalized to sum 1.
  constexpr double kW[3] = {0.0448 / 0.6305, 0.2856 / 0.6305, 0.3001 / 0.6305};

  std::vector<double> ca = a, cb = b;
  int h = height, w = width;
  double result = 1.0;
  for (int scale = 0; scale < 3; ++scale) {
    double mean_ssim = 0.0, mean_cs = 0.0;
    ssim_pass(ca, cb, h, w, mean_ssim, mean_cs);
    const double term = scale == 2 ? mean_ssim : mean_cs;
    result *= std::pow(std::max(term, 0.0), kW[scale]);
    if (scale < 2) {
      int oh = 0, ow = 0;
      ca = downsample2(ca, h, w, oh, ow);
      cb = downsample2(cb, h, w, oh, ow);
      h = oh;
      w = ow;
    }
  }
  return result;
}

}  // namespace qsynth
