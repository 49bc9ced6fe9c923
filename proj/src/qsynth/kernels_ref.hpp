#pragma once

#include <cstddef>

#include "qsynth/kernels.hpp"

namespace qsynth::ref {

// Serial naive twins of the OpenMP kernels. These take the direct
// seven-loop route (no im2col) and exist as the comparison baseline for
// tests and the benchmark.

using kern::ConvDims;

template <class T>
void gemm_acc(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T s = c[std::size_t(i) * n + j];
      for (int kk = 0; kk < k; ++kk)
        s += a[std::size_t(i) * k + kk] * b[std::size_t(kk) * n + j];
      c[std::size_t(i) * n + j] = s;
    }
}

template <class T>
void conv2d_forward(const ConvDims& d, const T* x, const T* w, const T* bias, T* y) {
  for (int n = 0; n < d.n; ++n)
    for (int oc = 0; oc < d.out_ch; ++oc)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          T s = bias ? bias[oc] : T(0);
          for (int ic = 0; ic < d.in_ch; ++ic)
            for (int ky = 0; ky < d.k; ++ky)
              for (int kx = 0; kx < d.k; ++kx) {
                const int iy = oy * d.stride - d.pad + ky;
                const int ix = ox * d.stride - d.pad + kx;
                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                s += w[((std::size_t(oc) * d.in_ch + ic) * d.k + ky) * d.k + kx] *
                     x[((std::size_t(n) * d.in_ch + ic) * d.h + iy) * d.w + ix];
              }
          y[((std::size_t(n) * d.out_ch + oc) * d.oh + oy) * d.ow + ox] = s;
        }
}

template <class T>
void conv2d_backward_data(const ConvDims& d, const T* gy, const T* w, T* gx) {
  for (std::size_t i = 0; i < std::size_t(d.n) * d.in_ch * d.h * d.w; ++i) gx[i] = T(0);
  for (int n = 0; n < d.n; ++n)
    for (int oc = 0; oc < d.out_ch; ++oc)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          const T g = gy[((std::size_t(n) * d.out_ch + oc) * d.oh + oy) * d.ow + ox];
          for (int ic = 0; ic < d.in_ch; ++ic)
            for (int ky = 0; ky < d.k; ++ky)
              for (int kx = 0; kx < d.k; ++kx) {
                const int iy = oy * d.stride - d.pad + ky;
                const int ix = ox * d.stride - d.pad + kx;
                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                gx[((std::size_t(n) * d.in_ch + ic) * d.h + iy) * d.w + ix] +=
                    g * w[((std::size_t(oc) * d.in_ch + ic) * d.k + ky) * d.k + kx];
              }
        }
}

template <class T>
void conv2d_backward_weights(const ConvDims& d, const T* x, const T* gy, T* gw, T* gbias) {
  for (int n = 0; n < d.n; ++n)
    for (int oc = 0; oc < d.out_ch; ++oc)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          const T g = gy[((std::size_t(n) * d.out_ch + oc) * d.oh + oy) * d.ow + ox];
          if (gbias) gbias[oc] += g;
          for (int ic = 0; ic < d.in_ch; ++ic)
            for (int ky = 0; ky < d.k; ++ky)
              for (int kx = 0; kx < d.k; ++kx) {
                const int iy = oy * d.stride - d.pad + ky;
                const int ix = ox * d.stride - d.pad + kx;
                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                gw[((std::size_t(oc) * d.in_ch + ic) * d.k + ky) * d.k + kx] +=
                    g * x[((std::size_t(n) * d.in_ch + ic) * d.h + iy) * d.w + ix];
              }
        }
}

}  // namespace qsynth::ref
