#pragma once

#include <omp.h>

#include <cstddef>
#include <vector>

namespace qsynth::kern {

// All kernels are written in gather form: every output element is produced
// by exactly one thread with a fixed accumulation order, so results are
// bit-identical for any thread count or schedule.

struct ConvDims {
  int n, in_ch, h, w;
  int out_ch, k, stride, pad;
  int oh, ow;

  static ConvDims make(int n, int in_ch, int h, int w, int out_ch, int k, int stride,
                       int pad) {
    ConvDims d{n, in_ch, h, w, out_ch, k, stride, pad, 0, 0};
    d.oh = (h + 2 * pad - k) / stride + 1;
    d.ow = (w + 2 * pad - k) / stride + 1;
    return d;
  }
};

// C[M x N] += A[M x K] * B[K x N], single thread. The (i,k,j) loop order
// streams B rows and keeps a fixed per-element accumulation order.
template <class T>
void gemm_acc(int m, int n, int k, const T* __restrict__ a, const T* __restrict__ b,
              T* __restrict__ c) {
  for (int i = 0; i < m; ++i) {
    T* __restrict__ crow = c + std::size_t(i) * n;
    const T* arow = a + std::size_t(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* __restrict__ brow = b + std::size_t(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// col[(ic*k*k + ky*k + kx) * (oh*ow) + o] = x[ic, oy*s - pad + ky, ox*s - pad + kx]
template <class T>
void im2col(const ConvDims& d, const T* x, T* col) {
  const int J = d.oh * d.ow;
  for (int ic = 0; ic < d.in_ch; ++ic) {
    const T* xc = x + std::size_t(ic) * d.h * d.w;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        T* crow = col + (std::size_t(ic) * d.k * d.k + std::size_t(ky) * d.k + kx) * J;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.stride - d.pad + ky;
          T* dst = crow + std::size_t(oy) * d.ow;
          if (iy < 0 || iy >= d.h) {
            for (int ox = 0; ox < d.ow; ++ox) dst[ox] = T(0);
            continue;
          }
          const T* src = xc + std::size_t(iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox * d.stride - d.pad + kx;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_acc(const ConvDims& d, const T* col, T* gx) {
  const int J = d.oh * d.ow;
  for (int ic = 0; ic < d.in_ch; ++ic) {
    T* xc = gx + std::size_t(ic) * d.h * d.w;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        const T* crow = col + (std::size_t(ic) * d.k * d.k + std::size_t(ky) * d.k + kx) * J;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          const T* src = crow + std::size_t(oy) * d.ow;
          T* dst = xc + std::size_t(iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// y[n, oc] = bias[oc] + w[oc, :] . col_n; parallel over samples.
template <class T>
void conv2d_forward(const ConvDims& d, const T* x, const T* w, const T* bias, T* y) {
  const int J = d.oh * d.ow;
  const int K = d.in_ch * d.k * d.k;
#pragma omp parallel
  {
    std::vector<T> col(std::size_t(K) * J);
#pragma omp for schedule(static)
    for (int n = 0; n < d.n; ++n) {
      const T* xn = x + std::size_t(n) * d.in_ch * d.h * d.w;
      T* yn = y + std::size_t(n) * d.out_ch * J;
      im2col(d, xn, col.data());
      for (int oc = 0; oc < d.out_ch; ++oc) {
        T* row = yn + std::size_t(oc) * J;
        const T bv = bias ? bias[oc] : T(0);
        for (int j = 0; j < J; ++j) row[j] = bv;
      }
      gemm_acc(d.out_ch, J, K, w, col.data(), yn);
    }
  }
}

// gx_n = col2im(w^T * gy_n); parallel over samples.
template <class T>
void conv2d_backward_data(const ConvDims& d, const T* gy, const T* w, T* gx) {
  const int J = d.oh * d.ow;
  const int K = d.in_ch * d.k * d.k;
#pragma omp parallel
  {
    std::vector<T> colg(std::size_t(K) * J);
#pragma omp for schedule(static)
    for (int n = 0; n < d.n; ++n) {
      const T* gyn = gy + std::size_t(n) * d.out_ch * J;
      T* gxn = gx + std::size_t(n) * d.in_ch * d.h * d.w;
      for (int kk = 0; kk < K; ++kk) {
        T* __restrict__ crow = colg.data() + std::size_t(kk) * J;
        for (int j = 0; j < J; ++j) crow[j] = T(0);
        for (int oc = 0; oc < d.out_ch; ++oc) {
          const T wv = w[std::size_t(oc) * K + kk];
          const T* __restrict__ grow = gyn + std::size_t(oc) * J;
#pragma omp simd
          for (int j = 0; j < J; ++j) crow[j] += wv * grow[j];
        }
      }
      for (std::size_t i = 0; i < std::size_t(d.in_ch) * d.h * d.w; ++i) gxn[i] = T(0);
      col2im_acc(d, colg.data(), gxn);
    }
  }
}

// gw += sum_n gy_n * col_n^T, gbias += sum_{n,j} gy. Per-sample partials are
// reduced in sample order, which keeps the sum independent of the thread count.
template <class T>
void conv2d_backward_weights(const ConvDims& d, const T* x, const T* gy, T* gw, T* gbias) {
  const int J = d.oh * d.ow;
  const int K = d.in_ch * d.k * d.k;
  std::vector<T> parts(std::size_t(d.n) * d.out_ch * K, T(0));
  std::vector<T> bparts(std::size_t(d.n) * d.out_ch, T(0));
#pragma omp parallel
  {
    std::vector<T> col(std::size_t(K) * J);
#pragma omp for schedule(static)
    for (int n = 0; n < d.n; ++n) {
      const T* xn = x + std::size_t(n) * d.in_ch * d.h * d.w;
      const T* gyn = gy + std::size_t(n) * d.out_ch * J;
      T* part = parts.data() + std::size_t(n) * d.out_ch * K;
      T* bpart = bparts.data() + std::size_t(n) * d.out_ch;
      im2col(d, xn, col.data());
      for (int oc = 0; oc < d.out_ch; ++oc) {
        const T* __restrict__ grow = gyn + std::size_t(oc) * J;
        for (int kk = 0; kk < K; ++kk) {
          const T* __restrict__ crow = col.data() + std::size_t(kk) * J;
          T s = T(0);
          // simd reduction reassociates in a fixed lane pattern, so results
          // stay run-to-run and thread-count identical
#pragma omp simd reduction(+ : s)
          for (int j = 0; j < J; ++j) s += grow[j] * crow[j];
          part[std::size_t(oc) * K + kk] = s;
        }
        T bs = T(0);
#pragma omp simd reduction(+ : bs)
        for (int j = 0; j < J; ++j) bs += grow[j];
        bpart[oc] = bs;
      }
    }
  }
  for (int n = 0; n < d.n; ++n) {
    const T* part = parts.data() + std::size_t(n) * d.out_ch * K;
    for (std::size_t i = 0; i < std::size_t(d.out_ch) * K; ++i) gw[i] += part[i];
    if (gbias) {
      const T* bpart = bparts.data() + std::size_t(n) * d.out_ch;
      for (int oc = 0; oc < d.out_ch; ++oc) gbias[oc] += bpart[oc];
    }
  }
}

template <class T>
void upsample2x_forward(int n, int c, int h, int w, const T* x, T* y) {
  const int oh = 2 * h, ow = 2 * w;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < n * c; ++nc) {
    const T* xc = x + std::size_t(nc) * h * w;
    T* yc = y + std::size_t(nc) * oh * ow;
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const T v = xc[std::size_t(iy) * w + ix];
        T* row0 = yc + std::size_t(2 * iy) * ow + 2 * ix;
        row0[0] = v;
        row0[1] = v;
        row0[ow] = v;
        row0[ow + 1] = v;
      }
  }
}

template <class T>
void upsample2x_backward(int n, int c, int h, int w, const T* gy, T* gx) {
  const int ow = 2 * w;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < n * c; ++nc) {
    const T* gyc = gy + std::size_t(nc) * 4 * h * w;
    T* gxc = gx + std::size_t(nc) * h * w;
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const T* row0 = gyc + std::size_t(2 * iy) * ow + 2 * ix;
        gxc[std::size_t(iy) * w + ix] = row0[0] + row0[1] + row0[ow] + row0[ow + 1];
      }
  }
}

}  // namespace qsynth::kern
