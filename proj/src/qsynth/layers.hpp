#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qsynth/core.hpp"
#include "qsynth/errors.hpp"
#include "qsynth/kernels.hpp"
#include "qsynth/rng.hpp"

namespace qsynth {

template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <class T>
using ParamList = std::vector<ParamRef<T>>;

// Fan-in scaled uniform init: U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
template <class T>
void init_fan_in(Rng& rng, Tensor<T>& w, int fan_in) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  for (auto& v : w.data) v = T(rng.uniform(-bound, bound));
}

template <class T>
struct Conv2d {
  int in_ch, out_ch, k, stride, pad;
  bool has_bias;
  Tensor<T> w, b, gw, gb;
  Tensor<T> x_saved;
  kern::ConvDims dims{};

  Conv2d(int in_ch_, int out_ch_, int k_, int stride_, int pad_, bool bias = true)
      : in_ch(in_ch_),
        out_ch(out_ch_),
        k(k_),
        stride(stride_),
        pad(pad_),
        has_bias(bias),
        w({out_ch_, in_ch_, k_, k_}),
        b({out_ch_}),
        gw({out_ch_, in_ch_, k_, k_}),
        gb({out_ch_}) {}

  void init(Rng& rng) {
    const int fan_in = in_ch * k * k;
    init_fan_in(rng, w, fan_in);
    if (has_bias) init_fan_in(rng, b, fan_in);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &w, &gw});
    if (has_bias) out.push_back({prefix + ".bias", &b, &gb});
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(1) != in_ch)
      throw validation_error("Conv2d: input channel mismatch");
    dims = kern::ConvDims::make(x.dim(0), in_ch, x.dim(2), x.dim(3), out_ch, k, stride, pad);
    x_saved = x;
    Tensor<T> y({dims.n, out_ch, dims.oh, dims.ow});
    kern::conv2d_forward(dims, x.ptr(), w.ptr(), has_bias ? b.ptr() : nullptr, y.ptr());
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, bool need_gx = true) {
    kern::conv2d_backward_weights(dims, x_saved.ptr(), gy.ptr(), gw.ptr(),
                                  has_bias ? gb.ptr() : nullptr);
    Tensor<T> gx;
    if (need_gx) {
      gx = Tensor<T>({dims.n, in_ch, dims.h, dims.w});
      kern::conv2d_backward_data(dims, gy.ptr(), w.ptr(), gx.ptr());
    }
    return gx;
  }
};

template <class T>
struct Linear {
  int in, out;
  Tensor<T> w, b, gw, gb;  // w is [out, in]
  Tensor<T> x_saved;

  Linear(int in_, int out_) : in(in_), out(out_), w({out_, in_}), b({out_}), gw({out_, in_}), gb({out_}) {}

  void init(Rng& rng) {
    init_fan_in(rng, w, in);
    init_fan_in(rng, b, in);
  }

  void collect(ParamList<T>& out_list, const std::string& prefix) {
    out_list.push_back({prefix + ".weight", &w, &gw});
    out_list.push_back({prefix + ".bias", &b, &gb});
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != in) throw validation_error("Linear: shape mismatch");
    x_saved = x;
    const int n = x.dim(0);
    Tensor<T> y({n, out});
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out; ++o) {
        T s = b.data[std::size_t(o)];
        const T* xr = x.ptr() + std::size_t(i) * in;
        const T* wr = w.ptr() + std::size_t(o) * in;
        for (int j = 0; j < in; ++j) s += wr[j] * xr[j];
        y.at2(i, o) = s;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = gy.dim(0);
    Tensor<T> gx({n, in});
    for (int i = 0; i < n; ++i) {
      const T* gr = gy.ptr() + std::size_t(i) * out;
      const T* xr = x_saved.ptr() + std::size_t(i) * in;
      T* gxr = gx.ptr() + std::size_t(i) * in;
      for (int o = 0; o < out; ++o) {
        const T g = gr[o];
        gb.data[std::size_t(o)] += g;
        T* gwr = gw.ptr() + std::size_t(o) * in;
        const T* wr = w.ptr() + std::size_t(o) * in;
        for (int j = 0; j < in; ++j) {
          gwr[j] += g * xr[j];
          gxr[j] += g * wr[j];
        }
      }
    }
    return gx;
  }
};

template <class T>
struct ReLU {
  Tensor<T> x_saved;
  Tensor<T> forward(const Tensor<T>& x) {
    x_saved = x;
    Tensor<T> y(x.shape);
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      y.data[std::size_t(i)] = x.data[std::size_t(i)] > T(0) ? x.data[std::size_t(i)] : T(0);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(gy.shape);
    const std::size_t n = gy.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      gx.data[std::size_t(i)] =
          x_saved.data[std::size_t(i)] > T(0) ? gy.data[std::size_t(i)] : T(0);
    return gx;
  }
};

template <class T>
struct LeakyReLU {
  T alpha;
  Tensor<T> x_saved;
  explicit LeakyReLU(T a = T(0.2)) : alpha(a) {}
  Tensor<T> forward(const Tensor<T>& x) {
    x_saved = x;
    Tensor<T> y(x.shape);
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i) {
      const T v = x.data[std::size_t(i)];
      y.data[std::size_t(i)] = v > T(0) ? v : alpha * v;
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(gy.shape);
    const std::size_t n = gy.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      gx.data[std::size_t(i)] =
          gy.data[std::size_t(i)] * (x_saved.data[std::size_t(i)] > T(0) ? T(1) : alpha);
    return gx;
  }
};

template <class T>
struct Sigmoid {
  Tensor<T> y_saved;
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      y.data[std::size_t(i)] = T(1) / (T(1) + std::exp(-x.data[std::size_t(i)]));
    y_saved = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(gy.shape);
    const std::size_t n = gy.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i) {
      const T s = y_saved.data[std::size_t(i)];
      gx.data[std::size_t(i)] = gy.data[std::size_t(i)] * s * (T(1) - s);
    }
    return gx;
  }
};

// Plain instance normalization, no affine parameters. Population statistics
// over the spatial extent, sigma stabilized as sqrt(var + eps).
template <class T>
struct InstanceNorm2d {
  T eps;
  Tensor<T> xhat, invstd;
  explicit InstanceNorm2d(T e = T(1e-5)) : eps(e) {}

  Tensor<T> forward(const Tensor<T>& x) {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    xhat = Tensor<T>(x.shape);
    invstd = Tensor<T>({n, c});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * c; ++nc) {
      const T* xp = x.ptr() + std::size_t(nc) * hw;
      T* xh = xhat.ptr() + std::size_t(nc) * hw;
      T mu = T(0);
      for (int i = 0; i < hw; ++i) mu += xp[i];
      mu /= T(hw);
      T var = T(0);
      for (int i = 0; i < hw; ++i) {
        const T d = xp[i] - mu;
        var += d * d;
      }
      var /= T(hw);
      const T inv = T(1) / std::sqrt(var + eps);
      invstd.data[std::size_t(nc)] = inv;
      for (int i = 0; i < hw; ++i) xh[i] = (xp[i] - mu) * inv;
    }
    return xhat;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = gy.dim(0), c = gy.dim(1), hw = gy.dim(2) * gy.dim(3);
    Tensor<T> gx(gy.shape);
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * c; ++nc) {
      const T* gp = gy.ptr() + std::size_t(nc) * hw;
      const T* xh = xhat.ptr() + std::size_t(nc) * hw;
      T* gxp = gx.ptr() + std::size_t(nc) * hw;
      const T inv = invstd.data[std::size_t(nc)];
      T mg = T(0), mgx = T(0);
      for (int i = 0; i < hw; ++i) {
        mg += gp[i];
        mgx += gp[i] * xh[i];
      }
      mg /= T(hw);
      mgx /= T(hw);
      for (int i = 0; i < hw; ++i) gxp[i] = inv * (gp[i] - mg - xh[i] * mgx);
    }
    return gx;
  }
};

// Central biasing instance normalization: (z - mu)/sigma + b_r(qhat), where
// b_r is an affine map from the q embedding to per-channel biases.
template <class T>
struct Cbin {
  int channels, q_dim;
  T eps;
  Tensor<T> w, c, gw, gc;  // w [C, q_dim], c [C]
  InstanceNorm2d<T> norm;
  Tensor<T> qhat_saved;
  Tensor<T> gsum;  // per (n, c) spatial sums of the output gradient

  Cbin(int channels_, int q_dim_, T e = T(1e-5))
      : channels(channels_),
        q_dim(q_dim_),
        eps(e),
        w({channels_, q_dim_}),
        c({channels_}),
        gw({channels_, q_dim_}),
        gc({channels_}),
        norm(e) {}

  void init(Rng& rng) {
    init_fan_in(rng, w, q_dim);
    init_fan_in(rng, c, q_dim);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".bias_weight", &w, &gw});
    out.push_back({prefix + ".bias_const", &c, &gc});
  }

  // b_r(qhat) for every sample/channel, [n, C].
  Tensor<T> bias_of(const Tensor<T>& qhat) const {
    const int n = qhat.dim(0);
    Tensor<T> out({n, channels});
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < channels; ++r) {
        T s = c.data[std::size_t(r)];
        const T* wr = w.ptr() + std::size_t(r) * q_dim;
        const T* qr = qhat.ptr() + std::size_t(i) * q_dim;
        for (int j = 0; j < q_dim; ++j) s += wr[j] * qr[j];
        out.at2(i, r) = s;
      }
    return out;
  }

  Tensor<T> forward(const Tensor<T>& z, const Tensor<T>& qhat) {
    if (z.dim(1) != channels || qhat.dim(1) != q_dim || z.dim(0) != qhat.dim(0))
      throw validation_error("Cbin: shape mismatch");
    if (z.dim(2) * z.dim(3) < 2) throw validation_error("Cbin: spatial size must be >= 2");
    qhat_saved = qhat;
    Tensor<T> y = norm.forward(z);
    const Tensor<T> bias = bias_of(qhat);
    const int n = z.dim(0), hw = z.dim(2) * z.dim(3);
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T bv = bias.data[std::size_t(nc)];
      T* yp = y.ptr() + std::size_t(nc) * hw;
      for (int i = 0; i < hw; ++i) yp[i] += bv;
    }
    return y;
  }

  // Adds this block's q-embedding gradient into gqhat.
  Tensor<T> backward(const Tensor<T>& gy, Tensor<T>& gqhat) {
    const int n = gy.dim(0), hw = gy.dim(2) * gy.dim(3);
    gsum = Tensor<T>({n, channels});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* gp = gy.ptr() + std::size_t(nc) * hw;
      T s = T(0);
      for (int i = 0; i < hw; ++i) s += gp[i];
      gsum.data[std::size_t(nc)] = s;
    }
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < channels; ++r) {
        const T g = gsum.at2(i, r);
        gc.data[std::size_t(r)] += g;
        T* gwr = gw.ptr() + std::size_t(r) * q_dim;
        const T* qr = qhat_saved.ptr() + std::size_t(i) * q_dim;
        const T* wr = w.ptr() + std::size_t(r) * q_dim;
        T* gqr = gqhat.ptr() + std::size_t(i) * q_dim;
        for (int j = 0; j < q_dim; ++j) {
          gwr[j] += g * qr[j];
          gqr[j] += g * wr[j];
        }
      }
    return norm.backward(gy);
  }
};

// Squeeze-excitation style channel attention with the residual form
// y = F + F (x) sigmoid(FC2(relu(FC1(gap(F))))).
template <class T>
struct ChannelAttention {
  int channels, hidden;
  Linear<T> fc1, fc2;
  ReLU<T> relu;
  Sigmoid<T> sig;
  Tensor<T> x_saved, weights_saved;  // weights [n, C]

  ChannelAttention(int channels_, int reduction)
      : channels(channels_),
        hidden(std::max(1, channels_ / reduction)),
        fc1(channels_, std::max(1, channels_ / reduction)),
        fc2(std::max(1, channels_ / reduction), channels_) {}

  void init(Rng& rng) {
    fc1.init(rng);
    fc2.init(rng);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  Tensor<T> forward(const Tensor<T>& x) {
    x_saved = x;
    const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
    Tensor<T> gap({n, channels});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* xp = x.ptr() + std::size_t(nc) * hw;
      T s = T(0);
      for (int i = 0; i < hw; ++i) s += xp[i];
      gap.data[std::size_t(nc)] = s / T(hw);
    }
    weights_saved = sig.forward(fc2.forward(relu.forward(fc1.forward(gap))));
    Tensor<T> y(x.shape);
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T scale = T(1) + weights_saved.data[std::size_t(nc)];
      const T* xp = x.ptr() + std::size_t(nc) * hw;
      T* yp = y.ptr() + std::size_t(nc) * hw;
      for (int i = 0; i < hw; ++i) yp[i] = xp[i] * scale;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = gy.dim(0), hw = gy.dim(2) * gy.dim(3);
    Tensor<T> gweights({n, channels});
    Tensor<T> gx(gy.shape);
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T scale = T(1) + weights_saved.data[std::size_t(nc)];
      const T* gp = gy.ptr() + std::size_t(nc) * hw;
      const T* xp = x_saved.ptr() + std::size_t(nc) * hw;
      T* gxp = gx.ptr() + std::size_t(nc) * hw;
      T acc = T(0);
      for (int i = 0; i < hw; ++i) {
        gxp[i] = gp[i] * scale;
        acc += gp[i] * xp[i];
      }
      gweights.data[std::size_t(nc)] = acc;
    }
    const Tensor<T> ggap = fc1.backward(relu.backward(fc2.backward(sig.backward(gweights))));
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T add = ggap.data[std::size_t(nc)] / T(hw);
      T* gxp = gx.ptr() + std::size_t(nc) * hw;
      for (int i = 0; i < hw; ++i) gxp[i] += add;
    }
    return gx;
  }
};

// Multi-modal attention fusion. Channel means of the three modality features
// form per-channel rows that pass through a shared two-layer map
// (relu then sigmoid) and a row softmax, giving a row-stochastic C x 3
// attention matrix. The shared fused term s = sum_k z_k (x) A[:,k] is added
// to every modality feature and the three results are mean-combined.
template <class T>
struct MmafFuse {
  int channels, hidden;
  Tensor<T> w1, b1, w2, b2;      // w1 [3, hidden], w2 [hidden, 3]
  Tensor<T> gw1, gb1, gw2, gb2;
  Tensor<T> z_saved[3];
  Tensor<T> m_saved;             // [n, C, 3]
  Tensor<T> pre1_saved, l_saved; // [n, C, hidden], [n, C, 3]
  Tensor<T> a_saved;             // [n, C, 3]

  explicit MmafFuse(int channels_, int hidden_ = 16)
      : channels(channels_),
        hidden(hidden_),
        w1({3, hidden_}),
        b1({hidden_}),
        w2({hidden_, 3}),
        b2({3}),
        gw1({3, hidden_}),
        gb1({hidden_}),
        gw2({hidden_, 3}),
        gb2({3}) {}

  void init(Rng& rng) {
    init_fan_in(rng, w1, 3);
    init_fan_in(rng, b1, 3);
    init_fan_in(rng, w2, hidden);
    init_fan_in(rng, b2, hidden);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".w1", &w1, &gw1});
    out.push_back({prefix + ".b1", &b1, &gb1});
    out.push_back({prefix + ".w2", &w2, &gw2});
    out.push_back({prefix + ".b2", &b2, &gb2});
  }

  // Returns the fused feature; attention() exposes A from the last forward.
  Tensor<T> forward(const Tensor<T>& z0, const Tensor<T>& z1, const Tensor<T>& z2) {
    if (!same_shape(z0, z1) || !same_shape(z0, z2))
      throw validation_error("MmafFuse: feature shapes differ");
    if (z0.dim(1) != channels) throw validation_error("MmafFuse: channel mismatch");
    z_saved[0] = z0;
    z_saved[1] = z1;
    z_saved[2] = z2;
    const int n = z0.dim(0), hw = z0.dim(2) * z0.dim(3);

    m_saved = Tensor<T>({n, channels, 3});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc)
      for (int k = 0; k < 3; ++k) {
        const T* zp = z_saved[k].ptr() + std::size_t(nc) * hw;
        T s = T(0);
        for (int i = 0; i < hw; ++i) s += zp[i];
        m_saved.data[std::size_t(nc) * 3 + k] = s / T(hw);
      }

    pre1_saved = Tensor<T>({n, channels, hidden});
    l_saved = Tensor<T>({n, channels, 3});
    a_saved = Tensor<T>({n, channels, 3});
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* m = m_saved.ptr() + std::size_t(nc) * 3;
      T* pre1 = pre1_saved.ptr() + std::size_t(nc) * hidden;
      for (int j = 0; j < hidden; ++j) {
        T s = b1.data[std::size_t(j)];
        for (int k = 0; k < 3; ++k) s += m[k] * w1.at2(k, j);
        pre1[j] = s;
      }
      T* l = l_saved.ptr() + std::size_t(nc) * 3;
      for (int k = 0; k < 3; ++k) {
        T s = b2.data[std::size_t(k)];
        for (int j = 0; j < hidden; ++j)
          s += (pre1[j] > T(0) ? pre1[j] : T(0)) * w2.at2(j, k);
        l[k] = T(1) / (T(1) + std::exp(-s));
      }
      T* a = a_saved.ptr() + std::size_t(nc) * 3;
      const T lmax = std::max(l[0], std::max(l[1], l[2]));
      T denom = T(0);
      for (int k = 0; k < 3; ++k) {
        a[k] = std::exp(l[k] - lmax);
        denom += a[k];
      }
      for (int k = 0; k < 3; ++k) a[k] /= denom;
    }

    Tensor<T> z(z0.shape);
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* a = a_saved.ptr() + std::size_t(nc) * 3;
      const T* p0 = z_saved[0].ptr() + std::size_t(nc) * hw;
      const T* p1 = z_saved[1].ptr() + std::size_t(nc) * hw;
      const T* p2 = z_saved[2].ptr() + std::size_t(nc) * hw;
      T* zp = z.ptr() + std::size_t(nc) * hw;
      const T third = T(1) / T(3);
      for (int i = 0; i < hw; ++i) {
        const T s = a[0] * p0[i] + a[1] * p1[i] + a[2] * p2[i];
        zp[i] = (p0[i] + p1[i] + p2[i]) * third + s;
      }
    }
    return z;
  }

  const Tensor<T>& attention() const { return a_saved; }

  void backward(const Tensor<T>& gz, Tensor<T>& gz0, Tensor<T>& gz1, Tensor<T>& gz2) {
    const int n = gz.dim(0), hw = gz.dim(2) * gz.dim(3);
    Tensor<T>* gzk[3] = {&gz0, &gz1, &gz2};
    for (int k = 0; k < 3; ++k) *gzk[k] = Tensor<T>(gz.shape);

    Tensor<T> ga({n, channels, 3});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* gp = gz.ptr() + std::size_t(nc) * hw;
      const T* a = a_saved.ptr() + std::size_t(nc) * 3;
      const T third = T(1) / T(3);
      for (int k = 0; k < 3; ++k) {
        const T* zp = z_saved[k].ptr() + std::size_t(nc) * hw;
        T* gout = gzk[k]->ptr() + std::size_t(nc) * hw;
        T acc = T(0);
        for (int i = 0; i < hw; ++i) {
          gout[i] = gp[i] * (third + a[k]);
          acc += gp[i] * zp[i];
        }
        ga.data[std::size_t(nc) * 3 + k] = acc;
      }
    }

    // Attention-path chain; small, done serially in fixed order.
    Tensor<T> gm({n, channels, 3});
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* a = a_saved.ptr() + std::size_t(nc) * 3;
      const T* gap = ga.ptr() + std::size_t(nc) * 3;
      T dot = T(0);
      for (int k = 0; k < 3; ++k) dot += gap[k] * a[k];
      T gl[3];
      for (int k = 0; k < 3; ++k) gl[k] = a[k] * (gap[k] - dot);
      const T* l = l_saved.ptr() + std::size_t(nc) * 3;
      T gpre2[3];
      for (int k = 0; k < 3; ++k) gpre2[k] = gl[k] * l[k] * (T(1) - l[k]);
      const T* pre1 = pre1_saved.ptr() + std::size_t(nc) * hidden;
      T* gmp = gm.ptr() + std::size_t(nc) * 3;
      for (int k = 0; k < 3; ++k) gb2.data[std::size_t(k)] += gpre2[k];
      std::vector<T> gh(std::size_t(hidden), T(0));
      for (int j = 0; j < hidden; ++j) {
        const T hj = pre1[j] > T(0) ? pre1[j] : T(0);
        T s = T(0);
        for (int k = 0; k < 3; ++k) {
          gw2.at2(j, k) += hj * gpre2[k];
          s += w2.at2(j, k) * gpre2[k];
        }
        gh[std::size_t(j)] = pre1[j] > T(0) ? s : T(0);
      }
      const T* m = m_saved.ptr() + std::size_t(nc) * 3;
      for (int k = 0; k < 3; ++k) gmp[k] = T(0);
      for (int j = 0; j < hidden; ++j) {
        gb1.data[std::size_t(j)] += gh[std::size_t(j)];
        for (int k = 0; k < 3; ++k) {
          gw1.at2(k, j) += m[k] * gh[std::size_t(j)];
          gmp[k] += w1.at2(k, j) * gh[std::size_t(j)];
        }
      }
    }

#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * channels; ++nc) {
      const T* gmp = gm.ptr() + std::size_t(nc) * 3;
      for (int k = 0; k < 3; ++k) {
        const T add = gmp[k] / T(hw);
        T* gout = gzk[k]->ptr() + std::size_t(nc) * hw;
        for (int i = 0; i < hw; ++i) gout[i] += add;
      }
    }
  }
};

// Two-layer q-space embedding: (gx, gy, gz, b_norm) -> relu FC -> FC.
template <class T>
struct QEmbed {
  int out_dim, hidden;
  Linear<T> l1, l2;
  ReLU<T> relu;

  explicit QEmbed(int out_dim_, int hidden_ = 64)
      : out_dim(out_dim_), hidden(hidden_), l1(4, hidden_), l2(hidden_, out_dim_) {}

  void init(Rng& rng) {
    l1.init(rng);
    l2.init(rng);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    l1.collect(out, prefix + ".fc1");
    l2.collect(out, prefix + ".fc2");
  }

  static void validate_q(const Tensor<T>& q) {
    if (q.rank() != 2 || q.dim(1) != 4) throw validation_error("QEmbed: q must be [n, 4]");
    const T tol_unit = sizeof(T) == 4 ? T(1e-4) : T(1e-9);
    for (int i = 0; i < q.dim(0); ++i) {
      const T* r = q.ptr() + std::size_t(i) * 4;
      const T bn = r[3];
      if (!(bn >= T(0) && bn <= T(1)))
        throw validation_error("QEmbed: b_norm outside [0, 1] (unnormalized b-value?)");
      const T nrm = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
      if (nrm < T(0.5)) {
        if (nrm > tol_unit || bn > T(0))
          throw validation_error("QEmbed: zero direction requires b_norm = 0");
      } else if (std::abs(nrm - T(1)) > tol_unit) {
        throw validation_error("QEmbed: gradient direction is not unit length");
      }
    }
  }

  Tensor<T> forward(const Tensor<T>& q) {
    validate_q(q);
    return l2.forward(relu.forward(l1.forward(q)));
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    return l1.backward(relu.backward(l2.backward(gout)));
  }
};

// Conditional projection on a global feature vector:
// score = qhat^T V feat + xi(feat), with xi affine.
template <class T>
struct ProjectionHead {
  int feat_dim, q_dim;
  Tensor<T> v, gv;        // [q_dim, feat_dim]
  Tensor<T> xw, gxw;      // [feat_dim]
  Tensor<T> xb, gxb;      // [1]
  Tensor<T> feat_saved, qhat_saved;

  ProjectionHead(int feat_dim_, int q_dim_)
      : feat_dim(feat_dim_),
        q_dim(q_dim_),
        v({q_dim_, feat_dim_}),
        gv({q_dim_, feat_dim_}),
        xw({feat_dim_}),
        gxw({feat_dim_}),
        xb({1}),
        gxb({1}) {}

  void init(Rng& rng) {
    init_fan_in(rng, v, feat_dim);
    init_fan_in(rng, xw, feat_dim);
    init_fan_in(rng, xb, feat_dim);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".v", &v, &gv});
    out.push_back({prefix + ".xi_weight", &xw, &gxw});
    out.push_back({prefix + ".xi_bias", &xb, &gxb});
  }

  Tensor<T> forward(const Tensor<T>& feat, const Tensor<T>& qhat) {
    feat_saved = feat;
    qhat_saved = qhat;
    const int n = feat.dim(0);
    Tensor<T> score({n});
    for (int i = 0; i < n; ++i) {
      const T* f = feat.ptr() + std::size_t(i) * feat_dim;
      const T* q = qhat.ptr() + std::size_t(i) * q_dim;
      T s = xb.data[0];
      for (int j = 0; j < feat_dim; ++j) s += xw.data[std::size_t(j)] * f[j];
      for (int r = 0; r < q_dim; ++r) {
        const T* vr = v.ptr() + std::size_t(r) * feat_dim;
        T d = T(0);
        for (int j = 0; j < feat_dim; ++j) d += vr[j] * f[j];
        s += q[r] * d;
      }
      score.data[std::size_t(i)] = s;
    }
    return score;
  }

  void backward(const Tensor<T>& gscore, Tensor<T>& gfeat, Tensor<T>& gqhat) {
    const int n = gscore.dim(0);
    for (int i = 0; i < n; ++i) {
      const T g = gscore.data[std::size_t(i)];
      const T* f = feat_saved.ptr() + std::size_t(i) * feat_dim;
      const T* q = qhat_saved.ptr() + std::size_t(i) * q_dim;
      T* gf = gfeat.ptr() + std::size_t(i) * feat_dim;
      T* gq = gqhat.ptr() + std::size_t(i) * q_dim;
      gxb.data[0] += g;
      for (int j = 0; j < feat_dim; ++j) {
        gxw.data[std::size_t(j)] += g * f[j];
        gf[j] += g * xw.data[std::size_t(j)];
      }
      for (int r = 0; r < q_dim; ++r) {
        const T* vr = v.ptr() + std::size_t(r) * feat_dim;
        T* gvr = gv.ptr() + std::size_t(r) * feat_dim;
        T d = T(0);
        for (int j = 0; j < feat_dim; ++j) {
          d += vr[j] * f[j];
          gvr[j] += g * q[r] * f[j];
          gf[j] += g * q[r] * vr[j];
        }
        gq[r] += g * d;
      }
    }
  }
};

// Per-pixel variant: map(h, w) = qhat^T V feat(:, h, w) + xi(feat(:, h, w)).
template <class T>
struct PixelProjectionHead {
  int feat_dim, q_dim;
  Tensor<T> v, gv, xw, gxw, xb, gxb;
  Tensor<T> feat_saved, qhat_saved;

  PixelProjectionHead(int feat_dim_, int q_dim_)
      : feat_dim(feat_dim_),
        q_dim(q_dim_),
        v({q_dim_, feat_dim_}),
        gv({q_dim_, feat_dim_}),
        xw({feat_dim_}),
        gxw({feat_dim_}),
        xb({1}),
        gxb({1}) {}

  void init(Rng& rng) {
    init_fan_in(rng, v, feat_dim);
    init_fan_in(rng, xw, feat_dim);
    init_fan_in(rng, xb, feat_dim);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".v", &v, &gv});
    out.push_back({prefix + ".xi_weight", &xw, &gxw});
    out.push_back({prefix + ".xi_bias", &xb, &gxb});
  }

  Tensor<T> forward(const Tensor<T>& feat, const Tensor<T>& qhat) {
    feat_saved = feat;
    qhat_saved = qhat;
    const int n = feat.dim(0), h = feat.dim(2), w = feat.dim(3), hw = h * w;
    Tensor<T> map({n, h, w});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const T* q = qhat.ptr() + std::size_t(i) * q_dim;
      // p = V^T qhat + xi_weight, shared by all pixels of the sample
      std::vector<T> p(std::size_t(feat_dim), T(0));
      for (int j = 0; j < feat_dim; ++j) p[std::size_t(j)] = xw.data[std::size_t(j)];
      for (int r = 0; r < q_dim; ++r) {
        const T* vr = v.ptr() + std::size_t(r) * feat_dim;
        for (int j = 0; j < feat_dim; ++j) p[std::size_t(j)] += q[r] * vr[j];
      }
      const T* fbase = feat.ptr() + std::size_t(i) * feat_dim * hw;
      T* mp = map.ptr() + std::size_t(i) * hw;
      for (int pix = 0; pix < hw; ++pix) mp[pix] = xb.data[0];
      for (int j = 0; j < feat_dim; ++j) {
        const T pj = p[std::size_t(j)];
        const T* fj = fbase + std::size_t(j) * hw;
        for (int pix = 0; pix < hw; ++pix) mp[pix] += pj * fj[pix];
      }
    }
    return map;
  }

  void backward(const Tensor<T>& gmap, Tensor<T>& gfeat, Tensor<T>& gqhat) {
    const int n = gmap.dim(0), hw = gmap.dim(1) * gmap.dim(2);
    // per-sample reduction u[j] = sum_pix gmap * feat_j, then ordered updates
    Tensor<T> u({n, feat_dim});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const T* gm = gmap.ptr() + std::size_t(i) * hw;
      const T* fbase = feat_saved.ptr() + std::size_t(i) * feat_dim * hw;
      const T* q = qhat_saved.ptr() + std::size_t(i) * q_dim;
      std::vector<T> p(std::size_t(feat_dim), T(0));
      for (int j = 0; j < feat_dim; ++j) p[std::size_t(j)] = xw.data[std::size_t(j)];
      for (int r = 0; r < q_dim; ++r) {
        const T* vr = v.ptr() + std::size_t(r) * feat_dim;
        for (int j = 0; j < feat_dim; ++j) p[std::size_t(j)] += q[r] * vr[j];
      }
      T* gf = gfeat.ptr() + std::size_t(i) * feat_dim * hw;
      for (int j = 0; j < feat_dim; ++j) {
        const T* fj = fbase + std::size_t(j) * hw;
        T* gfj = gf + std::size_t(j) * hw;
        const T pj = p[std::size_t(j)];
        T acc = T(0);
        for (int pix = 0; pix < hw; ++pix) {
          gfj[pix] += gm[pix] * pj;
          acc += gm[pix] * fj[pix];
        }
        u.at2(i, j) = acc;
      }
    }
    for (int i = 0; i < n; ++i) {
      const T* gm = gmap.ptr() + std::size_t(i) * hw;
      T gsum = T(0);
      for (int pix = 0; pix < hw; ++pix) gsum += gm[pix];
      gxb.data[0] += gsum;
      const T* q = qhat_saved.ptr() + std::size_t(i) * q_dim;
      T* gq = gqhat.ptr() + std::size_t(i) * q_dim;
      for (int j = 0; j < feat_dim; ++j) {
        const T uj = u.at2(i, j);
        gxw.data[std::size_t(j)] += uj;
        for (int r = 0; r < q_dim; ++r) {
          gv.at2(r, j) += q[r] * uj;
          gq[r] += v.at2(r, j) * uj;
        }
      }
    }
  }
};

// Mirror padding (reflect-101). Keeps spatially constant inputs constant,
// which zero padding would break at the borders.
template <class T>
struct ReflectPad2d {
  int pad;
  int h = 0, w = 0;
  explicit ReflectPad2d(int p) : pad(p) {}

  static int reflect(int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    h = x.dim(2);
    w = x.dim(3);
    if (h < 2 || w < 2) throw validation_error("ReflectPad2d: input too small");
    const int n = x.dim(0), c = x.dim(1);
    Tensor<T> y({n, c, h + 2 * pad, w + 2 * pad});
    const int oh = h + 2 * pad, ow = w + 2 * pad;
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * c; ++nc) {
      const T* xp = x.ptr() + std::size_t(nc) * h * w;
      T* yp = y.ptr() + std::size_t(nc) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = reflect(oy - pad, h);
        for (int ox = 0; ox < ow; ++ox)
          yp[std::size_t(oy) * ow + ox] = xp[std::size_t(iy) * w + reflect(ox - pad, w)];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = gy.dim(0), c = gy.dim(1), oh = gy.dim(2), ow = gy.dim(3);
    Tensor<T> gx({n, c, h, w});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < n * c; ++nc) {
      const T* gp = gy.ptr() + std::size_t(nc) * oh * ow;
      T* gxp = gx.ptr() + std::size_t(nc) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = reflect(oy - pad, h);
        for (int ox = 0; ox < ow; ++ox)
          gxp[std::size_t(iy) * w + reflect(ox - pad, w)] += gp[std::size_t(oy) * ow + ox];
      }
    }
    return gx;
  }
};

template <class T>
struct Upsample2x {
  int h = 0, w = 0;
  Tensor<T> forward(const Tensor<T>& x) {
    h = x.dim(2);
    w = x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
    kern::upsample2x_forward(x.dim(0), x.dim(1), h, w, x.ptr(), y.ptr());
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx({gy.dim(0), gy.dim(1), h, w});
    kern::upsample2x_backward(gy.dim(0), gy.dim(1), h, w, gy.ptr(), gx.ptr());
    return gx;
  }
};

}  // namespace qsynth
