#pragma once

#include <cmath>
#include <string>

#include "qsynth/model.hpp"

namespace qsynth {

struct LossWeights {
  double lambda_rec = 100.0;
  double lambda_ac = 100.0;
};

// Whether the pixel branch reduces the map to one logit before the log-loss
// (default) or averages per-pixel losses instead.
enum class PixelAdvMode { mean_logit, per_pixel };

template <class T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T logistic(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
void check_finite_logits(const DiscOutput<T>& out, const char* who) {
  const int n = out.global_score.dim(0);
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(double(out.global_score.data[std::size_t(i)])))
      throw numeric_error(std::string(who) + ": non-finite global logit at batch index " +
                          std::to_string(i));
  }
  const std::size_t hw = out.pixel_map.numel() / std::size_t(n);
  for (int i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hw; ++j)
      if (!std::isfinite(double(out.pixel_map.data[std::size_t(i) * hw + j])))
        throw numeric_error(std::string(who) + ": non-finite pixel logit at batch index " +
                            std::to_string(i));
}

template <class T>
struct AdvLossD {
  T value;
  DiscOutput<T> grad_real, grad_fake;
};

template <class T>
struct AdvLossG {
  T value;
  DiscOutput<T> grad_fake;
};

namespace detail {

// Per-branch loss pieces. For a batch of logits x with role `real`:
// loss contribution mean_n softplus(-x) (real) or mean_n softplus(x) (fake);
// d/dx = (sigma(x) - 1)/n or sigma(x)/n.
template <class T>
T branch_loss_d(const T* logits, int n, bool real, T* grad) {
  T acc = T(0);
  for (int i = 0; i < n; ++i) {
    const T x = logits[i];
    acc += real ? softplus(-x) : softplus(x);
    grad[i] = (logistic(x) - (real ? T(1) : T(0))) / T(n);
  }
  return acc / T(n);
}

template <class T>
T branch_loss_g(const T* logits, int n, T* grad) {
  T acc = T(0);
  for (int i = 0; i < n; ++i) {
    const T x = logits[i];
    acc += softplus(-x);
    grad[i] = (logistic(x) - T(1)) / T(n);
  }
  return acc / T(n);
}

// Reduce a pixel map to per-sample mean logits; scatter grads back evenly.
template <class T>
Tensor<T> map_means(const Tensor<T>& map) {
  const int n = map.dim(0);
  const std::size_t hw = map.numel() / std::size_t(n);
  Tensor<T> out({n});
  for (int i = 0; i < n; ++i) {
    T s = T(0);
    const T* p = map.ptr() + std::size_t(i) * hw;
    for (std::size_t j = 0; j < hw; ++j) s += p[j];
    out.data[std::size_t(i)] = s / T(hw);
  }
  return out;
}

template <class T>
void spread_map_grad(const Tensor<T>& gmean, Tensor<T>& gmap) {
  const int n = gmean.dim(0);
  const std::size_t hw = gmap.numel() / std::size_t(n);
  for (int i = 0; i < n; ++i) {
    const T g = gmean.data[std::size_t(i)] / T(hw);
    T* p = gmap.ptr() + std::size_t(i) * hw;
    for (std::size_t j = 0; j < hw; ++j) p[j] = g;
  }
}

}  // namespace detail

// Discriminator objective, both branches, standard orientation: real logits
// pushed up, fake logits pushed down. Per branch:
// -[log sigma(real) + log(1 - sigma(fake))] averaged over the batch.
template <class T>
AdvLossD<T> adv_loss_d(const DiscOutput<T>& real, const DiscOutput<T>& fake,
                       PixelAdvMode mode = PixelAdvMode::mean_logit) {
  check_finite_logits(real, "adv_loss_d(real)");
  check_finite_logits(fake, "adv_loss_d(fake)");
  const int n = real.global_score.dim(0);
  AdvLossD<T> out;
  out.grad_real.global_score = Tensor<T>({n});
  out.grad_fake.global_score = Tensor<T>({n});
  out.grad_real.pixel_map = Tensor<T>(real.pixel_map.shape);
  out.grad_fake.pixel_map = Tensor<T>(fake.pixel_map.shape);

  T loss = detail::branch_loss_d(real.global_score.ptr(), n, true,
                                 out.grad_real.global_score.ptr());
  loss += detail::branch_loss_d(fake.global_score.ptr(), n, false,
                                out.grad_fake.global_score.ptr());

  if (mode == PixelAdvMode::mean_logit) {
    const Tensor<T> rm = detail::map_means(real.pixel_map);
    const Tensor<T> fm = detail::map_means(fake.pixel_map);
    Tensor<T> grm({n}), gfm({n});
    loss += detail::branch_loss_d(rm.ptr(), n, true, grm.ptr());
    loss += detail::branch_loss_d(fm.ptr(), n, false, gfm.ptr());
    detail::spread_map_grad(grm, out.grad_real.pixel_map);
    detail::spread_map_grad(gfm, out.grad_fake.pixel_map);
  } else {
    const std::size_t total = real.pixel_map.numel();
    T accr = T(0), accf = T(0);
    for (std::size_t i = 0; i < total; ++i) {
      const T r = real.pixel_map.data[i];
      const T f = fake.pixel_map.data[i];
      accr += softplus(-r);
      accf += softplus(f);
      out.grad_real.pixel_map.data[i] = (logistic(r) - T(1)) / T(total);
      out.grad_fake.pixel_map.data[i] = logistic(f) / T(total);
    }
    loss += accr / T(total) + accf / T(total);
  }
  out.value = loss;
  return out;
}

// Non-saturating generator objective: -log sigma(fake) summed over branches.
template <class T>
AdvLossG<T> adv_loss_g(const DiscOutput<T>& fake,
                       PixelAdvMode mode = PixelAdvMode::mean_logit) {
  check_finite_logits(fake, "adv_loss_g");
  const int n = fake.global_score.dim(0);
  AdvLossG<T> out;
  out.grad_fake.global_score = Tensor<T>({n});
  out.grad_fake.pixel_map = Tensor<T>(fake.pixel_map.shape);

  T loss = detail::branch_loss_g(fake.global_score.ptr(), n,
                                 out.grad_fake.global_score.ptr());
  if (mode == PixelAdvMode::mean_logit) {
    const Tensor<T> fm = detail::map_means(fake.pixel_map);
    Tensor<T> gfm({n});
    loss += detail::branch_loss_g(fm.ptr(), n, gfm.ptr());
    detail::spread_map_grad(gfm, out.grad_fake.pixel_map);
  } else {
    const std::size_t total = fake.pixel_map.numel();
    T acc = T(0);
    for (std::size_t i = 0; i < total; ++i) {
      const T f = fake.pixel_map.data[i];
      acc += softplus(-f);
      out.grad_fake.pixel_map.data[i] = (logistic(f) - T(1)) / T(total);
    }
    loss += acc / T(total);
  }
  out.value = loss;
  return out;
}

// Mean absolute error. The caller passes the b0 slice as target when q has
// b = 0 (the b-aware target rule).
template <class T>
T rec_loss(const Tensor<T>& x, const Tensor<T>& target, Tensor<T>* grad = nullptr) {
  if (!same_shape(x, target)) throw validation_error("rec_loss: shape mismatch");
  const std::size_t n = x.numel();
  if (n == 0) throw validation_error("rec_loss: empty input");
  T acc = T(0);
  if (grad) *grad = Tensor<T>(x.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x.data[i] - target.data[i];
    acc += std::abs(d);
    if (grad) grad->data[i] = (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))) / T(n);
  }
  return acc / T(n);
}

// Frozen convolutional feature extractor for the anatomical-consistency
// loss: 1 -> 16 -> 32 -> 64 channels, 3x3 stride-2 convs, ReLU, no biases,
// reflect padding, fixed-seed init. Bias-free linear layers plus ReLU keep
// the features positively homogeneous, so the normalized similarity map is
// exactly invariant to global positive input scaling; reflect padding keeps
// constant images constant through every layer.
template <class T>
struct FeatureExtractor {
  ReflectPad2d<T> p1, p2, p3;
  Conv2d<T> c1, c2, c3;
  ReLU<T> r1, r2, r3;

  explicit FeatureExtractor(std::uint64_t seed = 0x51e55ULL)
      : p1(1),
        p2(1),
        p3(1),
        c1(1, 16, 3, 2, 0, false),
        c2(16, 32, 3, 2, 0, false),
        c3(32, 64, 3, 2, 0, false) {
    Rng rng(seed);
    c1.init(rng);
    c2.init(rng);
    c3.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> t = r1.forward(c1.forward(p1.forward(x)));
    t = r2.forward(c2.forward(p2.forward(t)));
    return r3.forward(c3.forward(p3.forward(t)));
  }

  Tensor<T> backward(const Tensor<T>& gf) {
    Tensor<T> g = p3.backward(c3.backward(r3.backward(gf)));
    g = p2.backward(c2.backward(r2.backward(g)));
    return p1.backward(c1.backward(r1.backward(g)));
  }
};

// Normalized patch self-similarity. For each feature location (query), the
// inner products of its L2-normalized feature against all locations of a
// patch x patch window (clamped to stay inside the map) form one row.
template <class T>
struct SimilarityMap {
  Tensor<T> values;  // [n, fh*fw, win_h*win_w]
  int fh = 0, fw = 0;
  int win_h = 0, win_w = 0;
};

namespace detail {

template <class T>
Tensor<T> l2_normalize_locations(const Tensor<T>& f, Tensor<T>* inv_norms = nullptr) {
  const int n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  Tensor<T> out(f.shape);
  if (inv_norms) *inv_norms = Tensor<T>({n, f.dim(2), f.dim(3)});
  for (int i = 0; i < n; ++i) {
    const T* fb = f.ptr() + std::size_t(i) * c * hw;
    T* ob = out.ptr() + std::size_t(i) * c * hw;
    for (int p = 0; p < hw; ++p) {
      T s = T(0);
      for (int ch = 0; ch < c; ++ch) {
        const T v = fb[std::size_t(ch) * hw + p];
        s += v * v;
      }
      const T inv = T(1) / std::max(std::sqrt(s), T(1e-12));
      if (inv_norms) inv_norms->data[std::size_t(i) * hw + p] = inv;
      for (int ch = 0; ch < c; ++ch)
        ob[std::size_t(ch) * hw + p] = fb[std::size_t(ch) * hw + p] * inv;
    }
  }
  return out;
}

inline void window_start(int q, int size, int patch, int& start, int& len) {
  len = std::min(patch, size);
  start = std::clamp(q - patch / 2, 0, size - len);
}

template <class T>
SimilarityMap<T> similarity_from_normalized(const Tensor<T>& fn, int patch) {
  const int n = fn.dim(0), c = fn.dim(1), fh = fn.dim(2), fw = fn.dim(3);
  const int hw = fh * fw;
  const int wh = std::min(patch, fh), ww = std::min(patch, fw);
  SimilarityMap<T> sm;
  sm.fh = fh;
  sm.fw = fw;
  sm.win_h = wh;
  sm.win_w = ww;
  sm.values = Tensor<T>({n, hw, wh * ww});
  for (int i = 0; i < n; ++i) {
    const T* fb = fn.ptr() + std::size_t(i) * c * hw;
    for (int qy = 0; qy < fh; ++qy)
      for (int qx = 0; qx < fw; ++qx) {
        int sy, sx, lh, lw;
        window_start(qy, fh, patch, sy, lh);
        window_start(qx, fw, patch, sx, lw);
        const int q = qy * fw + qx;
        T* row = sm.values.ptr() + (std::size_t(i) * hw + std::size_t(q)) * wh * ww;
        for (int oy = 0; oy < lh; ++oy)
          for (int ox = 0; ox < lw; ++ox) {
            const int p = (sy + oy) * fw + (sx + ox);
            T s = T(0);
            for (int ch = 0; ch < c; ++ch)
              s += fb[std::size_t(ch) * hw + q] * fb[std::size_t(ch) * hw + p];
            row[oy * ww + ox] = s;
          }
      }
  }
  return sm;
}

}  // namespace detail

template <class T>
SimilarityMap<T> self_similarity_map(const Tensor<T>& x, FeatureExtractor<T>& extractor,
                                     int patch = 8) {
  if (x.dim(2) < patch || x.dim(3) < patch)
    throw validation_error("self_similarity_map: image smaller than patch");
  const Tensor<T> f = extractor.forward(x);
  const Tensor<T> fn = detail::l2_normalize_locations(f);
  return detail::similarity_from_normalized(fn, patch);
}

// L1 distance between the self-similarity maps of x and ref. Symmetric in
// its image arguments; the gradient is returned for x only.
template <class T>
T ac_loss(const Tensor<T>& x, const Tensor<T>& ref, FeatureExtractor<T>& extractor,
          Tensor<T>* grad_x = nullptr, int patch = 8) {
  if (!same_shape(x, ref)) throw validation_error("ac_loss: shape mismatch");
  if (x.dim(2) < patch || x.dim(3) < patch)
    throw validation_error("ac_loss: image smaller than patch");

  const SimilarityMap<T> sm_ref = self_similarity_map(ref, extractor, patch);

  const Tensor<T> f = extractor.forward(x);  // extractor state now belongs to x
  Tensor<T> inv_norms;
  const Tensor<T> fn = detail::l2_normalize_locations(f, &inv_norms);
  const SimilarityMap<T> sm_x = detail::similarity_from_normalized(fn, patch);

  const std::size_t total = sm_x.values.numel();
  T acc = T(0);
  Tensor<T> gsim(sm_x.values.shape);
  for (std::size_t i = 0; i < total; ++i) {
    const T d = sm_x.values.data[i] - sm_ref.values.data[i];
    acc += std::abs(d);
    gsim.data[i] = (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))) / T(total);
  }
  const T loss = acc / T(total);
  if (!grad_x) return loss;

  // Backprop: similarity rows -> normalized features -> features -> image.
  const int n = fn.dim(0), c = fn.dim(1), fh = fn.dim(2), fw = fn.dim(3);
  const int hw = fh * fw;
  const int wh = sm_x.win_h, ww = sm_x.win_w;
  Tensor<T> gfn(fn.shape);
  for (int i = 0; i < n; ++i) {
    const T* fb = fn.ptr() + std::size_t(i) * c * hw;
    T* gb = gfn.ptr() + std::size_t(i) * c * hw;
    for (int qy = 0; qy < fh; ++qy)
      for (int qx = 0; qx < fw; ++qx) {
        int sy, sx, lh, lw;
        detail::window_start(qy, fh, patch, sy, lh);
        detail::window_start(qx, fw, patch, sx, lw);
        const int q = qy * fw + qx;
        const T* grow = gsim.ptr() + (std::size_t(i) * hw + std::size_t(q)) * wh * ww;
        for (int oy = 0; oy < lh; ++oy)
          for (int ox = 0; ox < lw; ++ox) {
            const T g = grow[oy * ww + ox];
            if (g == T(0)) continue;
            const int p = (sy + oy) * fw + (sx + ox);
            for (int ch = 0; ch < c; ++ch) {
              gb[std::size_t(ch) * hw + q] += g * fb[std::size_t(ch) * hw + p];
              gb[std::size_t(ch) * hw + p] += g * fb[std::size_t(ch) * hw + q];
            }
          }
      }
  }
  // Through the normalization: gf = inv * (g - fn * (g . fn)).
  Tensor<T> gf(f.shape);
  for (int i = 0; i < n; ++i) {
    const T* fnp = fn.ptr() + std::size_t(i) * c * hw;
    const T* gp = gfn.ptr() + std::size_t(i) * c * hw;
    T* gfp = gf.ptr() + std::size_t(i) * c * hw;
    for (int p = 0; p < hw; ++p) {
      T dot = T(0);
      for (int ch = 0; ch < c; ++ch)
        dot += gp[std::size_t(ch) * hw + p] * fnp[std::size_t(ch) * hw + p];
      const T inv = inv_norms.data[std::size_t(i) * hw + p];
      for (int ch = 0; ch < c; ++ch)
        gfp[std::size_t(ch) * hw + p] =
            inv * (gp[std::size_t(ch) * hw + p] - fnp[std::size_t(ch) * hw + p] * dot);
    }
  }
  *grad_x = extractor.backward(gf);
  return loss;
}

// L = L_adv + lambda_rec * L_rec + lambda_ac * L_ac.
template <class T>
T total_loss(T adv, T rec, T ac, const LossWeights& w) {
  if (!std::isfinite(double(adv))) throw numeric_error("total_loss: non-finite adversarial term");
  if (!std::isfinite(double(rec))) throw numeric_error("total_loss: non-finite reconstruction term");
  if (!std::isfinite(double(ac))) throw numeric_error("total_loss: non-finite consistency term");
  return adv + T(w.lambda_rec) * rec + T(w.lambda_ac) * ac;
}

}  // namespace qsynth
