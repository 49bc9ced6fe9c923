#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qsynth/layers.hpp"
#include "qsynth/qspace.hpp"

namespace qsynth {

struct GeneratorConfig {
  int height = 64, width = 64;
  int base_channels = 32;
  int n_downsample = 2;
  int n_res_blocks = 4;
  int q_embed_dim = 64;
  int attention_reduction = 8;
  std::uint64_t seed = 1;

  int feat_channels() const { return base_channels << n_downsample; }

  void validate() const {
    if (height < 8 || width < 8) throw validation_error("GeneratorConfig: image too small");
    if (base_channels < 1 || n_downsample < 1 || n_res_blocks < 1 || q_embed_dim < 1)
      throw validation_error("GeneratorConfig: sizes must be positive");
    const int f = 1 << n_downsample;
    if (height % f != 0 || width % f != 0)
      throw validation_error("GeneratorConfig: H and W must be divisible by 2^n_downsample");
    if (base_channels / attention_reduction < 1)
      throw validation_error("GeneratorConfig: base_channels/attention_reduction must be >= 1");
  }
};

struct DiscriminatorConfig {
  int height = 64, width = 64;
  int base_channels = 32;
  int q_embed_dim = 64;
  std::uint64_t seed = 2;

  void validate() const {
    if (base_channels < 1 || q_embed_dim < 1)
      throw validation_error("DiscriminatorConfig: sizes must be positive");
    if (height % 4 != 0 || width % 4 != 0)
      throw validation_error("DiscriminatorConfig: H and W must be divisible by 4");
  }
};

// Strided-conv encoder with channel attention on the final features:
// z = F + F (x) delta(F).
template <class T>
struct SmaEncoder {
  Conv2d<T> stem;
  InstanceNorm2d<T> stem_norm;
  ReLU<T> stem_act;
  std::vector<std::unique_ptr<Conv2d<T>>> downs;
  std::vector<InstanceNorm2d<T>> down_norms;
  std::vector<ReLU<T>> down_acts;
  ChannelAttention<T> attention;

  SmaEncoder(const GeneratorConfig& cfg)
      : stem(1, cfg.base_channels, 7, 1, 3),
        attention(cfg.feat_channels(), cfg.attention_reduction) {
    int ch = cfg.base_channels;
    for (int i = 0; i < cfg.n_downsample; ++i) {
      downs.push_back(std::make_unique<Conv2d<T>>(ch, ch * 2, 3, 2, 1));
      ch *= 2;
    }
    down_norms.resize(downs.size());
    down_acts.resize(downs.size());
  }

  void init(Rng& rng) {
    stem.init(rng);
    for (auto& d : downs) d->init(rng);
    attention.init(rng);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    stem.collect(out, prefix + ".stem");
    for (std::size_t i = 0; i < downs.size(); ++i)
      downs[i]->collect(out, prefix + ".down" + std::to_string(i));
    attention.collect(out, prefix + ".attention");
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> t = stem_act.forward(stem_norm.forward(stem.forward(x)));
    for (std::size_t i = 0; i < downs.size(); ++i)
      t = down_acts[i].forward(down_norms[i].forward(downs[i]->forward(t)));
    return attention.forward(t);
  }

  // Backbone features that fed the attention stage in the last forward.
  const Tensor<T>& backbone_features() const { return attention.x_saved; }
  const Tensor<T>& attention_weights() const { return attention.weights_saved; }

  void backward(const Tensor<T>& gz) {
    Tensor<T> g = attention.backward(gz);
    for (std::size_t i = downs.size(); i-- > 0;)
      g = downs[i]->backward(down_norms[i].backward(down_acts[i].backward(g)));
    // stem gradient w.r.t. its input is not needed (inputs are data)
    stem.backward(stem_norm.backward(stem_act.backward(g)), false);
  }
};

// Residual block whose normalization layers are q-conditioned. The
// activation sits after the residual add: a downstream instance norm would
// cancel any spatially uniform channel shift, so the conditioning biases of
// both CBIN layers must pass a nonlinearity before the next normalization.
template <class T>
struct ResBlockCbin {
  Conv2d<T> conv1, conv2;
  Cbin<T> norm1, norm2;
  ReLU<T> act_mid, act_out;

  ResBlockCbin(int channels, int q_dim)
      : conv1(channels, channels, 3, 1, 1),
        conv2(channels, channels, 3, 1, 1),
        norm1(channels, q_dim),
        norm2(channels, q_dim) {}

  void init(Rng& rng) {
    conv1.init(rng);
    norm1.init(rng);
    conv2.init(rng);
    norm2.init(rng);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    conv1.collect(out, prefix + ".conv1");
    norm1.collect(out, prefix + ".norm1");
    conv2.collect(out, prefix + ".conv2");
    norm2.collect(out, prefix + ".norm2");
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& qhat) {
    Tensor<T> t = act_mid.forward(norm1.forward(conv1.forward(x), qhat));
    t = norm2.forward(conv2.forward(t), qhat);
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      t.data[std::size_t(i)] += x.data[std::size_t(i)];
    return act_out.forward(t);
  }

  Tensor<T> backward(const Tensor<T>& gy, Tensor<T>& gqhat) {
    const Tensor<T> gsum = act_out.backward(gy);
    Tensor<T> g = norm2.backward(gsum, gqhat);
    g = conv2.backward(g);
    g = act_mid.backward(g);
    g = norm1.backward(g, gqhat);
    g = conv1.backward(g);
    const std::size_t n = gy.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i)
      g.data[std::size_t(i)] += gsum.data[std::size_t(i)];
    return g;
  }
};

// Upsampling decoder mirroring the encoder, with the same channel-attention
// residual pattern per stage and a sigmoid-bounded single-channel output.
template <class T>
struct SmaDecoder {
  std::vector<Upsample2x<T>> ups;
  std::vector<std::unique_ptr<Conv2d<T>>> convs;
  std::vector<InstanceNorm2d<T>> norms;
  std::vector<ReLU<T>> acts;
  std::vector<std::unique_ptr<ChannelAttention<T>>> attentions;
  Conv2d<T> head;
  Sigmoid<T> out_act;

  SmaDecoder(const GeneratorConfig& cfg) : head(cfg.base_channels, 1, 7, 1, 3) {
    int ch = cfg.feat_channels();
    for (int i = 0; i < cfg.n_downsample; ++i) {
      convs.push_back(std::make_unique<Conv2d<T>>(ch, ch / 2, 3, 1, 1));
      ch /= 2;
      attentions.push_back(
          std::make_unique<ChannelAttention<T>>(ch, cfg.attention_reduction));
    }
    ups.resize(convs.size());
    norms.resize(convs.size());
    acts.resize(convs.size());
  }

  void init(Rng& rng) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i]->init(rng);
      attentions[i]->init(rng);
    }
    head.init(rng);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i]->collect(out, prefix + ".up" + std::to_string(i));
      attentions[i]->collect(out, prefix + ".attention" + std::to_string(i));
    }
    head.collect(out, prefix + ".head");
  }

  Tensor<T> forward(const Tensor<T>& z) {
    Tensor<T> t = z;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      t = ups[i].forward(t);
      t = acts[i].forward(norms[i].forward(convs[i]->forward(t)));
      t = attentions[i]->forward(t);
    }
    return out_act.forward(head.forward(t));
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> g = head.backward(out_act.backward(gy));
    for (std::size_t i = convs.size(); i-- > 0;) {
      g = attentions[i]->backward(g);
      g = convs[i]->backward(norms[i].backward(acts[i].backward(g)));
      g = ups[i].backward(g);
    }
    return g;
  }
};

template <class T>
struct Generator {
  GeneratorConfig cfg;
  SmaEncoder<T> enc_b0, enc_t1, enc_t2;
  MmafFuse<T> mmaf;
  QEmbed<T> qembed;
  std::vector<std::unique_ptr<ResBlockCbin<T>>> blocks;
  SmaDecoder<T> dec;
  Tensor<T> qhat_saved;

  explicit Generator(const GeneratorConfig& cfg_)
      : cfg(cfg_),
        enc_b0(cfg_),
        enc_t1(cfg_),
        enc_t2(cfg_),
        mmaf(cfg_.feat_channels()),
        qembed(cfg_.q_embed_dim),
        dec(cfg_) {
    cfg.validate();
    for (int i = 0; i < cfg.n_res_blocks; ++i)
      blocks.push_back(std::make_unique<ResBlockCbin<T>>(cfg.feat_channels(), cfg.q_embed_dim));
    Rng rng(cfg.seed);
    enc_b0.init(rng);
    enc_t1.init(rng);
    enc_t2.init(rng);
    mmaf.init(rng);
    qembed.init(rng);
    for (auto& b : blocks) b->init(rng);
    dec.init(rng);
  }

  ParamList<T> params() {
    ParamList<T> out;
    enc_b0.collect(out, "g.enc_b0");
    enc_t1.collect(out, "g.enc_t1");
    enc_t2.collect(out, "g.enc_t2");
    mmaf.collect(out, "g.mmaf");
    qembed.collect(out, "g.qembed");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i]->collect(out, "g.res" + std::to_string(i));
    dec.collect(out, "g.dec");
    return out;
  }

  static Tensor<T> slice_channel(const Tensor<T>& x, int c) {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({n, 1, h, w});
    const std::size_t hw = std::size_t(h) * w;
    for (int i = 0; i < n; ++i)
      std::copy_n(x.ptr() + (std::size_t(i) * x.dim(1) + std::size_t(c)) * hw, hw,
                  out.ptr() + std::size_t(i) * hw);
    return out;
  }

  // structurals: [n, 3, H, W] with channels (b0, t1, t2); q: [n, 4].
  Tensor<T> forward(const Tensor<T>& structurals, const Tensor<T>& q) {
    if (structurals.rank() != 4 || structurals.dim(1) != 3 ||
        structurals.dim(2) != cfg.height || structurals.dim(3) != cfg.width)
      throw validation_error("Generator: structural input shape mismatch");
    if (q.dim(0) != structurals.dim(0))
      throw validation_error("Generator: batch size mismatch between inputs and q");
    qhat_saved = qembed.forward(q);
    Tensor<T> z0 = enc_b0.forward(slice_channel(structurals, 0));
    Tensor<T> z1 = enc_t1.forward(slice_channel(structurals, 1));
    Tensor<T> z2 = enc_t2.forward(slice_channel(structurals, 2));
    Tensor<T> z = mmaf.forward(z0, z1, z2);
    for (auto& b : blocks) z = b->forward(z, qhat_saved);
    return dec.forward(z);
  }

  void backward(const Tensor<T>& gout) {
    Tensor<T> g = dec.backward(gout);
    Tensor<T> gqhat({qhat_saved.dim(0), cfg.q_embed_dim});
    for (std::size_t i = blocks.size(); i-- > 0;) g = blocks[i]->backward(g, gqhat);
    Tensor<T> g0, g1, g2;
    mmaf.backward(g, g0, g1, g2);
    enc_b0.backward(g0);
    enc_t1.backward(g1);
    enc_t2.backward(g2);
    qembed.backward(gqhat);
  }
};

template <class T>
struct DiscOutput {
  Tensor<T> global_score;  // [n]
  Tensor<T> pixel_map;     // [n, H, W]
};

// Dual-branch conditional discriminator: an encoding path scored globally and
// a decoding path scored per pixel, both conditioned on the q embedding
// through projection heads. Outputs are raw logits.
template <class T>
struct Discriminator {
  DiscriminatorConfig cfg;
  Conv2d<T> e1, e2, e3;
  LeakyReLU<T> a1, a2, a3;
  Upsample2x<T> u1, u2;
  Conv2d<T> d1, d2, dp;
  LeakyReLU<T> ad1, ad2, adp;
  QEmbed<T> qembed;
  ProjectionHead<T> proj_global;
  PixelProjectionHead<T> proj_pixel;
  Tensor<T> qhat_saved;
  Tensor<T> bottleneck_saved;
  int bh = 0, bw = 0;

  explicit Discriminator(const DiscriminatorConfig& cfg_)
      : cfg(cfg_),
        e1(1, cfg_.base_channels, 3, 2, 1),
        e2(cfg_.base_channels, 2 * cfg_.base_channels, 3, 2, 1),
        e3(2 * cfg_.base_channels, 4 * cfg_.base_channels, 3, 1, 1),
        d1(4 * cfg_.base_channels, 2 * cfg_.base_channels, 3, 1, 1),
        d2(2 * cfg_.base_channels, cfg_.base_channels, 3, 1, 1),
        dp(cfg_.base_channels, cfg_.base_channels, 3, 1, 1),
        qembed(cfg_.q_embed_dim),
        proj_global(4 * cfg_.base_channels, cfg_.q_embed_dim),
        proj_pixel(cfg_.base_channels, cfg_.q_embed_dim) {
    cfg.validate();
    Rng rng(cfg.seed);
    e1.init(rng);
    e2.init(rng);
    e3.init(rng);
    d1.init(rng);
    d2.init(rng);
    dp.init(rng);
    qembed.init(rng);
    proj_global.init(rng);
    proj_pixel.init(rng);
  }

  ParamList<T> params() {
    ParamList<T> out;
    e1.collect(out, "d.enc1");
    e2.collect(out, "d.enc2");
    e3.collect(out, "d.enc3");
    d1.collect(out, "d.dec1");
    d2.collect(out, "d.dec2");
    dp.collect(out, "d.pix");
    qembed.collect(out, "d.qembed");
    proj_global.collect(out, "d.proj_global");
    proj_pixel.collect(out, "d.proj_pixel");
    return out;
  }

  DiscOutput<T> forward(const Tensor<T>& x, const Tensor<T>& q) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg.height || x.dim(3) != cfg.width)
      throw validation_error("Discriminator: input shape mismatch");
    if (q.dim(0) != x.dim(0))
      throw validation_error("Discriminator: batch size mismatch between input and q");
    qhat_saved = qembed.forward(q);
    Tensor<T> b = a3.forward(e3.forward(a2.forward(e2.forward(a1.forward(e1.forward(x))))));
    bottleneck_saved = b;
    bh = b.dim(2);
    bw = b.dim(3);
    const int n = b.dim(0), c = b.dim(1), hw = bh * bw;
    Tensor<T> gap({n, c});
    for (int nc = 0; nc < n * c; ++nc) {
      const T* bp = b.ptr() + std::size_t(nc) * hw;
      T s = T(0);
      for (int i = 0; i < hw; ++i) s += bp[i];
      gap.data[std::size_t(nc)] = s / T(hw);
    }
    DiscOutput<T> out;
    out.global_score = proj_global.forward(gap, qhat_saved);
    Tensor<T> p = ad1.forward(d1.forward(u1.forward(b)));
    p = ad2.forward(d2.forward(u2.forward(p)));
    p = adp.forward(dp.forward(p));
    out.pixel_map = proj_pixel.forward(p, qhat_saved);
    return out;
  }

  // Returns the gradient w.r.t. the input image.
  Tensor<T> backward(const Tensor<T>& gscore, const Tensor<T>& gmap) {
    const int n = bottleneck_saved.dim(0), c = bottleneck_saved.dim(1);
    const int hw = bh * bw;
    Tensor<T> gqhat({n, cfg.q_embed_dim});

    Tensor<T> gp(adp.x_saved.shape);
    proj_pixel.backward(gmap, gp, gqhat);
    Tensor<T> gb_dec = u1.backward(d1.backward(ad1.backward(
        u2.backward(d2.backward(ad2.backward(dp.backward(adp.backward(gp))))))));

    Tensor<T> ggap({n, c});
    Tensor<T> gqhat_g({n, cfg.q_embed_dim});
    proj_global.backward(gscore, ggap, gqhat_g);
    for (std::size_t i = 0; i < gqhat.numel(); ++i) gqhat.data[i] += gqhat_g.data[i];
    for (int nc = 0; nc < n * c; ++nc) {
      const T add = ggap.data[std::size_t(nc)] / T(hw);
      T* gbp = gb_dec.ptr() + std::size_t(nc) * hw;
      for (int i = 0; i < hw; ++i) gbp[i] += add;
    }

    Tensor<T> gx =
        e1.backward(a1.backward(e2.backward(a2.backward(e3.backward(a3.backward(gb_dec))))));
    qembed.backward(gqhat);
    return gx;
  }
};

template <class T>
std::size_t param_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value->numel();
  return n;
}

template <class T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.grad->zero();
}

template <class T>
std::vector<float> flatten_params(const ParamList<T>& params) {
  std::vector<float> out;
  out.reserve(param_count(params));
  for (const auto& p : params)
    for (T v : p.value->data) out.push_back(float(v));
  return out;
}

template <class T>
void unflatten_params(const ParamList<T>& params, const std::vector<float>& flat) {
  if (flat.size() != param_count(params))
    throw format_error("parameter count mismatch while loading weights");
  std::size_t i = 0;
  for (const auto& p : params)
    for (auto& v : p.value->data) v = T(flat[i++]);
}

}  // namespace qsynth
