#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "qsynth/losses.hpp"
#include "test_util.hpp"

using namespace qsynth;
using testutil::fill_uniform;

namespace {

DiscOutput<double> make_out(double gscore, double pixel, int n = 1, int h = 4, int w = 4) {
  DiscOutput<double> o;
  o.global_score = Tensor<double>({n});
  o.global_score.fill(gscore);
  o.pixel_map = Tensor<double>({n, h, w});
  o.pixel_map.fill(pixel);
  return o;
}

}  // namespace

TEST_CASE("adversarial losses: closed-form points and limits") {
  SUBCASE("all logits zero") {
    const auto d = adv_loss_d(make_out(0, 0), make_out(0, 0));
    CHECK(d.value == doctest::Approx(2 * 2 * std::log(2.0)).epsilon(1e-6));
    const auto g = adv_loss_g(make_out(0, 0));
    CHECK(g.value == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  }
  SUBCASE("perfect discrimination limit") {
    const auto d = adv_loss_d(make_out(30, 30), make_out(-30, -30));
    CHECK(d.value < 1e-10);
  }
  SUBCASE("random logits match a scalar re-evaluation") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      DiscOutput<double> real = make_out(0, 0, 2), fake = make_out(0, 0, 2);
      fill_uniform(real.global_score, rng, -3, 3);
      fill_uniform(real.pixel_map, rng, -3, 3);
      fill_uniform(fake.global_score, rng, -3, 3);
      fill_uniform(fake.pixel_map, rng, -3, 3);
      const auto d = adv_loss_d(real, fake);

      auto sp = [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); };
      double expect = 0;
      for (int i = 0; i < 2; ++i)
        expect += (sp(-real.global_score.data[std::size_t(i)]) +
                   sp(fake.global_score.data[std::size_t(i)])) /
                  2.0;
      for (int i = 0; i < 2; ++i) {
        double mr = 0, mf = 0;
        for (int p = 0; p < 16; ++p) {
          mr += real.pixel_map.data[std::size_t(i) * 16 + p] / 16.0;
          mf += fake.pixel_map.data[std::size_t(i) * 16 + p] / 16.0;
        }
        expect += (sp(-mr) + sp(mf)) / 2.0;
      }
      CHECK(d.value == doctest::Approx(expect).epsilon(1e-12));

      const auto g = adv_loss_g(fake);
      double eg = 0;
      for (int i = 0; i < 2; ++i) eg += sp(-fake.global_score.data[std::size_t(i)]) / 2.0;
      for (int i = 0; i < 2; ++i) {
        double mf = 0;
        for (int p = 0; p < 16; ++p) mf += fake.pixel_map.data[std::size_t(i) * 16 + p] / 16.0;
        eg += sp(-mf) / 2.0;
      }
      CHECK(g.value == doctest::Approx(eg).epsilon(1e-12));
    }
  }
  SUBCASE("non-finite logits name the batch index") {
    auto bad = make_out(0, 0, 3);
    bad.global_score.data[2] = std::nan("");
    CHECK_THROWS_WITH_AS(adv_loss_g(bad), doctest::Contains("batch index 2"), numeric_error);
  }
}

TEST_CASE("rec_loss examples and brute-force oracle") {
  Tensor<double> a({1, 1, 4, 4}), b({1, 1, 4, 4});
  a.fill(0.5);
  b.fill(0.5);
  CHECK(rec_loss(a, b) == 0.0);
  b.fill(0.25);
  CHECK(rec_loss(a, b) == doctest::Approx(0.25).epsilon(1e-12));

  Rng rng(5);
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  double expect = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) expect += std::abs(a.data[i] - b.data[i]);
  expect /= double(a.numel());
  CHECK(rec_loss(a, b) == doctest::Approx(expect).epsilon(1e-12));

  Tensor<double> c({1, 1, 2, 2});
  CHECK_THROWS_AS(rec_loss(a, c), validation_error);
}

TEST_CASE("self-similarity map contracts") {
  FeatureExtractor<double> ext;
  SUBCASE("query against itself is 1") {
    Rng rng(7);
    Tensor<double> x({1, 1, 64, 64});
    fill_uniform(x, rng, 0.0, 1.0);
    const auto sm = self_similarity_map(x, ext);
    const int fh = sm.fh, fw = sm.fw;
    REQUIRE(fh == 8);
    // locate the self-entry inside each query's window and check it is 1
    for (int qy = 0; qy < fh; ++qy)
      for (int qx = 0; qx < fw; ++qx) {
        const int sy = std::clamp(qy - 4, 0, fh - sm.win_h);
        const int sx = std::clamp(qx - 4, 0, fw - sm.win_w);
        const int q = qy * fw + qx;
        const double self =
            sm.values.at3(0, q, (qy - sy) * sm.win_w + (qx - sx));
        CHECK(self == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
  SUBCASE("spatially constant image gives an all-ones map") {
    Tensor<double> x({1, 1, 64, 64});
    x.fill(0.37);
    const auto sm = self_similarity_map(x, ext);
    for (double v : sm.values.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("one query row matches brute-force normalized dot products") {
    Rng rng(9);
    Tensor<double> x({1, 1, 64, 64});
    fill_uniform(x, rng, 0.0, 1.0);
    const Tensor<double> f = ext.forward(x);
    const int c = f.dim(1), fh = f.dim(2), fw = f.dim(3);
    const auto sm = self_similarity_map(x, ext);
    const int qy = 3, qx = 5, q = qy * fw + qx;
    const int sy = std::clamp(qy - 4, 0, fh - sm.win_h);
    const int sx = std::clamp(qx - 4, 0, fw - sm.win_w);
    auto normed = [&](int y, int xx, int ch) {
      double nn = 0;
      for (int k = 0; k < c; ++k) {
        const double v = f.at4(0, k, y, xx);
        nn += v * v;
      }
      return f.at4(0, ch, y, xx) / std::max(std::sqrt(nn), 1e-12);
    };
    for (int oy = 0; oy < sm.win_h; ++oy)
      for (int ox = 0; ox < sm.win_w; ++ox) {
        double dot = 0;
        for (int ch = 0; ch < c; ++ch)
          dot += normed(qy, qx, ch) * normed(sy + oy, sx + ox, ch);
        CHECK(sm.values.at3(0, q, oy * sm.win_w + ox) ==
              doctest::Approx(dot).epsilon(1e-10));
      }
  }
  SUBCASE("image smaller than patch is a domain error") {
    Tensor<double> x({1, 1, 4, 4});
    FeatureExtractor<double> e2;
    CHECK_THROWS_AS(self_similarity_map(x, e2), validation_error);
  }
}

TEST_CASE("ac_loss: identity, scale invariance, rotation sensitivity, symmetry") {
  FeatureExtractor<double> ext;
  Rng rng(11);
  Tensor<double> x({1, 1, 64, 64});
  // structured image: smooth gradient plus a bright square
  for (int y = 0; y < 64; ++y)
    for (int xx = 0; xx < 64; ++xx)
      x.at4(0, 0, y, xx) = 0.2 + 0.4 * y / 64.0 + ((y > 12 && y < 30 && xx > 30 && xx < 52) ? 0.4 : 0.0);

  CHECK(ac_loss(x, x, ext) == 0.0);

  SUBCASE("global positive scaling leaves the maps unchanged") {
    Tensor<double> half = x;
    for (auto& v : half.data) v *= 0.5;
    CHECK(ac_loss(x, half, ext) < 1e-5);
  }
  SUBCASE("90-degree rotation changes the maps") {
    Tensor<double> rot({1, 1, 64, 64});
    for (int y = 0; y < 64; ++y)
      for (int xx = 0; xx < 64; ++xx) rot.at4(0, 0, xx, 63 - y) = x.at4(0, 0, y, xx);
    CHECK(ac_loss(x, rot, ext) > 0.0);
  }
  SUBCASE("symmetric in its arguments") {
    Tensor<double> y({1, 1, 64, 64});
    fill_uniform(y, rng, 0.0, 1.0);
    CHECK(ac_loss(x, y, ext) == doctest::Approx(ac_loss(y, x, ext)).epsilon(1e-12));
  }
}

TEST_CASE("total_loss arithmetic and error identification") {
  LossWeights w;
  CHECK(total_loss(1.0, 0.02, 0.003, w) == doctest::Approx(3.3).epsilon(1e-12));
  LossWeights zero;
  zero.lambda_rec = 0;
  zero.lambda_ac = 0;
  CHECK(total_loss(1.7, 123.0, 456.0, zero) == 1.7);

  Rng rng(13);
  for (int i = 0; i < 5; ++i) {
    const double a = rng.uniform(0, 2), r = rng.uniform(0, 1), c = rng.uniform(0, 1);
    CHECK(total_loss(a, r, c, w) == doctest::Approx(a + 100 * r + 100 * c).epsilon(1e-12));
  }
  CHECK_THROWS_WITH_AS(total_loss(std::nan(""), 0.0, 0.0, w),
                       doctest::Contains("adversarial"), numeric_error);
  CHECK_THROWS_WITH_AS(total_loss(0.0, std::nan(""), 0.0, w),
                       doctest::Contains("reconstruction"), numeric_error);
  CHECK_THROWS_WITH_AS(total_loss(0.0, 0.0, std::nan(""), w),
                       doctest::Contains("consistency"), numeric_error);
}

TEST_CASE("loss gradients match central finite differences") {
  Rng rng(17);

  SUBCASE("rec_loss w.r.t. the synthesized image (8x8)") {
    Tensor<double> x({1, 1, 8, 8}), t({1, 1, 8, 8});
    fill_uniform(x, rng, 0.0, 1.0);
    fill_uniform(t, rng, 0.0, 1.0);
    Tensor<double> g;
    rec_loss(x, t, &g);
    auto loss = [&] { return double(rec_loss(x, t)); };
    CHECK(gradcheck::check_tensor(x, g, loss) < 1e-3);
  }

  SUBCASE("ac_loss w.r.t. the synthesized image (8x8 and 16x16)") {
    FeatureExtractor<double> ext;
    for (int size : {8, 16}) {
      // fresh fixed draw per size; the secant step must not cross the
      // kinks of the piecewise-linear L1 objective
      Rng r(17);
      Tensor<double> x({1, 1, size, size}), t({1, 1, size, size});
      fill_uniform(x, r, 0.1, 0.9);
      fill_uniform(t, r, 0.1, 0.9);
      Tensor<double> g;
      ac_loss(x, t, ext, &g);
      auto loss = [&] { return double(ac_loss(x, t, ext)); };
      CHECK(gradcheck::check_tensor(x, g, loss) < 1e-3);
    }
  }

  SUBCASE("adversarial generator loss through a small discriminator (8x8)") {
    DiscriminatorConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.base_channels = 4;
    cfg.q_embed_dim = 6;
    cfg.seed = 3;
    Discriminator<double> disc(cfg);
    Tensor<double> x({1, 1, 8, 8});
    fill_uniform(x, rng, 0.0, 1.0);
    Tensor<double> q({1, 4});
    q.at2(0, 1) = 1.0;
    q.at2(0, 3) = 0.5;
    auto loss = [&] { return double(adv_loss_g(disc.forward(x, q)).value); };
    loss();
    zero_grads(disc.params());
    const auto adv = adv_loss_g(disc.forward(x, q));
    const Tensor<double> gx =
        disc.backward(adv.grad_fake.global_score, adv.grad_fake.pixel_map);
    CHECK(gradcheck::check_tensor(x, gx, loss) < 1e-3);
  }

  SUBCASE("discriminator loss w.r.t. its logits") {
    DiscOutput<double> real = make_out(0, 0, 2, 3, 3), fake = make_out(0, 0, 2, 3, 3);
    fill_uniform(real.global_score, rng, -2, 2);
    fill_uniform(real.pixel_map, rng, -2, 2);
    fill_uniform(fake.global_score, rng, -2, 2);
    fill_uniform(fake.pixel_map, rng, -2, 2);
    const auto d = adv_loss_d(real, fake);
    auto loss = [&] { return double(adv_loss_d(real, fake).value); };
    CHECK(gradcheck::check_tensor(real.global_score, d.grad_real.global_score, loss) < 1e-3);
    CHECK(gradcheck::check_tensor(fake.global_score, d.grad_fake.global_score, loss) < 1e-3);
    CHECK(gradcheck::check_tensor(real.pixel_map, d.grad_real.pixel_map, loss) < 1e-3);
    CHECK(gradcheck::check_tensor(fake.pixel_map, d.grad_fake.pixel_map, loss) < 1e-3);
  }
}
