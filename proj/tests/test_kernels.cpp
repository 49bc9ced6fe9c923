#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include "qsynth/kernels.hpp"
#include "qsynth/kernels_ref.hpp"
#include "qsynth/rng.hpp"
#include "test_util.hpp"

using namespace qsynth;
using testutil::fill_uniform;
using testutil::rel_diff;

namespace {

struct ConvCase {
  int n, in_ch, h, w, out_ch, k, stride, pad;
};

const ConvCase kCases[] = {
    {2, 3, 8, 8, 4, 3, 1, 1},  {3, 1, 16, 16, 8, 7, 1, 3}, {2, 4, 9, 7, 5, 3, 2, 1},
    {1, 8, 12, 12, 8, 3, 2, 1}, {4, 2, 6, 6, 3, 1, 1, 0},
};

}  // namespace

TEST_CASE("conv kernels match the serial reference") {
  Rng rng(101);
  for (const auto& c : kCases) {
    const auto d = kern::ConvDims::make(c.n, c.in_ch, c.h, c.w, c.out_ch, c.k, c.stride, c.pad);
    Tensor<double> x({c.n, c.in_ch, c.h, c.w}), w({c.out_ch, c.in_ch, c.k, c.k}),
        b({c.out_ch});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);

    Tensor<double> y({d.n, d.out_ch, d.oh, d.ow}), y_ref(y.shape);
    kern::conv2d_forward(d, x.ptr(), w.ptr(), b.ptr(), y.ptr());
    ref::conv2d_forward(d, x.ptr(), w.ptr(), b.ptr(), y_ref.ptr());
    CHECK(rel_diff(y, y_ref) < 1e-12);

    Tensor<double> gy(y.shape);
    fill_uniform(gy, rng);
    Tensor<double> gx(x.shape), gx_ref(x.shape);
    kern::conv2d_backward_data(d, gy.ptr(), w.ptr(), gx.ptr());
    ref::conv2d_backward_data(d, gy.ptr(), w.ptr(), gx_ref.ptr());
    CHECK(rel_diff(gx, gx_ref) < 1e-12);

    Tensor<double> gw(w.shape), gb(b.shape), gw_ref(w.shape), gb_ref(b.shape);
    kern::conv2d_backward_weights(d, x.ptr(), gy.ptr(), gw.ptr(), gb.ptr());
    ref::conv2d_backward_weights(d, x.ptr(), gy.ptr(), gw_ref.ptr(), gb_ref.ptr());
    CHECK(rel_diff(gw, gw_ref) < 1e-12);
    CHECK(rel_diff(gb, gb_ref) < 1e-12);
  }
}

TEST_CASE("gemm matches the naive reference") {
  Rng rng(55);
  const int m = 17, n = 29, k = 13;
  Tensor<double> a({m, k}), b({k, n}), c({m, n}), c_ref({m, n});
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  kern::gemm_acc(m, n, k, a.ptr(), b.ptr(), c.ptr());
  ref::gemm_acc(m, n, k, a.ptr(), b.ptr(), c_ref.ptr());
  CHECK(rel_diff(c, c_ref) < 1e-13);
}

TEST_CASE("upsample round trip and gradient consistency") {
  Rng rng(7);
  Tensor<float> x({2, 3, 5, 4});
  fill_uniform(x, rng);
  Tensor<float> y({2, 3, 10, 8});
  kern::upsample2x_forward(2, 3, 5, 4, x.ptr(), y.ptr());
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) CHECK(y.at4(0, 0, 2 * i, 2 * j) == x.at4(0, 0, i, j));
  Tensor<float> gy(y.shape);
  gy.fill(1.0f);
  Tensor<float> gx(x.shape);
  kern::upsample2x_backward(2, 3, 5, 4, gy.ptr(), gx.ptr());
  for (auto v : gx.data) CHECK(v == 4.0f);  // each input feeds four outputs
}

TEST_CASE("kernel outputs are bit-identical across thread counts") {
  const auto run = [](int threads) {
    omp_set_num_threads(threads);
    Rng rng(2024);
    const auto d = kern::ConvDims::make(4, 6, 16, 16, 8, 3, 2, 1);
    Tensor<float> x({4, 6, 16, 16}), w({8, 6, 3, 3}), b({8});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);
    Tensor<float> y({d.n, d.out_ch, d.oh, d.ow});
    kern::conv2d_forward(d, x.ptr(), w.ptr(), b.ptr(), y.ptr());
    Tensor<float> gy(y.shape);
    fill_uniform(gy, rng);
    Tensor<float> gx(x.shape), gw(w.shape), gb(b.shape);
    kern::conv2d_backward_data(d, gy.ptr(), w.ptr(), gx.ptr());
    kern::conv2d_backward_weights(d, x.ptr(), gy.ptr(), gw.ptr(), gb.ptr());
    std::vector<float> all;
    all.insert(all.end(), y.data.begin(), y.data.end());
    all.insert(all.end(), gx.data.begin(), gx.data.end());
    all.insert(all.end(), gw.data.begin(), gw.data.end());
    all.insert(all.end(), gb.data.begin(), gb.data.end());
    return all;
  };
  const auto serial = run(1);
  const auto parallel = run(2);
  omp_set_num_threads(omp_get_num_procs());
  CHECK(serial == parallel);
}
