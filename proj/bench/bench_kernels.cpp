// Compares the OpenMP kernels against their serial reference twins on
// training-shaped workloads and reports throughput.

#include <omp.h>

#include <cstdio>
#include <string>
#include <vector>

#include "qsynth/kernels.hpp"
#include "qsynth/kernels_ref.hpp"
#include "qsynth/rng.hpp"

using namespace qsynth;

namespace {

struct Shape {
  const char* name;
  int n, in_ch, h, w, out_ch, k, stride, pad;
};

const Shape kShapes[] = {
    {"stem 7x7        ", 16, 1, 64, 64, 16, 7, 1, 3},
    {"down 3x3 s2     ", 16, 16, 64, 64, 32, 3, 2, 1},
    {"bottleneck 3x3  ", 16, 64, 16, 16, 64, 3, 1, 1},
    {"decoder 3x3     ", 16, 32, 64, 64, 16, 3, 1, 1},
};

double flops_of(const kern::ConvDims& d) {
  return 2.0 * d.n * d.out_ch * d.oh * d.ow * d.in_ch * d.k * d.k;
}

template <class Fn>
double time_best_of(int reps, Fn fn) {
  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    const double t0 = omp_get_wtime();
    fn();
    best = std::min(best, omp_get_wtime() - t0);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
  std::printf("threads: %d, best of %d runs\n", omp_get_max_threads(), reps);
  std::printf("%-18s %12s %12s %12s %8s\n", "conv forward", "serial", "openmp", "GFLOP/s",
              "speedup");

  for (const auto& s : kShapes) {
    const auto d =
        kern::ConvDims::make(s.n, s.in_ch, s.h, s.w, s.out_ch, s.k, s.stride, s.pad);
    Rng rng(1);
    std::vector<float> x(std::size_t(d.n) * d.in_ch * d.h * d.w);
    std::vector<float> w(std::size_t(d.out_ch) * d.in_ch * d.k * d.k);
    std::vector<float> b(std::size_t(d.out_ch));
    std::vector<float> y(std::size_t(d.n) * d.out_ch * d.oh * d.ow);
    for (auto& v : x) v = float(rng.uniform(-1, 1));
    for (auto& v : w) v = float(rng.uniform(-1, 1));
    for (auto& v : b) v = float(rng.uniform(-1, 1));

    const double ts = time_best_of(
        reps, [&] { ref::conv2d_forward(d, x.data(), w.data(), b.data(), y.data()); });
    const double tp = time_best_of(
        reps, [&] { kern::conv2d_forward(d, x.data(), w.data(), b.data(), y.data()); });
    std::printf("%-18s %9.2f ms %9.2f ms %12.1f %7.1fx\n", s.name, 1e3 * ts, 1e3 * tp,
                flops_of(d) / tp / 1e9, ts / tp);

    std::vector<float> gy(y.size()), gx(x.size()), gw(w.size()), gb(b.size());
    for (auto& v : gy) v = float(rng.uniform(-1, 1));
    const double tsb = time_best_of(reps, [&] {
      ref::conv2d_backward_data(d, gy.data(), w.data(), gx.data());
      std::fill(gw.begin(), gw.end(), 0.0f);
      std::fill(gb.begin(), gb.end(), 0.0f);
      ref::conv2d_backward_weights(d, x.data(), gy.data(), gw.data(), gb.data());
    });
    const double tpb = time_best_of(reps, [&] {
      kern::conv2d_backward_data(d, gy.data(), w.data(), gx.data());
      std::fill(gw.begin(), gw.end(), 0.0f);
      std::fill(gb.begin(), gb.end(), 0.0f);
      kern::conv2d_backward_weights(d, x.data(), gy.data(), gw.data(), gb.data());
    });
    std::printf("%-18s %9.2f ms %9.2f ms %12.1f %7.1fx\n", "  backward", 1e3 * tsb,
                1e3 * tpb, 2.0 * flops_of(d) / tpb / 1e9, tsb / tpb);
  }

  // gemm at the im2col shape of the bottleneck convolution
  {
    const int m = 64, k = 576, n = 256;
    Rng rng(2);
    std::vector<float> a(std::size_t(m) * k), b(std::size_t(k) * n), c(std::size_t(m) * n);
    for (auto& v : a) v = float(rng.uniform(-1, 1));
    for (auto& v : b) v = float(rng.uniform(-1, 1));
    const double ts = time_best_of(reps, [&] {
      std::fill(c.begin(), c.end(), 0.0f);
      ref::gemm_acc(m, n, k, a.data(), b.data(), c.data());
    });
    const double tp = time_best_of(reps, [&] {
      std::fill(c.begin(), c.end(), 0.0f);
      kern::gemm_acc(m, n, k, a.data(), b.data(), c.data());
    });
    std::printf("%-18s %9.2f ms %9.2f ms %12.1f %7.1fx (single-thread kernel)\n",
                "gemm 64x576x256  ", 1e3 * ts, 1e3 * tp, 2.0 * m * double(k) * n / tp / 1e9,
                ts / tp);
  }
  return 0;
}
