#pragma once

#include <cmath>
#include <functional>

#include "qsynth/core.hpp"

namespace qsynth::gradcheck {

// Central finite differences against an analytic gradient tensor.
// Returns the infinity-norm relative error
//   max_i |a_i - n_i| / max(max|a|, max|n|, floor).
template <class LossFn>
double check_tensor(Tensor<double>& param, const Tensor<double>& analytic, LossFn loss,
                    double h = 1e-4, double floor = 1e-6) {
  double max_diff = 0.0, max_mag = floor;
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + h;
    const double lp = loss();
    param.data[i] = saved - h;
    const double lm = loss();
    param.data[i] = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    max_diff = std::max(max_diff, std::abs(numeric - analytic.data[i]));
    max_mag = std::max({max_mag, std::abs(numeric), std::abs(analytic.data[i])});
  }
  return max_diff / max_mag;
}

}  // namespace qsynth::gradcheck
