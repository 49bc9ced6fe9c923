#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace qsynth {

// Dense row-major tensor. Hot loops index through raw pointers; the atN()
// helpers are for glue code and tests.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= std::size_t(d);
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[std::size_t(i)]; }
  int rank() const { return int(shape.size()); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  T& at2(int i, int j) { return data[std::size_t(i) * shape[1] + j]; }
  const T& at2(int i, int j) const { return data[std::size_t(i) * shape[1] + j]; }

  T& at3(int a, int b, int c) {
    return data[(std::size_t(a) * shape[1] + b) * shape[2] + c];
  }
  const T& at3(int a, int b, int c) const {
    return data[(std::size_t(a) * shape[1] + b) * shape[2] + c];
  }

  T& at4(int n, int c, int h, int w) {
    return data[((std::size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[((std::size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
};

template <class T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

template <class U, class T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  Tensor<U> out(t.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) out.data[i] = U(t.data[i]);
  return out;
}

}  // namespace qsynth
