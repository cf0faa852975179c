#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

namespace spfl {

// Dense row-major tensor; shape {n,c,h,w} for feature maps, {n,d} for
// flat activations and logits.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}

  static size_t count(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
  }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](size_t i) { return data[i]; }
  const T& operator[](size_t i) const { return data[i]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
using Mat = Tensor<T>;  // rank-2 (rows, cols)

}  // namespace spfl
