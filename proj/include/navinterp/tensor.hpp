#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace navinterp {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape extent must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Plain dense array with a shape; the non-differentiable data carrier used by
// generators, file I/O and evaluation-time flow utilities.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape))
      throw std::invalid_argument("tensor data size does not match shape");
  }

  std::size_t size() const { return data.size(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // 2D / 3D accessors (row-major, leading dimension first).
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const T& at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * shape[1] + c];
  }
  T& at(int p, int r, int c) {
    return data[(static_cast<std::size_t>(p) * shape[1] + r) * shape[2] + c];
  }
  const T& at(int p, int r, int c) const {
    return data[(static_cast<std::size_t>(p) * shape[1] + r) * shape[2] + c];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Image = Tensor<float>;

// Nearest-rank percentile: value at index ceil(p/100 * N) of the sorted
// multiset (1-based). Used for block normalization and report aggregates.
template <typename T>
T nearest_rank_percentile(std::vector<T> values, double p) {
  if (values.empty())
    throw std::invalid_argument("percentile of empty value set");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  if (rank < 1) rank = 1;
  if (rank > values.size()) rank = values.size();
  return values[rank - 1];
}

template <typename T>
double mean_of(const std::vector<T>& v) {
  if (v.empty()) throw std::invalid_argument("mean of empty value set");
  double acc = 0.0;
  for (const T& x : v) acc += static_cast<double>(x);
  return acc / static_cast<double>(v.size());
}

}  // namespace navinterp
