#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "milforge/common.hpp"
#include "milforge/kernels.hpp"
#include "milforge/rng.hpp"

namespace milforge {

// Dense row-major tensor. Rank 1 ({n}) and rank 2 ({m, n}) cover everything
// the model needs; scalars are {1}. Values are immutable once handed to a
// tape; every op verifies its output stays finite.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }

  static Tensor full(std::vector<std::size_t> s, T v) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  // Matrix literal, row-major.
  static Tensor matrix(std::size_t m, std::size_t n, std::initializer_list<T> v) {
    return Tensor({m, n}, std::vector<T>(v));
  }

  static Tensor vector(std::initializer_list<T> v) {
    std::vector<T> d(v);
    std::vector<std::size_t> shape{d.size()};
    return Tensor(std::move(shape), std::move(d));
  }

  // Uniform(-a, a).
  static Tensor uniform(std::vector<std::size_t> s, T a, Rng& rng) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-double(a), double(a)));
    return t;
  }

  static Tensor normal(std::vector<std::size_t> s, T stddev, Rng& rng) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * double(stddev));
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }

  std::size_t rows() const {
    if (shape.size() != 2) throw DimensionError("tensor: rows() on non-matrix " + shape_str());
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.size() != 2) throw DimensionError("tensor: cols() on non-matrix " + shape_str());
    return shape[1];
  }

  T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  const T* ptr() const { return data.data(); }
  T* ptr() { return data.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    return data.empty() || kernels::active<T>().all_finite(data.data(), data.size());
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

}  // namespace milforge
