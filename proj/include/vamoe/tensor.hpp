#pragma once

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vamoe/common.hpp"

namespace vamoe {

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors are 32- or 64-bit float");
  if constexpr (std::is_same_v<T, float>) return Dtype::f32;
  return Dtype::f64;
}

inline std::string shape_str(const std::vector<i64>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Plain value type: copyable, immutable by
// convention once handed to a tape.
template <typename T>
struct Tensor {
  std::vector<i64> shape;
  std::vector<T> data;

  Tensor() = default;

  static Tensor zeros(std::vector<i64> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(size_t(numel_of(t.shape)), T(0));
    return t;
  }

  static Tensor full(std::vector<i64> s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor from(std::vector<i64> s, std::vector<T> values) {
    require(numel_of(s) == i64(values.size()), ErrorKind::shape_mismatch,
            "tensor data length " + std::to_string(values.size()) +
                " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static i64 numel_of(const std::vector<i64>& s) {
    i64 n = 1;
    for (i64 d : s) {
      require(d >= 0, ErrorKind::invalid_argument, "negative dimension");
      n *= d;
    }
    return n;
  }

  i64 numel() const { return i64(data.size()); }
  int rank() const { return int(shape.size()); }
  i64 dim(int i) const { return shape[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T& operator[](i64 i) { return data[size_t(i)]; }
  const T& operator[](i64 i) const { return data[size_t(i)]; }

  T& at2(i64 i, i64 j) { return data[size_t(i * shape[1] + j)]; }
  const T& at2(i64 i, i64 j) const { return data[size_t(i * shape[1] + j)]; }
  T& at3(i64 i, i64 j, i64 k) {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }
  const T& at3(i64 i, i64 j, i64 k) const {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }

  // Last-axis extent; the "channel" axis for token/field tensors.
  i64 last_dim() const {
    require(rank() >= 1, ErrorKind::invalid_argument, "rank-0 tensor");
    return shape.back();
  }
  i64 rows() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

  Tensor<T> reshaped(std::vector<i64> s) const {
    require(numel_of(s) == numel(), ErrorKind::shape_mismatch,
            "reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  void fill_random_normal(Rng& rng, double sigma) {
    for (auto& v : data) v = T(rng.normal() * sigma);
  }
  void fill_truncated_normal(Rng& rng, double sigma) {
    for (auto& v : data) v = T(rng.truncated_normal(sigma));
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) t.data[i] = U(data[i]);
    return t;
  }
};

// Raises if any entry is NaN or +-Inf. A raw sum of finite values is
// finite, and any non-finite entry poisons it, so one pass suffices.
template <typename T>
inline void ensure_finite(const Tensor<T>& t, const char* where) {
  double acc = 0.0;
  const T* p = t.data.data();
  const size_t n = t.data.size();
  for (size_t i = 0; i < n; ++i) acc += double(p[i]);
  if (!std::isfinite(acc)) {
    fail(ErrorKind::non_finite,
         std::string("non-finite value produced by ") + where);
  }
}

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
  double acc = 0.0;
  for (const T& v : t.data) acc += double(v);
  return std::isfinite(acc);
}

// Trainable (or frozen) model weight: value plus accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool freeze = false)
      : name(std::move(n)), value(std::move(v)), frozen(freeze) {
    grad = Tensor<T>::zeros(value.shape);
  }

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
  i64 numel() const { return value.numel(); }
};

}  // namespace vamoe
