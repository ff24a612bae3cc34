// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the forward kernels used by the Perceiver.
// Kernels are pure functions; every public kernel rejects non-finite output.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vpq/errors.hpp"

namespace vpq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  /// Builds a [rows.size(), cols] matrix from nested rows.
  static BasicTensor from_rows(const std::vector<std::vector<T>>& rows) {
    if (rows.empty()) throw DimensionError("from_rows needs at least one row");
    const std::size_t cols = rows.front().size();
    std::vector<T> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Size of the last axis; rank-0 tensors count as one column.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const BasicTensor<T>& t, const char* op) {
  if (!all_finite(t.data())) throw NumericError(std::string("non-finite value produced by ") + op);
}

namespace detail {

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]; inner loop is contiguous in both b and c.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const T* arow = a + r * k;
    const T* brow = b + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc{};
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void softmax_inplace(std::span<T> x) {
  const T mx = *std::max_element(x.begin(), x.end());
  T sum{};
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  const T inv = T{1} / sum;
  for (auto& v : x) v *= inv;
}

// Single-group scaled dot-product attention, heads split along columns.
// q: [nq, d], k/v: [nk, d], out: [nq, d], probs: [heads * nq, nk].
template <typename T>
void attention_group(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t nq,
                     std::size_t nk, std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      T* prow = probs + (h * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) prow[j] = dot(q + i * d + off, k + j * d + off, dh) * scale;
      softmax_inplace(std::span<T>(prow, nk));
      T* orow = out + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const T p = prow[j];
        const T* vrow = v + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
      }
    }
  }
}

template <typename T>
constexpr T kGeluScale = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluCubic = static_cast<T>(0.044715);

}  // namespace detail

/// c = a * b for a: [m,k], b: [k,n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  BasicTensor<T> c({m, n});
  detail::gemm_accumulate(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  require_finite(c, "matmul");
  return c;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  BasicTensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

/// Softmax along the last axis with max subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  require_finite(x, "softmax input");
  BasicTensor<T> y = x;
  if (y.empty()) return y;
  for (std::size_t r = 0; r < y.rows(); ++r) detail::softmax_inplace(y.row(r));
  return y;
}

/// Row-wise layer normalisation. A row with zero variance normalises to zero,
/// so the output is beta even when eps is zero.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = static_cast<T>(1e-5)) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(d));
  }
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    T mean{};
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var{};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T denom = var + eps;
    const T rstd = denom > T{0} ? T{1} / std::sqrt(denom) : T{0};
    for (std::size_t c = 0; c < d; ++c) out[c] = (in[c] - mean) * rstd * gamma[c] + beta[c];
  }
  require_finite(y, "layer_norm");
  return y;
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
T gelu(T x) {
  const T inner = detail::kGeluScale<T> * (x + detail::kGeluCubic<T> * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(inner));
}

template <typename T>
T gelu_derivative(T x) {
  const T inner = detail::kGeluScale<T> * (x + detail::kGeluCubic<T> * x * x * x);
  const T th = std::tanh(inner);
  const T dinner = detail::kGeluScale<T> * (T{1} + 3 * detail::kGeluCubic<T> * x * x);
  return static_cast<T>(0.5) * (T{1} + th) + static_cast<T>(0.5) * x * (T{1} - th * th) * dinner;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.values()) v = gelu(v);
  require_finite(y, "gelu");
  return y;
}

/// Cosine similarity clamped to [-1, 1]. Two zero vectors compare as 0; a zero
/// vector against a non-zero one is 0 as well.
template <typename T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw DimensionError("cosine_similarity: length mismatch");
  T uv{}, uu{}, vv{};
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == T{0} || vv == T{0}) return T{0};
  const T s = uv / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(s, T{-1}, T{1});
}

template <typename T>
T cosine_similarity(const BasicTensor<T>& u, const BasicTensor<T>& v) {
  return cosine_similarity<T>(u.data(), v.data());
}

/// Scaled dot-product attention, softmax(q k^T / sqrt(d/heads)) v per head.
/// Optionally returns the attention weights as [heads * nq, nk].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t heads = 1, BasicTensor<T>* weights = nullptr) {
  detail::require_matrix(q, "attention");
  detail::require_matrix(k, "attention");
  detail::require_matrix(v, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v shapes do not compose");
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (q.rows() == 0 || k.rows() == 0) throw ContractError("attention: empty query or key set");
  BasicTensor<T> out({q.rows(), d});
  BasicTensor<T> probs({heads * q.rows(), k.rows()});
  detail::attention_group(q.data().data(), k.data().data(), v.data().data(), out.data().data(),
                          probs.data().data(), q.rows(), k.rows(), d, heads);
  require_finite(out, "attention");
  if (weights) *weights = std::move(probs);
  return out;
}

}  // namespace vpq
