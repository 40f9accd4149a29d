#pragma once

// Differentiable kernels. Every kernel takes the tape first and records a
// backward rule when any input requires a gradient.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "hccm/tensor.hpp"

namespace hccm::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> mat(std::span<T> s, std::size_t r, std::size_t c) {
  return Eigen::Map<RowMat<T>>(s.data(), static_cast<Eigen::Index>(r),
                               static_cast<Eigen::Index>(c));
}

template <typename T>
Eigen::Map<const RowMat<T>> cmat(std::span<const T> s, std::size_t r, std::size_t c) {
  return Eigen::Map<const RowMat<T>>(s.data(), static_cast<Eigen::Index>(r),
                                     static_cast<Eigen::Index>(c));
}

template <typename T>
void check_same(std::string_view kernel, const Tensor<T>& a, const Tensor<T>& b) {
  require<ShapeError>(a.shape() == b.shape(), kernel, ": shape mismatch ", shape_str(a.shape()),
                      " vs ", shape_str(b.shape()));
}

template <typename T>
void check_matrix(std::string_view kernel, const Tensor<T>& a) {
  require<ShapeError>(a.ndim() == 2, kernel, ": expected a matrix, got shape ",
                      shape_str(a.shape()));
}

template <typename T>
void check_last_axis(std::string_view kernel, const Tensor<T>& a) {
  require<ShapeError>(a.ndim() >= 1 && a.cols() > 0 && a.size() > 0, kernel,
                      ": empty last axis in shape ", shape_str(a.shape()));
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename T, typename F, typename D>
Tensor<T> unary(Tape<T>& tape, std::string_view kernel, const Tensor<T>& a, F f, D dfdx) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  if (tape.wants({&a})) {
    tape.record(kernel, {a}, out, [a, out, dfdx]() mutable {
      auto g = out.grad();
      auto x = a.data();
      auto y = out.data();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] * b[k,n]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  require<ShapeError>(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                      "matmul: shape mismatch ", shape_str(a.shape()), " x ",
                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  mat(out.data(), m, n).noalias() = cmat(a.data(), m, k) * cmat(b.data(), k, n);
  if (tape.wants({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      auto go = cmat<T>(out.grad(), m, n);
      if (a.requires_grad())
        mat(a.ensure_grad(), m, k).noalias() += go * cmat(b.data(), k, n).transpose();
      if (b.requires_grad())
        mat(b.ensure_grad(), k, n).noalias() += cmat(a.data(), m, k).transpose() * go;
    });
  }
  return out;
}

/// a[m,k] * b[n,k]^T
template <typename T>
Tensor<T> matmul_nt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  require<ShapeError>(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                      "matmul_nt: shape mismatch ", shape_str(a.shape()), " x ",
                      shape_str(b.shape()), "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  mat(out.data(), m, n).noalias() = cmat(a.data(), m, k) * cmat(b.data(), n, k).transpose();
  if (tape.wants({&a, &b})) {
    tape.record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() mutable {
      auto go = cmat<T>(out.grad(), m, n);
      if (a.requires_grad()) mat(a.ensure_grad(), m, k).noalias() += go * cmat(b.data(), n, k);
      if (b.requires_grad())
        mat(b.ensure_grad(), n, k).noalias() += go.transpose() * cmat(a.data(), m, k);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary (identical shapes)

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("add", a, b);
  Tensor<T> out = a.clone();
  auto y = out.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += xb[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      accumulate_grad<T>(a, out.grad());
      accumulate_grad<T>(b, out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("sub", a, b);
  Tensor<T> out = a.clone();
  auto y = out.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= xb[i];
  if (tape.wants({&a, &b})) {
    tape.record("sub", {a, b}, out, [a, b, out]() mutable {
      accumulate_grad<T>(a, out.grad());
      if (b.requires_grad()) {
        auto g = out.grad();
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("mul", a, b);
  Tensor<T> out = a.clone();
  auto y = out.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= xb[i];
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        auto xb = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        auto xa = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("div", a, b);
  Tensor<T> out = a.clone();
  auto y = out.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= xb[i];
  if (tape.wants({&a, &b})) {
    tape.record("div", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto xb = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / xb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        auto y = out.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / xb[i];
      }
    });
  }
  return out;
}

// Subgradient convention for min/max: ties route the gradient to the first argument.
template <typename T>
Tensor<T> minimum(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("minimum", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto xa = a.data();
  auto xb = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xb[i] < xa[i] ? xb[i] : xa[i];
  if (tape.wants({&a, &b})) {
    tape.record("minimum", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto xa = a.data();
      auto xb = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(xb[i] < xa[i])) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xb[i] < xa[i]) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maximum(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same("maximum", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto xa = a.data();
  auto xb = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xb[i] > xa[i] ? xb[i] : xa[i];
  if (tape.wants({&a, &b})) {
    tape.record("maximum", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto xa = a.data();
      auto xb = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(xb[i] > xa[i])) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xb[i] > xa[i]) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// a[..., n] + bias[n], broadcast over rows.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& bias) {
  require<ShapeError>(bias.ndim() == 1 && a.ndim() >= 1 && a.cols() == bias.dim(0),
                      "add_bias: shape mismatch ", shape_str(a.shape()), " + ",
                      shape_str(bias.shape()));
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor<T> out = a.clone();
  auto y = out.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += b[c];
  if (tape.wants({&a, &bias})) {
    tape.record("add_bias", {a, bias}, out, [a, bias, out, rows, cols]() mutable {
      auto g = out.grad();
      accumulate_grad<T>(a, g);
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  return detail::unary(tape, "scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
  return detail::unary(tape, "add_scalar", a, [c](T x) { return x + c; },
                       [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary(tape, "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& a) {
  require<ShapeError>(a.size() > 0, "log: empty input of shape ", shape_str(a.shape()));
  return detail::unary(tape, "log", a, [](T x) { return std::log(x); },
                       [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary(
      tape, "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> abs(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary(tape, "abs", a, [](T x) { return std::abs(x); },
                       [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      tape, "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) +
               x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

// ---------------------------------------------------------------------------
// Row-wise (last axis) kernels

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a) {
  detail::check_last_axis("softmax", a);
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = y.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (std::size_t c = 0; c < n; ++c) sum += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < n; ++c) yr[c] /= sum;
  }
  if (tape.wants({&a})) {
    tape.record("softmax", {a}, out, [a, out, rows, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& a) {
  detail::check_last_axis("log_softmax", a);
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = y.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (std::size_t c = 0; c < n; ++c) sum += std::exp(xr[c] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t c = 0; c < n; ++c) yr[c] = xr[c] - lse;
  }
  if (tape.wants({&a})) {
    tape.record("log_softmax", {a}, out, [a, out, rows, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T gsum = 0;
        for (std::size_t c = 0; c < n; ++c) gsum += g[r * n + c];
        for (std::size_t c = 0; c < n; ++c)
          ga[r * n + c] += g[r * n + c] - std::exp(y[r * n + c]) * gsum;
      }
    });
  }
  return out;
}

/// x / sqrt(sum(x^2) + eps) along the last axis. The default eps keeps zero
/// rows finite while rows with norm >= 1e-8 come out unit length to 1e-6.
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& a, T eps = T(1e-24)) {
  detail::check_last_axis("l2_normalize", a);
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  std::vector<T> norms(rows);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < n; ++c) ss += x[r * n + c] * x[r * n + c];
    norms[r] = std::sqrt(ss + eps);
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = x[r * n + c] / norms[r];
  }
  if (tape.wants({&a})) {
    tape.record("l2_normalize", {a}, out, [a, out, rows, n, norms]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
        for (std::size_t c = 0; c < n; ++c)
          ga[r * n + c] += (g[r * n + c] - y[r * n + c] * dot) / norms[r];
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis with affine gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  detail::check_last_axis("layer_norm", a);
  const std::size_t rows = a.rows(), n = a.cols();
  require<ShapeError>(gain.size() == n && bias.size() == n, "layer_norm: shape mismatch ",
                      shape_str(a.shape()), " with gain ", shape_str(gain.shape()), " bias ",
                      shape_str(bias.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  std::vector<T> xhat(a.size());
  std::vector<T> inv_std(rows);
  auto x = a.data();
  auto y = out.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += x[r * n + c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T d = x[r * n + c] - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (x[r * n + c] - mean) * inv_std[r];
      y[r * n + c] = gv[c] * xhat[r * n + c] + bv[c];
    }
  }
  if (tape.wants({&a, &gain, &bias})) {
    tape.record("layer_norm", {a, gain, bias}, out,
                [a, gain, bias, out, rows, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)]() mutable {
                  auto g = out.grad();
                  auto gv = gain.data();
                  if (gain.requires_grad()) {
                    auto gg = gain.ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                  }
                  if (a.requires_grad()) {
                    auto ga = a.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      T m1 = 0, m2 = 0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const T dxh = g[r * n + c] * gv[c];
                        m1 += dxh;
                        m2 += dxh * xhat[r * n + c];
                      }
                      m1 /= T(n);
                      m2 /= T(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const T dxh = g[r * n + c] * gv[c];
                        ga[r * n + c] += inv_std[r] * (dxh - m1 - xhat[r * n + c] * m2);
                      }
                    }
                  }
                });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.wants({&a})) {
    tape.record("sum", {a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      auto ga = a.ensure_grad();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  require<ShapeError>(a.size() > 0, "mean: empty input");
  return scale(tape, sum(tape, a), T(1) / T(a.size()));
}

/// Sum over the last axis: [..., n] -> [...].
template <typename T>
Tensor<T> sum_rows(Tape<T>& tape, const Tensor<T>& a) {
  detail::check_last_axis("sum_rows", a);
  const std::size_t rows = a.rows(), n = a.cols();
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<T> out = Tensor<T>::zeros(shape);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) y[r] += x[r * n + c];
  if (tape.wants({&a})) {
    tape.record("sum_rows", {a}, out, [a, out, rows, n]() mutable {
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r];
    });
  }
  return out;
}

/// Rows of a[m, n] selected by index (repeats allowed).
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, std::span<const std::size_t> index) {
  detail::check_matrix("gather_rows", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  for (std::size_t i : index)
    require<ShapeError>(i < m, "gather_rows: index ", i, " out of range for shape ",
                        shape_str(a.shape()));
  Tensor<T> out = Tensor<T>::zeros({index.size(), n});
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(x.begin() + index[r] * n, n, y.begin() + r * n);
  if (tape.wants({&a})) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record("gather_rows", {a}, out, [a, out, n, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < n; ++c) ga[idx[r] * n + c] += g[r * n + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, const std::vector<std::size_t>& index) {
  return gather_rows(tape, a, std::span<const std::size_t>(index));
}

/// out[r] = a[r, index[r]]
template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, std::span<const std::size_t> index) {
  detail::check_matrix("pick", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  require<ShapeError>(index.size() == m, "pick: ", index.size(), " indices for shape ",
                      shape_str(a.shape()));
  Tensor<T> out = Tensor<T>::zeros({m});
  for (std::size_t r = 0; r < m; ++r) {
    require<ShapeError>(index[r] < n, "pick: column ", index[r], " out of range for shape ",
                        shape_str(a.shape()));
    out[r] = a[r * n + index[r]];
  }
  if (tape.wants({&a})) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record("pick", {a}, out, [a, out, n, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) ga[r * n + idx[r]] += g[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, const std::vector<std::size_t>& index) {
  return pick(tape, a, std::span<const std::size_t>(index));
}

/// Stack matrices with equal column counts along the row axis.
template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  require<ShapeError>(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require<ShapeError>(p.ndim() == 2 && p.cols() == n, "concat_rows: shape mismatch ",
                        shape_str(parts.front().shape()), " vs ", shape_str(p.shape()));
    rows += p.dim(0);
  }
  Buffer<T> data;
  data.reserve(rows * n);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  Tensor<T> out({rows, n}, std::move(data));
  bool any = false;
  if (tape.recording())
    for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    tape.record("concat_rows", parts, out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) accumulate_grad<T>(p, g.subspan(offset, p.size()));
        offset += p.size();
      }
    });
  }
  return out;
}

/// Columns [begin, begin + len) of a matrix.
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& a, std::size_t begin, std::size_t len) {
  detail::check_matrix("slice_cols", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  require<ShapeError>(begin + len <= n, "slice_cols: range [", begin, ",", begin + len,
                      ") out of bounds for shape ", shape_str(a.shape()));
  Tensor<T> out = Tensor<T>::zeros({m, len});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = a[r * n + begin + c];
  if (tape.wants({&a})) {
    tape.record("slice_cols", {a}, out, [a, out, m, n, begin, len]() mutable {
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < len; ++c) ga[r * n + begin + c] += g[r * len + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  require<ShapeError>(shape_numel(shape) == a.size(), "reshape: cannot view ",
                      shape_str(a.shape()), " as ", shape_str(shape));
  Tensor<T> out(std::move(shape), a.values());
  if (tape.wants({&a})) {
    tape.record("reshape", {a}, out, [a, out]() mutable { accumulate_grad<T>(a, out.grad()); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// One attention problem inside a row-concatenated batch: queries
/// [q_begin, q_begin + q_len) attend to keys [k_begin, k_begin + k_len).
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
};

/// Multi-head scaled dot-product attention over ragged segments.
///
/// q is [Rq, d]; k and v are [Rk, d]. Heads split the feature axis. key_mask,
/// when non-empty, has one entry per key row and excludes zero entries. A
/// query whose segment has no valid key produces a zero row.
template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, std::span<const AttentionSegment> segments,
                    std::span<const std::uint8_t> key_mask = {}) {
  using namespace detail;
  check_matrix("attention", q);
  check_matrix("attention", k);
  check_matrix("attention", v);
  const std::size_t d = q.dim(1);
  require<ShapeError>(k.dim(1) == d && v.dim(1) == d && k.dim(0) == v.dim(0),
                      "attention: shape mismatch q ", shape_str(q.shape()), " k ",
                      shape_str(k.shape()), " v ", shape_str(v.shape()));
  require<ShapeError>(heads > 0 && d % heads == 0, "attention: width ", d,
                      " not divisible by heads ", heads);
  require<ShapeError>(key_mask.empty() || key_mask.size() == k.dim(0),
                      "attention: key mask length ", key_mask.size(), " vs keys ", k.dim(0));
  for (const auto& s : segments)
    require<ShapeError>(s.q_begin + s.q_len <= q.dim(0) && s.k_begin + s.k_len <= k.dim(0),
                        "attention: segment out of range");
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  const std::size_t rq = q.dim(0), rk = k.dim(0);

  Tensor<T> out = Tensor<T>::zeros({rq, d});
  // Saved attention probabilities, one qn x kn block per segment and head.
  Buffer<T> probs;
  std::vector<std::size_t> prob_offset(segments.size() * heads);
  {
    std::size_t total = 0;
    for (std::size_t si = 0; si < segments.size(); ++si)
      for (std::size_t h = 0; h < heads; ++h) {
        prob_offset[si * heads + h] = total;
        total += segments[si].q_len * segments[si].k_len;
      }
    probs.assign(total, T(0));
  }
  auto Q = cmat(q.data(), rq, d);
  auto K = cmat(k.data(), rk, d);
  auto V = cmat(v.data(), rk, d);
  auto O = mat(out.data(), rq, d);
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto& s = segments[si];
    if (s.q_len == 0 || s.k_len == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qi = static_cast<Eigen::Index>(s.q_begin), ki = static_cast<Eigen::Index>(s.k_begin);
      const auto qn = static_cast<Eigen::Index>(s.q_len), kn = static_cast<Eigen::Index>(s.k_len);
      const auto hc = static_cast<Eigen::Index>(h * dh), hn = static_cast<Eigen::Index>(dh);
      auto P = mat(std::span<T>(probs).subspan(prob_offset[si * heads + h], s.q_len * s.k_len),
                   s.q_len, s.k_len);
      P.noalias() = Q.block(qi, hc, qn, hn) * K.block(ki, hc, kn, hn).transpose();
      for (Eigen::Index r = 0; r < qn; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < kn; ++c) {
          if (!key_mask.empty() && !key_mask[s.k_begin + c]) continue;
          mx = std::max(mx, P(r, c) * inv_scale);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          P.row(r).setZero();
          continue;
        }
        T sum = 0;
        for (Eigen::Index c = 0; c < kn; ++c) {
          if (!key_mask.empty() && !key_mask[s.k_begin + c]) {
            P(r, c) = 0;
            continue;
          }
          P(r, c) = std::exp(P(r, c) * inv_scale - mx);
          sum += P(r, c);
        }
        P.row(r) /= sum;
      }
      O.block(qi, hc, qn, hn).noalias() = P * V.block(ki, hc, kn, hn);
    }
  }

  if (tape.wants({&q, &k, &v})) {
    std::vector<AttentionSegment> segs(segments.begin(), segments.end());
    tape.record("attention", {q, k, v}, out,
                [q, k, v, out, heads, dh, inv_scale, rq, rk, d, segs = std::move(segs),
                 probs = std::move(probs), prob_offset = std::move(prob_offset)]() mutable {
                  auto G = cmat<T>(out.grad(), rq, d);
                  auto Q = cmat(q.data(), rq, d);
                  auto K = cmat(k.data(), rk, d);
                  auto V = cmat(v.data(), rk, d);
                  // Gradients go to scratch buffers so shared q/k/v storage stays consistent.
                  RowMat<T> GQ = RowMat<T>::Zero(rq, d), GK = RowMat<T>::Zero(rk, d),
                            GV = RowMat<T>::Zero(rk, d);
                  RowMat<T> dP;
                  for (std::size_t si = 0; si < segs.size(); ++si) {
                    const auto& s = segs[si];
                    if (s.q_len == 0 || s.k_len == 0) continue;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const auto qi = static_cast<Eigen::Index>(s.q_begin);
                      const auto ki = static_cast<Eigen::Index>(s.k_begin);
                      const auto qn = static_cast<Eigen::Index>(s.q_len);
                      const auto kn = static_cast<Eigen::Index>(s.k_len);
                      const auto hc = static_cast<Eigen::Index>(h * dh);
                      const auto hn = static_cast<Eigen::Index>(dh);
                      auto P = cmat<T>(std::span<const T>(probs).subspan(
                                           prob_offset[si * heads + h], s.q_len * s.k_len),
                                       s.q_len, s.k_len);
                      auto Gh = G.block(qi, hc, qn, hn);
                      GV.block(ki, hc, kn, hn).noalias() += P.transpose() * Gh;
                      dP.noalias() = Gh * V.block(ki, hc, kn, hn).transpose();
                      for (Eigen::Index r = 0; r < qn; ++r) {
                        const T dot = dP.row(r).dot(P.row(r));
                        for (Eigen::Index c = 0; c < kn; ++c)
                          dP(r, c) = P(r, c) * (dP(r, c) - dot) * inv_scale;
                      }
                      GQ.block(qi, hc, qn, hn).noalias() += dP * K.block(ki, hc, kn, hn);
                      GK.block(ki, hc, kn, hn).noalias() +=
                          dP.transpose() * Q.block(qi, hc, qn, hn);
                    }
                  }
                  if (q.requires_grad()) mat(q.ensure_grad(), rq, d) += GQ;
                  if (k.requires_grad()) mat(k.ensure_grad(), rk, d) += GK;
                  if (v.requires_grad()) mat(v.ensure_grad(), rk, d) += GV;
                });
  }
  return out;
}

template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, const std::vector<AttentionSegment>& segments,
                    const std::vector<std::uint8_t>& key_mask = {}) {
  return attention(tape, q, k, v, heads, std::span<const AttentionSegment>(segments),
                   std::span<const std::uint8_t>(key_mask));
}

/// Fully connected layer: x[m, in] * w[in, out] (+ b[out]).
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(tape, x, w);
  return b.defined() ? add_bias(tape, y, b) : y;
}

}  // namespace hccm::ops
