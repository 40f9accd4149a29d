#pragma once

#include <cmath>
#include <vector>

#include "hccm/rng.hpp"
#include "hccm/tensor.hpp"

namespace hccm::testing {

/// rows x cols matrix with unit-norm Gaussian rows.
template <typename T>
Tensor<T> random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = rng.normal();
      t.at(r, c) = static_cast<T>(v);
      n += v * v;
    }
    n = std::sqrt(n);
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = static_cast<T>(t.at(r, c) / n);
  }
  return t;
}

template <typename T>
Tensor<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor<T> t = Tensor<T>::zeros({rows, cols});
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

inline double dot_rows(const Tensor<double>& a, std::size_t i, const Tensor<double>& b,
                       std::size_t j) {
  double s = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(i, c) * b.at(j, c);
  return s;
}

/// -log softmax(logits)[target], computed in plain scalar code.
inline double neg_log_softmax(const std::vector<double>& logits, std::size_t target) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[target] - mx - std::log(z));
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  double tv = 0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return tv / 2;
}

}  // namespace hccm::testing
