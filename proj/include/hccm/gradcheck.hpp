#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hccm/tensor.hpp"

namespace hccm {

/// Scalar-valued function of the tensors it captured; builds its graph on the given tape.
using ScalarFn = std::function<Tensor<double>(Tape<double>&)>;

/// Max over all coordinates of every tensor in `wrt` of
/// |analytic - central difference| / max(1, |analytic|).
///
/// The tensors in `wrt` are perturbed in place and restored afterwards. Their
/// gradients are reset before the analytic pass.
inline double finite_difference_check(const ScalarFn& f, std::vector<Tensor<double>> wrt,
                                      double h = 1e-6) {
  require(h >= 1e-6 && h <= 1e-4, "finite_difference_check: step ", h,
          " outside [1e-6, 1e-4]");
  std::vector<bool> saved_flags;
  for (auto& t : wrt) {
    saved_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> y = f(tape);
    require<NumericError>(y.size() == 1 && std::isfinite(y.item()),
                          "finite_difference_check: f(x) is not a finite scalar");
    const bool on_tape = std::any_of(tape.ops().begin(), tape.ops().end(),
                                     [&](const auto& op) { return op.output.same_storage(y); });
    if (on_tape) tape.backward(y);
    for (auto& t : wrt) {
      if (t.has_grad())
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      else
        analytic.emplace_back(t.size(), 0.0);
    }
  }

  auto eval = [&]() {
    Tape<double> tape(false);
    const double v = f(tape).item();
    require<NumericError>(std::isfinite(v), "finite_difference_check: non-finite f");
    return v;
  };

  double worst = 0.0;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto x = wrt[ti].data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = eval();
      x[i] = orig - h;
      const double fm = eval();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    wrt[ti].clear_grad();
    wrt[ti].set_requires_grad(saved_flags[ti]);
  }
  return worst;
}

/// Single-input convenience form: f receives the tape and x.
inline double finite_difference_check(
    const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
    Tensor<double> x, double h = 1e-6) {
  return finite_difference_check([&](Tape<double>& tape) { return f(tape, x); },
                                 std::vector<Tensor<double>>{x}, h);
}

}  // namespace hccm
