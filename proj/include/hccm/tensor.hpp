#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "hccm/error.hpp"

namespace hccm {

/// Storage with a fixed alignment. Vectorized reductions peel their loops by
/// pointer alignment, so buffers must not depend on where malloc lands for
/// results to be bit-reproducible.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, so a parameter referenced by a
/// recorded operation and by the optimizer is the same object. Use clone() for
/// an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::span<const T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    require<ShapeError>(shape_numel(shape) == data.size(), "tensor: shape ", shape_str(shape),
                        " holds ", shape_numel(shape), " values but ", data.size(), " given");
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::span<const T>(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::span<const T>(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return s_->shape; }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }
  bool is_scalar() const { return s_->data.size() == 1 && s_->shape.size() <= 1; }

  /// Rows of the tensor viewed as a matrix over its last axis.
  std::size_t rows() const {
    if (s_->shape.empty()) return 1;
    return size() / s_->shape.back();
  }
  /// Extent of the last axis (1 for scalars).
  std::size_t cols() const { return s_->shape.empty() ? 1 : s_->shape.back(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  Buffer<T>& values() { return s_->data; }
  const Buffer<T>& values() const { return s_->data; }
  std::vector<T> to_vector() const { return {s_->data.begin(), s_->data.end()}; }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  T item() const {
    require<ShapeError>(size() == 1, "item: tensor of shape ", shape_str(shape()),
                        " is not a scalar");
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  // Gradient bookkeeping is mutable through const handles, like the autodiff
  // record itself.
  void set_requires_grad(bool on) const { s_->requires_grad = on; }

  bool has_grad() const { return s_->has_grad; }
  std::span<T> grad() const { return s_->grad; }

  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> ensure_grad() const {
    if (!s_->has_grad) {
      s_->grad.assign(s_->data.size(), T(0));
      s_->has_grad = true;
    }
    return s_->grad;
  }
  void zero_grad() const {
    if (s_->has_grad) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }
  void clear_grad() const {
    s_->grad.clear();
    s_->grad.shrink_to_fit();
    s_->has_grad = false;
  }

  /// Deep copy of the values, detached, without gradient.
  Tensor clone() const { return Tensor(shape(), s_->data, false); }
  Tensor clone(bool requires_grad) const { return Tensor(shape(), s_->data, requires_grad); }

  template <typename U>
  Tensor<U> cast(bool requires_grad = false) const {
    return Tensor<U>(shape(), Buffer<U>(s_->data.begin(), s_->data.end()), requires_grad);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of differentiable operations.
///
/// Operations are appended as they execute, so the record is topologically
/// ordered. backward() walks it in reverse. A tape constructed with
/// recording == false evaluates kernels without keeping any graph.
template <typename T>
class Tape {
 public:
  struct Op {
    std::string_view kernel;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }
  const std::vector<Op>& ops() const { return ops_; }

  /// True when the kernel output must carry a backward rule.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
  }

  void record(std::string_view kernel, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward) {
    output.set_requires_grad(true);
    ops_.push_back(Op{kernel, std::move(inputs), std::move(output), std::move(backward)});
  }

  /// Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.
  void backward(const Tensor<T>& root) {
    require<ShapeError>(root.defined() && root.size() == 1,
                        "backward: root must be a scalar, got shape ",
                        root.defined() ? shape_str(root.shape()) : std::string("<undefined>"));
    auto it = std::find_if(ops_.rbegin(), ops_.rend(),
                           [&](const Op& op) { return op.output.same_storage(root); });
    require(it != ops_.rend(), "backward: root was not produced on this tape");

    // Intermediate gradients restart from zero on every call; leaves accumulate.
    for (auto& op : ops_) {
      Tensor<T> out = op.output;
      out.ensure_grad();
      out.zero_grad();
    }
    Tensor<T> r = root;
    r.ensure_grad()[0] = T(1);
    for (auto op = it; op != ops_.rend(); ++op) op->backward();
  }

  void clear() { ops_.clear(); }

 private:
  bool recording_;
  std::vector<Op> ops_;
};

/// Add `src` into the gradient of `dst` when `dst` participates in differentiation.
template <typename T>
inline void accumulate_grad(const Tensor<T>& dst, std::span<const T> src) {
  if (!dst.requires_grad()) return;
  auto g = dst.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace hccm
