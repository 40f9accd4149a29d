#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/model.hpp"
#include "hccm/ops.hpp"
#include "hccm/tensor.hpp"

namespace hccm {

/// EMA shadow of the encoders and projections. Never receives gradients.
template <typename T>
struct MomentumParams {
  ParamStore<T> shadow;
  std::uint64_t step = 0;

  /// Shadow initialized as an exact copy of the tracked online subset.
  static MomentumParams from_online(const ParamStore<T>& online) {
    return {online.subset(momentum_prefixes()).clone(false), 0};
  }
};

/// shadow <- beta * shadow + (1 - beta) * online for every tracked tensor.
template <typename T>
void ema_update(const ParamStore<T>& online, MomentumParams<T>& m, double beta) {
  require(beta >= 0.0 && beta <= 1.0, "ema_update: beta ", beta, " outside [0,1]");
  const auto tracked = online.subset(momentum_prefixes());
  require(tracked.size() == m.shadow.size(), "ema_update: shadow has ", m.shadow.size(),
          " tensors, online tracked subset has ", tracked.size());
  for (const auto& [name, s] : m.shadow) {
    require(tracked.contains(name), "ema_update: shadow tensor '", name,
            "' has no online counterpart");
    const auto& o = tracked.at(name);
    require<ShapeError>(o.shape() == s.shape(), "ema_update: '", name, "' shape ",
                        shape_str(s.shape()), " vs online ", shape_str(o.shape()));
  }
  const T b = static_cast<T>(beta), a = static_cast<T>(1.0 - beta);
  for (const auto& [name, s] : m.shadow) {
    Tensor<T> sh = s;
    auto dst = sh.data();
    auto src = tracked.at(name).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = b * dst[i] + a * src[i];
  }
  ++m.step;
}

/// Fixed-capacity FIFO ring of unit embeddings.
template <typename T>
class MomentumQueue {
 public:
  MomentumQueue() = default;
  MomentumQueue(std::size_t capacity, std::size_t dim)
      : capacity_(capacity), dim_(dim), storage_(capacity * dim, T(0)) {
    require(dim > 0, "queue: dimension must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t write_head() const { return head_; }
  std::size_t valid_count() const { return valid_; }
  const Buffer<T>& storage() const { return storage_; }

  /// Append a batch of unit rows, evicting the oldest rows once full.
  void enqueue(const Tensor<T>& batch) {
    require<ShapeError>(batch.ndim() == 2 && batch.dim(1) == dim_, "enqueue: batch shape ",
                        shape_str(batch.shape()), " vs queue dim ", dim_);
    const std::size_t n = batch.dim(0);
    require(n > 0 && capacity_ % n == 0, "enqueue: batch of ", n,
            " rows does not divide capacity ", capacity_);
    for (std::size_t r = 0; r < n; ++r) {
      double norm = 0;
      for (std::size_t c = 0; c < dim_; ++c) norm += double(batch.at(r, c)) * batch.at(r, c);
      require(std::abs(std::sqrt(norm) - 1.0) <= 1e-4, "enqueue: row ", r, " has norm ",
              std::sqrt(norm), ", expected unit rows");
    }
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(batch.data().begin() + r * dim_, dim_, storage_.begin() + head_ * dim_);
      head_ = (head_ + 1) % capacity_;
    }
    valid_ = std::min(valid_ + n, capacity_);
  }

  /// Valid rows, oldest first.
  Tensor<T> valid_rows() const {
    Tensor<T> out = Tensor<T>::zeros({valid_, dim_});
    const std::size_t start = valid_ < capacity_ ? 0 : head_;
    for (std::size_t i = 0; i < valid_; ++i) {
      const std::size_t slot = (start + i) % capacity_;
      std::copy_n(storage_.begin() + slot * dim_, dim_, out.data().begin() + i * dim_);
    }
    return out;
  }

  void clear() {
    std::fill(storage_.begin(), storage_.end(), T(0));
    head_ = valid_ = 0;
  }

  /// Restore raw state, e.g. from a checkpoint.
  void restore(Buffer<T> storage, std::size_t head, std::size_t valid) {
    require(storage.size() == capacity_ * dim_ && head < std::max<std::size_t>(capacity_, 1) &&
                valid <= capacity_,
            "queue: inconsistent restored state");
    storage_ = std::move(storage);
    head_ = head;
    valid_ = valid;
  }

  bool operator==(const MomentumQueue&) const = default;

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t head_ = 0;
  std::size_t valid_ = 0;
  Buffer<T> storage_;
};

/// [batch; valid queue rows]: the positive for sample i sits at index i.
template <typename T>
Tensor<T> candidate_set(const MomentumQueue<T>& queue, const Tensor<T>& batch_momentum) {
  require<ShapeError>(batch_momentum.ndim() == 2 && batch_momentum.dim(1) == queue.dim(),
                      "candidate_set: batch shape ", shape_str(batch_momentum.shape()),
                      " vs queue dim ", queue.dim());
  if (queue.valid_count() == 0) return batch_momentum.clone();
  Tape<T> tape(false);
  return ops::concat_rows(tape, std::vector<Tensor<T>>{batch_momentum.clone(), queue.valid_rows()});
}

template <typename T>
struct SoftTargets {
  Tensor<T> q_i2t;  // N x M
  Tensor<T> q_t2i;  // N x M
};

/// alpha * softmax(momentum similarities / tau) + (1 - alpha) * one-hot(i).
template <typename T>
SoftTargets<T> soft_targets(const Tensor<T>& z_v_m, const Tensor<T>& z_t_m,
                            const Tensor<T>& Z_v_m, const Tensor<T>& Z_t_m, double alpha,
                            double tau) {
  require(tau > 0.0, "soft_targets: tau must be positive, got ", tau);
  require(alpha >= 0.0 && alpha <= 1.0, "soft_targets: alpha ", alpha, " outside [0,1]");
  require<ShapeError>(z_v_m.shape() == z_t_m.shape() && Z_v_m.shape() == Z_t_m.shape() &&
                          z_v_m.ndim() == 2 && Z_v_m.ndim() == 2 && z_v_m.dim(1) == Z_v_m.dim(1) &&
                          Z_v_m.dim(0) >= z_v_m.dim(0),
                      "soft_targets: shapes ", shape_str(z_v_m.shape()), " / ",
                      shape_str(Z_v_m.shape()), " are inconsistent");
  Tape<T> tape(false);
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto blend = [&](const Tensor<T>& q, const Tensor<T>& cands) {
    Tensor<T> p = ops::softmax(tape, ops::scale(tape, ops::matmul_nt(tape, q, cands), inv_tau));
    const std::size_t n = p.dim(0), m = p.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        p[i * m + j] = static_cast<T>(alpha * p[i * m + j] + (i == j ? 1.0 - alpha : 0.0));
    return p;
  };
  return {blend(z_v_m, Z_t_m), blend(z_t_m, Z_v_m)};
}

}  // namespace hccm
