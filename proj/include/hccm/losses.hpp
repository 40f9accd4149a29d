#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/image.hpp"
#include "hccm/model.hpp"
#include "hccm/momentum.hpp"
#include "hccm/ops.hpp"
#include "hccm/rng.hpp"
#include "hccm/tensor.hpp"

namespace hccm {

// ---------------------------------------------------------------------------
// Embedding carriers

/// Online global embeddings (differentiable) and their momentum counterparts (constants).
template <typename T>
struct GlobalEmbeddings {
  Tensor<T> z_v, z_t;      // N x d'
  Tensor<T> z_v_m, z_t_m;  // N x d'

  std::size_t size() const { return z_v.dim(0); }
};

/// Region embeddings; row r belongs to sample `sample[r]`, region index `k[r]`.
template <typename T>
struct RegionEmbeddings {
  std::vector<std::size_t> sample;
  std::vector<std::size_t> k;
  Tensor<T> z_v, z_t;  // R x d'

  std::size_t size() const { return sample.size(); }
};

template <typename T>
struct EmbeddingBatch {
  GlobalEmbeddings<T> global;
  RegionEmbeddings<T> regions;
  double tau = 0.07;

  void validate(double tol = 1e-4) const {
    require(tau > 0, "embedding batch: tau must be positive");
    const std::size_t n = global.size();
    require(n >= 1, "embedding batch: empty");
    const Shape gs = global.z_v.shape();
    require<ShapeError>(gs.size() == 2 && global.z_t.shape() == gs && global.z_v_m.shape() == gs &&
                            global.z_t_m.shape() == gs,
                        "embedding batch: global shapes disagree");
    require<ShapeError>(regions.k.size() == regions.size() && regions.z_v.dim(0) == regions.size() &&
                            regions.z_t.dim(0) == regions.size() && regions.z_v.dim(1) == gs[1] &&
                            regions.z_t.dim(1) == gs[1],
                        "embedding batch: region shapes disagree");
    for (std::size_t i : regions.sample)
      require(i < n, "embedding batch: region sample ", i, " outside batch of ", n);
    for (const Tensor<T>* t : {&global.z_v, &global.z_t, &global.z_v_m, &global.z_t_m,
                               &regions.z_v, &regions.z_t})
      for (std::size_t r = 0; r < t->rows(); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < t->cols(); ++c) s += double(t->at(r, c)) * t->at(r, c);
        require(std::abs(std::sqrt(s) - 1.0) <= tol, "embedding batch: row ", r,
                " is not unit norm (", std::sqrt(s), ")");
      }
  }
};

// ---------------------------------------------------------------------------
// Contrastive terms

/// Region-to-global contrastive loss against the batch's momentum globals.
/// The candidates are the N momentum embeddings of the other modality; the
/// queue is never involved.
template <typename T>
Tensor<T> rg_itc_loss(Tape<T>& tape, const RegionEmbeddings<T>& regions, const Tensor<T>& z_v_m,
                      const Tensor<T>& z_t_m, double tau) {
  require(regions.size() >= 1, "rg_itc_loss: empty region list");
  require(tau > 0, "rg_itc_loss: tau must be positive");
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto direction = [&](const Tensor<T>& z_r, const Tensor<T>& cands) {
    Tensor<T> logits = ops::scale(tape, ops::matmul_nt(tape, z_r, cands), inv_tau);
    return ops::sum(tape, ops::pick(tape, ops::log_softmax(tape, logits), regions.sample));
  };
  Tensor<T> s = ops::add(tape, direction(regions.z_v, z_t_m), direction(regions.z_t, z_v_m));
  return ops::scale(tape, s, static_cast<T>(-1.0 / (2.0 * double(regions.size()))));
}

template <typename T>
Tensor<T> rg_itc_loss(Tape<T>& tape, const EmbeddingBatch<T>& b) {
  return rg_itc_loss(tape, b.regions, b.global.z_v_m, b.global.z_t_m, b.tau);
}

/// Symmetric cross-entropy between soft targets and online predictions over
/// the momentum candidate sets.
template <typename T>
Tensor<T> itc_mcd_loss(Tape<T>& tape, const Tensor<T>& z_v, const Tensor<T>& z_t,
                       const Tensor<T>& Z_v_m, const Tensor<T>& Z_t_m,
                       const SoftTargets<T>& targets, double tau) {
  require(tau > 0, "itc_mcd_loss: tau must be positive");
  const std::size_t n = z_v.dim(0);
  require<ShapeError>(targets.q_i2t.ndim() == 2 && targets.q_i2t.dim(0) == n &&
                          targets.q_i2t.dim(1) == Z_t_m.dim(0) &&
                          targets.q_t2i.shape() == targets.q_i2t.shape() &&
                          Z_v_m.dim(0) == Z_t_m.dim(0),
                      "itc_mcd_loss: targets ", shape_str(targets.q_i2t.shape()),
                      " do not match ", n, " queries x ", Z_t_m.dim(0), " candidates");
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto direction = [&](const Tensor<T>& z, const Tensor<T>& cands, const Tensor<T>& q) {
    Tensor<T> logp = ops::log_softmax(tape, ops::scale(tape, ops::matmul_nt(tape, z, cands), inv_tau));
    return ops::sum(tape, ops::mul(tape, logp, q));
  };
  Tensor<T> s = ops::add(tape, direction(z_v, Z_t_m, targets.q_i2t),
                         direction(z_t, Z_v_m, targets.q_t2i));
  return ops::scale(tape, s, static_cast<T>(-1.0 / (2.0 * double(n))));
}

// ---------------------------------------------------------------------------
// Matching terms

/// Binary cross-entropy of match-head logits (column 1 = matched) against
/// labels, averaged over the examples.
template <typename T>
Tensor<T> match_bce(Tape<T>& tape, const Tensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  require<ShapeError>(logits.ndim() == 2 && logits.dim(1) == 2 && logits.dim(0) == labels.size(),
                      "match_bce: logits ", shape_str(logits.shape()), " vs ", labels.size(),
                      " labels");
  require(!labels.empty(), "match_bce: no examples");
  std::vector<std::size_t> col(labels.begin(), labels.end());
  Tensor<T> ll = ops::sum(tape, ops::pick(tape, ops::log_softmax(tape, logits), col));
  return ops::scale(tape, ll, static_cast<T>(-1.0 / double(labels.size())));
}

/// Fusion pairs with match labels.
struct MatchPairs {
  std::vector<FusePair> pairs;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return pairs.size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
};

/// Probabilities of drawing each candidate as the negative for anchor
/// `exclude`: softmax(sims / tau) restricted to indices other than `exclude`.
inline std::vector<double> negative_distribution(std::span<const double> sims,
                                                 std::size_t exclude, double tau) {
  require(tau > 0, "negative sampling: tau must be positive");
  require(sims.size() >= 2, "negative sampling: need at least 2 candidates");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (j != exclude) mx = std::max(mx, sims[j] / tau);
  std::vector<double> p(sims.size(), 0.0);
  double total = 0;
  for (std::size_t j = 0; j < sims.size(); ++j) {
    if (j == exclude) continue;
    p[j] = std::exp(sims[j] / tau - mx);
    total += p[j];
  }
  for (auto& x : p) x /= total;
  return p;
}

namespace detail {

template <typename T>
std::vector<double> similarity_row(const Tensor<T>& a, std::size_t r, const Tensor<T>& b) {
  std::vector<double> s(b.dim(0));
  for (std::size_t j = 0; j < b.dim(0); ++j) {
    double acc = 0;
    for (std::size_t c = 0; c < a.cols(); ++c) acc += double(a.at(r, c)) * b.at(j, c);
    s[j] = acc;
  }
  return s;
}

}  // namespace detail

/// Negative indices per anchor: text index and image index, never the anchor itself.
struct HardNegIndices {
  std::vector<std::size_t> j_neg;  // text (caption) sample index
  std::vector<std::size_t> l_neg;  // image sample index

  std::size_t size() const { return j_neg.size(); }
};

/// Per region: a text drawn with probability proportional to
/// exp(s(z_v_region, z_t_j) / tau) and an image drawn with probability
/// proportional to exp(s(z_t_region, z_v_l) / tau), over samples other than
/// the region's own.
template <typename T>
HardNegIndices sample_hard_negatives(const EmbeddingBatch<T>& b, Rng& rng) {
  const std::size_t n = b.global.size();
  require(n >= 2, "sample_hard_negatives: batch of ", n, " has no negatives (need N >= 2)");
  HardNegIndices out;
  for (std::size_t r = 0; r < b.regions.size(); ++r) {
    const std::size_t i = b.regions.sample[r];
    const auto pj = negative_distribution(detail::similarity_row(b.regions.z_v, r, b.global.z_t), i, b.tau);
    out.j_neg.push_back(rng.categorical(pj));
    const auto pl = negative_distribution(detail::similarity_row(b.regions.z_t, r, b.global.z_v), i, b.tau);
    out.l_neg.push_back(rng.categorical(pl));
  }
  return out;
}

/// The same rule at global granularity: one negative text per image and one
/// negative image per text. Empty when the batch has fewer than 2 samples,
/// in which case global matching is skipped.
template <typename T>
std::optional<HardNegIndices> sample_global_negatives(const Tensor<T>& z_v, const Tensor<T>& z_t,
                                                      double tau, Rng& rng) {
  const std::size_t n = z_v.dim(0);
  if (n < 2) return std::nullopt;
  HardNegIndices out;
  for (std::size_t i = 0; i < n; ++i) {
    out.j_neg.push_back(rng.categorical(negative_distribution(detail::similarity_row(z_v, i, z_t), i, tau)));
    out.l_neg.push_back(rng.categorical(negative_distribution(detail::similarity_row(z_t, i, z_v), i, tau)));
  }
  return out;
}

/// Global matching pairs over N images and N captions (sequence i of each
/// batch): N positives, then one negative caption per image, then one
/// negative image per caption.
inline MatchPairs itm_pairs(std::size_t n, const HardNegIndices& neg) {
  require(neg.size() == n && neg.l_neg.size() == n, "itm_pairs: ", neg.size(),
          " negatives for batch of ", n);
  MatchPairs m;
  for (std::size_t i = 0; i < n; ++i) m.pairs.push_back({i, i});
  for (std::size_t i = 0; i < n; ++i) m.pairs.push_back({i, neg.j_neg[i]});
  for (std::size_t i = 0; i < n; ++i) m.pairs.push_back({neg.l_neg[i], i});
  m.labels.assign(n, 1);
  m.labels.resize(3 * n, 0);
  return m;
}

/// Region-global matching pairs. Vision and text sequence indices follow the
/// layout [N globals; R regions]. Order: R region-image/global-text positives,
/// R global-image/region-text positives, then the two negative blocks.
inline MatchPairs rg_itm_pairs(std::size_t n, std::span<const std::size_t> region_sample,
                               const HardNegIndices& neg) {
  const std::size_t r = region_sample.size();
  require(neg.size() == r && neg.l_neg.size() == r, "rg_itm_pairs: negatives for ", neg.size(),
          " regions, batch has ", r);
  MatchPairs m;
  for (std::size_t q = 0; q < r; ++q) m.pairs.push_back({n + q, region_sample[q]});
  for (std::size_t q = 0; q < r; ++q) m.pairs.push_back({region_sample[q], n + q});
  for (std::size_t q = 0; q < r; ++q) {
    require(neg.j_neg[q] != region_sample[q] && neg.j_neg[q] < n, "rg_itm_pairs: bad negative text");
    m.pairs.push_back({n + q, neg.j_neg[q]});
  }
  for (std::size_t q = 0; q < r; ++q) {
    require(neg.l_neg[q] != region_sample[q] && neg.l_neg[q] < n, "rg_itm_pairs: bad negative image");
    m.pairs.push_back({neg.l_neg[q], n + q});
  }
  m.labels.assign(2 * r, 1);
  m.labels.resize(4 * r, 0);
  return m;
}

/// Global matching loss from fused [CLS] rows of itm_pairs().
template <typename T>
Tensor<T> itm_loss(Tape<T>& tape, const ParamStore<T>& ps, const Tensor<T>& fused_cls,
                   const MatchPairs& pairs) {
  return match_bce(tape, match_head(tape, ps, fused_cls), pairs.labels);
}

/// Region-global matching loss from fused [CLS] rows of rg_itm_pairs(); the
/// match head is the same one used by itm_loss.
template <typename T>
Tensor<T> rg_itm_loss(Tape<T>& tape, const ParamStore<T>& ps, const Tensor<T>& fused_cls,
                      const MatchPairs& pairs) {
  require(pairs.size() % 4 == 0 && pairs.positives() * 2 == pairs.size(),
          "rg_itm_loss: expected 2 positives and 2 negatives per region");
  return match_bce(tape, match_head(tape, ps, fused_cls), pairs.labels);
}

// ---------------------------------------------------------------------------
// Boxes

/// Generalized IoU of corner-form boxes (x1, y1, x2, y2).
inline double giou(const Corners& a, const Corners& b) {
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  require(a.x2 > a.x1 && a.y2 > a.y1 && b.x2 > b.x1 && b.y2 > b.y1,
          "giou: zero-area box");
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double c = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                   (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (c - uni) / c;
}

/// Center-size boxes converted to corners without clipping.
inline double giou(const Box& a, const Box& b) {
  auto corners = [](const Box& x) {
    return Corners{x.cx - x.w / 2, x.cy - x.h / 2, x.cx + x.w / 2, x.cy + x.h / 2};
  };
  return giou(corners(a), corners(b));
}

/// Per-row GIoU of center-size boxes [R, 4] (differentiable in both arguments).
template <typename T>
Tensor<T> giou_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require<ShapeError>(a.ndim() == 2 && a.dim(1) == 4 && a.shape() == b.shape(),
                      "giou_rows: expected matching [R,4] boxes, got ", shape_str(a.shape()),
                      " and ", shape_str(b.shape()));
  using namespace ops;
  const T half = T(0.5);
  auto col = [&](const Tensor<T>& x, std::size_t c) { return slice_cols(tape, x, c, 1); };
  struct C {
    Tensor<T> x1, y1, x2, y2, area;
  };
  auto corners = [&](const Tensor<T>& x) {
    Tensor<T> cx = col(x, 0), cy = col(x, 1), w = col(x, 2), h = col(x, 3);
    Tensor<T> hw = scale(tape, w, half), hh = scale(tape, h, half);
    return C{sub(tape, cx, hw), sub(tape, cy, hh), add(tape, cx, hw), add(tape, cy, hh),
             mul(tape, w, h)};
  };
  const C p = corners(a), q = corners(b);
  for (std::size_t r = 0; r < a.dim(0); ++r)
    require(p.area[r] > 0 && q.area[r] > 0, "giou: zero-area box in row ", r);
  const Tensor<T> zero = Tensor<T>::zeros({a.dim(0), 1});
  Tensor<T> iw = maximum(tape, sub(tape, minimum(tape, p.x2, q.x2), maximum(tape, p.x1, q.x1)), zero);
  Tensor<T> ih = maximum(tape, sub(tape, minimum(tape, p.y2, q.y2), maximum(tape, p.y1, q.y1)), zero);
  Tensor<T> inter = mul(tape, iw, ih);
  Tensor<T> uni = sub(tape, add(tape, p.area, q.area), inter);
  Tensor<T> cw = sub(tape, maximum(tape, p.x2, q.x2), minimum(tape, p.x1, q.x1));
  Tensor<T> ch = sub(tape, maximum(tape, p.y2, q.y2), minimum(tape, p.y1, q.y1));
  Tensor<T> c = mul(tape, cw, ch);
  return sub(tape, div(tape, inter, uni), div(tape, sub(tape, c, uni), c));
}

/// Mean over regions of lambda_l1 * |pred - truth|_1 + lambda_giou * (1 - giou).
template <typename T>
Tensor<T> box_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& truth,
                   double lambda_l1 = 1.0, double lambda_giou = 1.0) {
  require<ShapeError>(pred.ndim() == 2 && pred.dim(1) == 4 && pred.shape() == truth.shape(),
                      "box_loss: ", pred.dim(0), " predictions vs ", truth.rows(), " targets");
  require(pred.dim(0) >= 1, "box_loss: no regions");
  const std::size_t r = pred.dim(0);
  Tensor<T> l1 = ops::sum(tape, ops::abs(tape, ops::sub(tape, pred, truth)));
  Tensor<T> g = ops::sum(tape, giou_rows(tape, pred, truth));
  // sum_k (1 - giou_k) = R - sum_k giou_k
  Tensor<T> one_minus = ops::add_scalar(tape, ops::scale(tape, g, T(-1)), static_cast<T>(r));
  Tensor<T> total = ops::add(tape, ops::scale(tape, l1, static_cast<T>(lambda_l1)),
                             ops::scale(tape, one_minus, static_cast<T>(lambda_giou)));
  return ops::scale(tape, total, static_cast<T>(1.0 / double(r)));
}

/// Rows (cx, cy, w, h) of a box list as a constant tensor.
template <typename T>
Tensor<T> boxes_tensor(std::span<const Box> boxes) {
  Tensor<T> out = Tensor<T>::zeros({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out[4 * i] = static_cast<T>(boxes[i].cx);
    out[4 * i + 1] = static_cast<T>(boxes[i].cy);
    out[4 * i + 2] = static_cast<T>(boxes[i].w);
    out[4 * i + 3] = static_cast<T>(boxes[i].h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Total

struct LossWeights {
  double itc = 0.25;
  double itm = 1.0;
  double rg_itc = 0.25;
  double rg_itm = 0.5;
  double box = 0.1;

  void validate() const {
    require(itc >= 0 && itm >= 0 && rg_itc >= 0 && rg_itm >= 0 && box >= 0,
            "loss weights must be non-negative");
  }
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double itc_mcd = 0, itm = 0, rg_itc = 0, rg_itm = 0, box = 0;
  double total = 0;
  LossWeights weights;

  bool operator==(const LossBreakdown&) const = default;
};

/// Weighted sum of the component values.
inline double weighted_total(const LossBreakdown& b) {
  const auto& w = b.weights;
  return w.itc * b.itc_mcd + w.itm * b.itm + w.rg_itc * b.rg_itc + w.rg_itm * b.rg_itm +
         w.box * b.box;
}

/// Differentiable component losses; an undefined tensor means "not computed"
/// and is only allowed when its weight is zero.
template <typename T>
struct LossTerms {
  Tensor<T> itc_mcd, itm, rg_itc, rg_itm, box;
};

/// Weighted total and its breakdown. Terms with zero weight do not enter the
/// graph; the remaining terms are unaffected.
template <typename T>
std::pair<Tensor<T>, LossBreakdown> total_loss(Tape<T>& tape, const LossTerms<T>& terms,
                                               const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  b.weights = w;
  Tensor<T> total;
  auto add_term = [&](const Tensor<T>& t, double weight, double& slot, const char* name) {
    if (t.defined()) slot = static_cast<double>(t.item());
    if (weight == 0.0) return;
    require(t.defined(), "total_loss: term '", name, "' has weight ", weight,
            " but was not computed");
    Tensor<T> term = ops::scale(tape, t, static_cast<T>(weight));
    total = total.defined() ? ops::add(tape, total, term) : term;
  };
  add_term(terms.itc_mcd, w.itc, b.itc_mcd, "itc_mcd");
  add_term(terms.itm, w.itm, b.itm, "itm");
  add_term(terms.rg_itc, w.rg_itc, b.rg_itc, "rg_itc");
  add_term(terms.rg_itm, w.rg_itm, b.rg_itm, "rg_itm");
  add_term(terms.box, w.box, b.box, "box");
  if (!total.defined()) total = Tensor<T>::scalar(T(0));
  b.total = static_cast<double>(total.item());
  return {total, b};
}

}  // namespace hccm
