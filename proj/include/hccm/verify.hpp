#pragma once

// Property suites behind `hccm verify`: finite-difference gradients of every
// loss (64-bit), scalar oracles for the losses and mechanics, and the
// hard-negative sampling distribution.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "hccm/eval.hpp"
#include "hccm/gradcheck.hpp"
#include "hccm/image.hpp"
#include "hccm/losses.hpp"
#include "hccm/momentum.hpp"
#include "hccm/rng.hpp"

namespace hccm {

struct CheckResult {
  std::string suite;
  std::string name;
  bool ok = false;
  std::string detail;
};

namespace verify_detail {

inline Tensor<double> unit_rows(std::size_t r, std::size_t c, Rng& rng) {
  Tensor<double> t = Tensor<double>::zeros({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < c; ++j) {
      t.at(i, j) = rng.normal();
      n += t.at(i, j) * t.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= std::sqrt(n);
  }
  return t;
}

inline Tensor<double> gaussian(std::size_t r, std::size_t c, Rng& rng) {
  Tensor<double> t = Tensor<double>::zeros({r, c});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

inline double dot(const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
  double s = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(i, c) * b.at(j, c);
  return s;
}

inline double nll(const std::vector<double>& logits, std::size_t target) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[target] - mx - std::log(z));
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace verify_detail

// ---------------------------------------------------------------------------
// Individual checks (exposed so tests can run them against mutated inputs)

/// GIoU symmetry, range, identity and the touching-corner value over random boxes.
inline CheckResult check_giou(const std::function<double(const Box&, const Box&)>& g,
                              std::size_t trials = 2000) {
  CheckResult r{"oracles", "giou symmetry/range/identity/corner", true, ""};
  Rng rng(11);
  auto rand_box = [&] {
    const double w = 0.05 + 0.9 * rng.uniform(), h = 0.05 + 0.9 * rng.uniform();
    return Box{w / 2 + (1 - w) * rng.uniform(), h / 2 + (1 - h) * rng.uniform(), w, h};
  };
  for (std::size_t t = 0; t < trials && r.ok; ++t) {
    const Box a = rand_box(), b = rand_box();
    const double ab = g(a, b), ba = g(b, a);
    if (std::abs(ab - ba) > 1e-12) {
      r.ok = false;
      r.detail = "giou symmetry violated: " + verify_detail::num(ab) + " vs " + verify_detail::num(ba);
    } else if (ab < -1.0 - 1e-12 || ab > 1.0 + 1e-12) {
      r.ok = false;
      r.detail = "giou range violated: " + verify_detail::num(ab);
    } else if (std::abs(g(a, a) - 1.0) > 1e-9) {
      r.ok = false;
      r.detail = "giou identity violated: " + verify_detail::num(g(a, a));
    }
  }
  if (r.ok) {
    // Unit squares touching at one corner: union 2, hull 4.
    const double v = g(Box{0.125, 0.125, 0.25, 0.25}, Box{0.375, 0.375, 0.25, 0.25});
    if (std::abs(v + 0.5) > 1e-9) {
      r.ok = false;
      r.detail = "giou corner case: expected -0.5, got " + verify_detail::num(v);
    }
  }
  return r;
}

inline std::vector<CheckResult> gradient_suite() {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  const double tau = 0.07, tol = 1e-4;
  double worst[5] = {0, 0, 0, 0, 0};
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(500 + seed);
    const auto gv = gaussian(2, 4, rng), gt = gaussian(2, 4, rng);
    const auto rv = gaussian(2, 4, rng), rt = gaussian(2, 4, rng);
    const auto mv = unit_rows(2, 4, rng), mt = unit_rows(2, 4, rng);
    const std::vector<std::size_t> samples{0, 1};
    auto rg = [&](Tape<double>& tape) {
      RegionEmbeddings<double> reg{samples, {0, 0}, ops::l2_normalize(tape, rv), ops::l2_normalize(tape, rt)};
      return rg_itc_loss(tape, reg, mv, mt, tau);
    };
    worst[0] = std::max(worst[0], finite_difference_check(rg, {rv, rt}, 1e-6));

    MomentumQueue<double> q(4, 4);
    q.enqueue(unit_rows(2, 4, rng));
    const auto Zv = candidate_set(q, mv), Zt = candidate_set(q, mt);
    const auto st = soft_targets(mv, mt, Zv, Zt, 0.4, tau);
    auto itc = [&](Tape<double>& tape) {
      return itc_mcd_loss(tape, ops::l2_normalize(tape, gv), ops::l2_normalize(tape, gt), Zv, Zt, st, tau);
    };
    worst[1] = std::max(worst[1], finite_difference_check(itc, {gv, gt}, 1e-6));

    ModelConfig c;
    c.image_size = 16;
    c.width = 8;
    c.embed_dim = 4;
    c.layers = 1;
    c.heads = 2;
    c.ffn_mult = 2;
    c.fusion_layers = 1;
    c.vocab_size = 12;
    const auto ps = init_params<double>(c, 40 + seed);
    const auto cls6 = gaussian(6, c.width, rng), cls8 = gaussian(8, c.width, rng);
    const auto gm = itm_pairs(2, HardNegIndices{{1, 0}, {1, 0}});
    auto itm = [&](Tape<double>& tape) { return itm_loss(tape, ps, cls6, gm); };
    worst[2] = std::max(worst[2], finite_difference_check(itm, {cls6, ps.at("match.w"), ps.at("match.b")}, 1e-6));
    const auto rm = rg_itm_pairs(2, samples, HardNegIndices{{1, 0}, {1, 0}});
    auto rgm = [&](Tape<double>& tape) { return rg_itm_loss(tape, ps, cls8, rm); };
    worst[3] = std::max(worst[3], finite_difference_check(rgm, {cls8, ps.at("match.w"), ps.at("match.b")}, 1e-6));

    const Box truth[] = {{0.3, 0.4, 0.2, 0.25}, {0.6, 0.55, 0.3, 0.2}};
    const auto tb = boxes_tensor<double>(truth);
    const auto logits = gaussian(2, 4, rng);
    auto bl = [&](Tape<double>& tape) { return box_loss(tape, ops::sigmoid(tape, logits), tb); };
    worst[4] = std::max(worst[4], finite_difference_check(bl, {logits}, 1e-6));
  }
  const char* names[] = {"rg_itc", "itc_mcd", "itm", "rg_itm", "box"};
  for (int i = 0; i < 5; ++i)
    out.push_back({"gradients", std::string(names[i]) + " finite differences (f64)", worst[i] < tol,
                   "max rel err " + num(worst[i])});
  return out;
}

inline std::vector<CheckResult> oracle_suite() {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  const double tau = 0.07;
  Rng rng(900);

  // Region-global contrastive against a direct scalar recomputation.
  double err = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(5), r = 1 + rng.below(6), d = 3 + rng.below(5);
    RegionEmbeddings<double> reg;
    for (std::size_t q = 0; q < r; ++q) {
      reg.sample.push_back(rng.below(n));
      reg.k.push_back(q);
    }
    reg.z_v = unit_rows(r, d, rng);
    reg.z_t = unit_rows(r, d, rng);
    const auto mv = unit_rows(n, d, rng), mt = unit_rows(n, d, rng);
    double ref = 0;
    for (std::size_t q = 0; q < r; ++q) {
      std::vector<double> a(n), b(n);
      for (std::size_t j = 0; j < n; ++j) {
        a[j] = dot(reg.z_v, q, mt, j) / tau;
        b[j] = dot(reg.z_t, q, mv, j) / tau;
      }
      ref += nll(a, reg.sample[q]) + nll(b, reg.sample[q]);
    }
    ref /= 2.0 * double(r);
    Tape<double> tape(false);
    err = std::max(err, std::abs(rg_itc_loss(tape, reg, mv, mt, tau).item() - ref));
  }
  out.push_back({"oracles", "rg_itc equals scalar recomputation", err < 1e-6, "max abs err " + num(err)});

  // Global contrastive with alpha 0 and no queue equals symmetric InfoNCE.
  err = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(6), d = 3 + rng.below(5);
    const auto zv = unit_rows(n, d, rng), zt = unit_rows(n, d, rng);
    const auto mv = unit_rows(n, d, rng), mt = unit_rows(n, d, rng);
    const auto st = soft_targets(mv, mt, mv, mt, 0.0, tau);
    double ref = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> a(n), b(n);
      for (std::size_t j = 0; j < n; ++j) {
        a[j] = dot(zv, i, mt, j) / tau;
        b[j] = dot(zt, i, mv, j) / tau;
      }
      ref += nll(a, i) + nll(b, i);
    }
    ref /= 2.0 * double(n);
    Tape<double> tape(false);
    err = std::max(err, std::abs(itc_mcd_loss(tape, zv, zt, mv, mt, st, tau).item() - ref));
  }
  out.push_back({"oracles", "itc_mcd(alpha=0, empty queue) equals InfoNCE", err < 1e-6,
                 "max abs err " + num(err)});

  // Soft-target rows are distributions.
  err = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(5), m = n + rng.below(6), d = 4;
    const auto zv = unit_rows(n, d, rng), zt = unit_rows(n, d, rng);
    const auto Zv = unit_rows(m, d, rng), Zt = unit_rows(m, d, rng);
    const auto st = soft_targets(zv, zt, Zv, Zt, rng.uniform(), tau);
    for (const auto* q : {&st.q_i2t, &st.q_t2i})
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) s += q->at(i, j);
        err = std::max(err, std::abs(s - 1.0));
      }
  }
  out.push_back({"oracles", "soft-target rows sum to one", err < 1e-6, "max abs err " + num(err)});

  // EMA against the closed form for constant online parameters.
  {
    ParamStore<double> online;
    online.add("vision.x", Tensor<double>({3}, {1.0, -2.0, 0.5}));
    MomentumParams<double> m{ParamStore<double>{}, 0};
    m.shadow.add("vision.x", Tensor<double>({3}, {0.0, 0.0, 0.0}));
    const double beta = 0.9;
    double e = 0;
    for (int k = 1; k <= 50; ++k) {
      ema_update(online, m, beta);
      for (std::size_t i = 0; i < 3; ++i) {
        const double expect = online.at("vision.x")[i] * (1 - std::pow(beta, k));
        e = std::max(e, std::abs(m.shadow.at("vision.x")[i] - expect));
      }
    }
    out.push_back({"oracles", "ema geometric-decay closed form", e < 1e-5, "max abs err " + num(e)});
  }

  // Queue against a deque simulation.
  {
    bool ok = true;
    std::string detail = "1000 random enqueue sequences";
    for (int t = 0; t < 1000 && ok; ++t) {
      const std::size_t b = 1 + rng.below(3), cap = b * (1 + rng.below(4)), d = 2;
      MomentumQueue<double> q(cap, d);
      std::deque<std::vector<double>> ref;
      const std::size_t steps = rng.below(8);
      for (std::size_t s = 0; s < steps; ++s) {
        const auto batch = unit_rows(b, d, rng);
        q.enqueue(batch);
        for (std::size_t i = 0; i < b; ++i) {
          ref.push_back({batch.at(i, 0), batch.at(i, 1)});
          if (ref.size() > cap) ref.pop_front();
        }
      }
      const auto rows = q.valid_rows();
      ok = rows.rows() == ref.size() || (ref.empty() && q.valid_count() == 0);
      for (std::size_t i = 0; ok && i < ref.size(); ++i)
        ok = rows.at(i, 0) == ref[i][0] && rows.at(i, 1) == ref[i][1];
      if (!ok) detail = "queue contents diverge from FIFO reference at sequence " + std::to_string(t);
    }
    out.push_back({"oracles", "queue equals deque simulation", ok, detail});
  }

  out.push_back(check_giou([](const Box& a, const Box& b) { return giou(a, b); }));

  // ROI Align against direct bilinear sampling on a 6x6 grid of boxes.
  {
    Image img(8, 8);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    double e = 0;
    for (int x1 = 0; x1 < 6; ++x1)
      for (int y1 = 0; y1 < 6; ++y1)
        for (int x2 = x1 + 2; x2 <= 8; ++x2)
          for (int y2 = y1 + 2; y2 <= 8; ++y2) {
            const Box b = Box::from_corners(x1 / 8.0, y1 / 8.0, x2 / 8.0, y2 / 8.0);
            const Image crop = roi_align(img, b, 2, 2);
            const double bw = (x2 - x1) / 2.0, bh = (y2 - y1) / 2.0;
            for (std::size_t oy = 0; oy < 2; ++oy)
              for (std::size_t ox = 0; ox < 2; ++ox)
                for (std::size_t ch = 0; ch < 3; ++ch) {
                  double acc = 0;
                  for (double fy : {0.25, 0.75})
                    for (double fx : {0.25, 0.75}) {
                      // Tent-kernel bilinear interpolation, clamped at the border centers.
                      const double sx = std::clamp(x1 + (ox + fx) * bw - 0.5, 0.0, 7.0);
                      const double sy = std::clamp(y1 + (oy + fy) * bh - 0.5, 0.0, 7.0);
                      double v = 0;
                      for (int py = 0; py < 8; ++py)
                        for (int px = 0; px < 8; ++px) {
                          const double wx = std::max(0.0, 1 - std::abs(sx - px));
                          const double wy = std::max(0.0, 1 - std::abs(sy - py));
                          v += wx * wy * img.at(py, px, ch);
                        }
                      acc += v / 4;
                    }
                  e = std::max(e, std::abs(acc - crop.at(oy, ox, ch)));
                }
          }
    out.push_back({"oracles", "roi_align equals bilinear oracle", e < 1e-6, "max abs err " + num(e)});
  }

  // Recall@K against sorting each row.
  {
    bool ok = true;
    for (int t = 0; t < 100 && ok; ++t) {
      const std::size_t q = 1 + rng.below(20), g = 10 + rng.below(30);
      ScoreMatrix m(q, g);
      for (auto& v : m.s) v = std::round(rng.uniform() * 20) / 20;  // frequent ties
      std::vector<std::size_t> truth(q);
      for (auto& x : truth) x = rng.below(g);
      const std::vector<std::size_t> ks{1, 5, 10};
      const auto got = recall_at_k(m, truth, ks);
      for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < q; ++i) {
          std::vector<std::size_t> order(g);
          std::iota(order.begin(), order.end(), std::size_t{0});
          std::stable_sort(order.begin(), order.end(),
                           [&](std::size_t a, std::size_t b) { return m(i, a) > m(i, b); });
          hits += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ks[ki]),
                            truth[i]) != order.begin() + static_cast<std::ptrdiff_t>(ks[ki]);
        }
        ok = ok && got[ki] == 100.0 * double(hits) / double(q);
      }
    }
    out.push_back({"oracles", "recall_at_k equals sorted-ranking oracle", ok, "100 random matrices"});
  }
  return out;
}

inline std::vector<CheckResult> sampling_suite() {
  using namespace verify_detail;
  Rng rng(1234);
  double worst = 0;
  for (int cfg = 0; cfg < 20; ++cfg) {
    const std::size_t n = 2 + rng.below(7);
    const double tau = 0.05 + 0.5 * rng.uniform();
    std::vector<double> sims(n);
    for (auto& s : sims) s = 2 * rng.uniform() - 1;
    const std::size_t anchor = rng.below(n);
    const auto p = negative_distribution(sims, anchor, tau);
    // Softmax over the non-anchor candidates, computed independently.
    std::vector<double> ref(n, 0.0);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != anchor) z += std::exp(sims[j] / tau);
    for (std::size_t j = 0; j < n; ++j)
      if (j != anchor) ref[j] = std::exp(sims[j] / tau) / z;
    std::vector<double> freq(n, 0.0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) freq[rng.categorical(p)] += 1.0 / draws;
    double tv = 0;
    for (std::size_t j = 0; j < n; ++j) tv += std::abs(freq[j] - ref[j]);
    worst = std::max(worst, tv / 2);
  }
  return {{"sampling", "hard-negative frequencies match softmax (TV, 10k draws x 20)", worst < 0.05,
           "max TV " + num(worst)}};
}

/// Run a suite ("gradients", "oracles", "sampling" or "all"), printing one
/// PASS/FAIL line per check.
inline std::vector<CheckResult> run_verify(const std::string& suite, std::ostream& log) {
  require(suite == "gradients" || suite == "oracles" || suite == "sampling" || suite == "all",
          "verify: unknown suite '", suite, "'");
  std::vector<CheckResult> all;
  auto add = [&](std::vector<CheckResult> rs) {
    for (auto& r : rs) {
      log << (r.ok ? "PASS " : "FAIL ") << r.suite << ": " << r.name << " (" << r.detail << ")\n";
      all.push_back(std::move(r));
    }
  };
  if (suite == "gradients" || suite == "all") add(gradient_suite());
  if (suite == "oracles" || suite == "all") add(oracle_suite());
  if (suite == "sampling" || suite == "all") add(sampling_suite());
  return all;
}

}  // namespace hccm
