#pragma once

// Optimization loop: AdamW, warm-up + cosine schedule, the per-step
// orchestration of online and momentum passes, checkpoints and fit().

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "hccm/dataset.hpp"
#include "hccm/error.hpp"
#include "hccm/eval.hpp"
#include "hccm/image.hpp"
#include "hccm/losses.hpp"
#include "hccm/model.hpp"
#include "hccm/momentum.hpp"
#include "hccm/rng.hpp"
#include "hccm/tensor_io.hpp"
#include "json.hpp"

namespace hccm {

// ---------------------------------------------------------------------------
// Configuration

/// Component switches of the ablation grid.
struct Toggles {
  bool mc = true;      // momentum queue candidates
  bool md = true;      // momentum distillation targets
  bool rg_itc = true;  // region-global contrastive term
  bool rg_itm = true;  // region-global matching term (and box regression)

  bool operator==(const Toggles&) const = default;

  std::string code() const {
    return std::string() + (mc ? '1' : '0') + (md ? '1' : '0') + (rg_itc ? '1' : '0') +
           (rg_itm ? '1' : '0');
  }

  static Toggles from_code(const std::string& c) {
    require(c.size() == 4 && c.find_first_not_of("01") == std::string::npos,
            "toggle code '", c, "' must be four 0/1 digits (mc md rg_itc rg_itm)");
    return {c[0] == '1', c[1] == '1', c[2] == '1', c[3] == '1'};
  }
};

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double warmup_frac = 0.05;
  double min_lr_frac = 0.1;
  double clip_norm = 1.0;
  double tau = 0.07;
  double alpha = 0.4;
  double momentum = 0.995;
  std::size_t queue_size = 1024;
  LossWeights weights;
  double box_l1 = 1.0, box_giou = 1.0;
  Toggles toggles;
  std::size_t max_steps = 0;  // 0: run every epoch to completion
  std::size_t eval_top_r = 0;  // re-ranking depth for per-epoch validation
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    require(batch_size >= 2, "train config: batch_size must be at least 2, got ", batch_size);
    require(lr > 0 && std::isfinite(lr), "train config: lr must be positive");
    require(weight_decay >= 0, "train config: weight_decay must be non-negative");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0,
            "train config: AdamW betas must lie in [0,1) and eps be positive");
    require(warmup_frac >= 0 && warmup_frac < 1, "train config: warmup_frac outside [0,1)");
    require(min_lr_frac >= 0 && min_lr_frac <= 1, "train config: min_lr_frac outside [0,1]");
    require(clip_norm >= 0, "train config: clip_norm must be non-negative (0 disables)");
    require(tau > 0, "train config: tau must be positive, got ", tau);
    require(alpha >= 0 && alpha <= 1, "train config: alpha ", alpha, " outside [0,1]");
    require(momentum >= 0 && momentum <= 1, "train config: momentum ", momentum,
            " outside [0,1]");
    require(queue_size > 0 && queue_size % batch_size == 0, "train config: queue_size ",
            queue_size, " must be a positive multiple of batch_size ", batch_size);
    require(box_l1 >= 0 && box_giou >= 0, "train config: box weights must be non-negative");
    weights.validate();
  }

  /// Weights after applying the toggles; box regression rides on RG-ITM.
  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (!toggles.rg_itc) w.rg_itc = 0;
    if (!toggles.rg_itm) w.rg_itm = w.box = 0;
    return w;
  }

  bool uses_regions() const { return toggles.rg_itc || toggles.rg_itm; }
  bool uses_momentum() const { return toggles.mc || toggles.md || toggles.rg_itc; }
};

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"image_size", m.image_size}, {"patch", m.patch},       {"width", m.width},
          {"embed_dim", m.embed_dim},   {"layers", m.layers},     {"heads", m.heads},
          {"ffn_mult", m.ffn_mult},     {"fusion_layers", m.fusion_layers},
          {"vocab_size", m.vocab_size}, {"max_text_len", m.max_text_len}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"warmup_frac", c.warmup_frac},
          {"min_lr_frac", c.min_lr_frac},
          {"clip_norm", c.clip_norm},
          {"tau", c.tau},
          {"alpha", c.alpha},
          {"momentum", c.momentum},
          {"queue_size", c.queue_size},
          {"weights",
           {{"itc", c.weights.itc},
            {"itm", c.weights.itm},
            {"rg_itc", c.weights.rg_itc},
            {"rg_itm", c.weights.rg_itm},
            {"box", c.weights.box}}},
          {"box_l1", c.box_l1},
          {"box_giou", c.box_giou},
          {"toggles",
           {{"mc", c.toggles.mc},
            {"md", c.toggles.md},
            {"rg_itc", c.toggles.rg_itc},
            {"rg_itm", c.toggles.rg_itm}}},
          {"max_steps", c.max_steps},
          {"eval_top_r", c.eval_top_r},
          {"seed", c.seed}};
}

namespace detail {

/// Overlay `j` on `base`, rejecting keys `base` does not have.
inline void merge_known(nlohmann::json& base, const nlohmann::json& j, const std::string& path) {
  require(j.is_object(), "train config: '", path.empty() ? "<root>" : path, "' must be an object");
  for (const auto& [k, v] : j.items()) {
    const std::string where = path.empty() ? k : path + "." + k;
    require(base.contains(k), "train config: unknown key '", where, "'");
    if (base[k].is_object())
      merge_known(base[k], v, where);
    else {
      const bool ok = (base[k].is_number_unsigned() && v.is_number_unsigned()) ||
                      (base[k].is_number_float() && v.is_number()) ||
                      (base[k].is_boolean() && v.is_boolean()) || base[k].type() == v.type();
      require(ok, "train config: '", where, "' has the wrong type");
      base[k] = v;
    }
  }
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys and wrong types are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  nlohmann::json m = to_json(TrainConfig{});
  detail::merge_known(m, j, "");
  TrainConfig c;
  const auto& mj = m["model"];
  c.model.image_size = mj["image_size"];
  c.model.patch = mj["patch"];
  c.model.width = mj["width"];
  c.model.embed_dim = mj["embed_dim"];
  c.model.layers = mj["layers"];
  c.model.heads = mj["heads"];
  c.model.ffn_mult = mj["ffn_mult"];
  c.model.fusion_layers = mj["fusion_layers"];
  c.model.vocab_size = mj["vocab_size"];
  c.model.max_text_len = mj["max_text_len"];
  c.epochs = m["epochs"];
  c.batch_size = m["batch_size"];
  c.lr = m["lr"];
  c.weight_decay = m["weight_decay"];
  c.beta1 = m["beta1"];
  c.beta2 = m["beta2"];
  c.adam_eps = m["adam_eps"];
  c.warmup_frac = m["warmup_frac"];
  c.min_lr_frac = m["min_lr_frac"];
  c.clip_norm = m["clip_norm"];
  c.tau = m["tau"];
  c.alpha = m["alpha"];
  c.momentum = m["momentum"];
  c.queue_size = m["queue_size"];
  c.weights.itc = m["weights"]["itc"];
  c.weights.itm = m["weights"]["itm"];
  c.weights.rg_itc = m["weights"]["rg_itc"];
  c.weights.rg_itm = m["weights"]["rg_itm"];
  c.weights.box = m["weights"]["box"];
  c.box_l1 = m["box_l1"];
  c.box_giou = m["box_giou"];
  c.toggles.mc = m["toggles"]["mc"];
  c.toggles.md = m["toggles"]["md"];
  c.toggles.rg_itc = m["toggles"]["rg_itc"];
  c.toggles.rg_itm = m["toggles"]["rg_itm"];
  c.max_steps = m["max_steps"];
  c.eval_top_r = m["eval_top_r"];
  c.seed = m["seed"];
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<IoError>(static_cast<bool>(in), "cannot open train config ", path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("train config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

template <typename T>
struct OptimState {
  std::map<std::string, Buffer<T>> m, v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;

  static OptimState for_params(const ParamStore<T>& ps, double lr, double weight_decay,
                               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    OptimState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (const auto& [name, t] : ps) {
      s.m.emplace(name, Buffer<T>(t.size(), T(0)));
      s.v.emplace(name, Buffer<T>(t.size(), T(0)));
    }
    return s;
  }

  bool operator==(const OptimState&) const = default;
};

/// Decoupled-weight-decay Adam over the gradients stored on the parameters
/// (a parameter without a gradient counts as zero gradient). Every gradient
/// is checked before any value changes, so a rejected step leaves the
/// parameters and the state untouched.
template <typename T>
void adamw_step(const ParamStore<T>& ps, OptimState<T>& s) {
  for (const auto& [name, t] : ps) {
    require(s.m.count(name) && s.m.at(name).size() == t.size() && s.v.at(name).size() == t.size(),
            "adamw: moment buffers do not match parameter '", name, "'");
    if (!t.has_grad()) continue;
    for (std::size_t i = 0; i < t.size(); ++i)
      require<NumericError>(std::isfinite(static_cast<double>(t.grad()[i])), "adamw: non-finite gradient in '",
                            name, "' at element ", i, "; step aborted");
  }
  ++s.step;
  const double b1 = s.beta1, b2 = s.beta2;
  const double c1 = 1.0 - std::pow(b1, double(s.step));
  const double c2 = 1.0 - std::pow(b2, double(s.step));
  for (const auto& [name, t] : ps) {
    auto& m = s.m.at(name);
    auto& v = s.v.at(name);
    Tensor<T> handle = t;
    const auto theta = handle.data();
    const bool has = t.has_grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
      const double mi = b1 * double(m[i]) + (1 - b1) * g;
      const double vi = b2 * double(v[i]) + (1 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      const double th = double(theta[i]);
      theta[i] = static_cast<T>(th - s.lr * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * th));
    }
  }
}

/// Linear warm-up over the first warmup_frac of steps, then cosine decay to
/// min_frac * base_lr at step == total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                          double warmup_frac = 0.05, double min_frac = 0.1) {
  require(step <= total_steps, "lr_schedule: step ", step, " beyond total ", total_steps);
  if (total_steps == 0) return base_lr;
  const double warm = warmup_frac * double(total_steps);
  const double s = double(step);
  if (s < warm) return base_lr * s / warm;
  const double span = double(total_steps) - warm;
  const double p = span > 0 ? (s - warm) / span : 1.0;
  return base_lr * (min_frac + (1 - min_frac) * 0.5 * (1 + std::cos(std::numbers::pi * p)));
}

/// Scale every gradient so the global L2 norm is at most max_norm; returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(const ParamStore<T>& ps, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : ps)
    if (t.has_grad())
      for (T g : t.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const T f = static_cast<T>(max_norm / norm);
    for (const auto& [_, t] : ps)
      if (t.has_grad())
        for (T& g : t.grad()) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training state and step

template <typename T>
struct TrainState {
  TrainConfig config;
  ParamStore<T> params;
  MomentumParams<T> momentum;
  MomentumQueue<T> queue_v, queue_t;
  OptimState<T> opt;
  Rng rng;                   // hard-negative sampling
  std::uint64_t step = 0;    // completed optimizer steps
  std::size_t epoch = 0;     // current epoch
  std::size_t cursor = 0;    // next batch within the epoch
  double best_mr = -1;
  std::size_t best_epoch = 0;
  double train_seconds = 0;  // wall time spent inside fit(), summed over resumes

  static TrainState init(TrainConfig cfg) {
    cfg.validate();
    TrainState s;
    s.config = cfg;
    s.params = init_params<T>(cfg.model, derive_seed(cfg.seed, "init"));
    s.params.set_requires_grad(true);
    s.momentum = MomentumParams<T>::from_online(s.params);
    s.queue_v = MomentumQueue<T>(cfg.queue_size, cfg.model.embed_dim);
    s.queue_t = MomentumQueue<T>(cfg.queue_size, cfg.model.embed_dim);
    s.opt = OptimState<T>::for_params(s.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
                                      cfg.adam_eps);
    s.rng = Rng(derive_seed(cfg.seed, "negatives"));
    return s;
  }
};

/// Momentum-model global embeddings of a batch (constants).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> momentum_globals(const ParamStore<T>& shadow, const ModelConfig& c,
                                                 const Batch& batch) {
  Tape<T> tape(false);
  std::vector<const Image*> imgs;
  std::vector<const TokenSeq*> caps;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    imgs.push_back(&batch.records[i]->image);
    caps.push_back(&batch.captions[i]);
  }
  const SeqBatch<T> v = encode_images<T>(tape, shadow, c, imgs);
  const SeqBatch<T> t = encode_texts<T>(tape, shadow, c, caps);
  return {project(tape, shadow, v.cls(tape), Modality::vision),
          project(tape, shadow, t.cls(tape), Modality::text)};
}

/// Region crops resampled to the encoder's input resolution.
inline std::vector<Image> region_crops(const Batch& batch, std::size_t size) {
  std::vector<Image> out;
  out.reserve(batch.region_count());
  for (std::size_t r = 0; r < batch.region_count(); ++r)
    out.push_back(roi_align(batch.records[batch.region_sample[r]]->image, batch.region_boxes[r],
                            size, size));
  return out;
}

namespace detail {

inline std::vector<std::size_t> iota_from(std::size_t begin, std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = begin + i;
  return v;
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t = Tensor<T>::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = T(1);
  return t;
}

}  // namespace detail

/// Differentiable loss terms of one batch. `z_v_m` / `z_t_m` are the momentum
/// globals (undefined when the momentum model is off); `queue_*` supply the
/// extra candidates when MC is on. Draws hard negatives from `rng`.
template <typename T>
LossTerms<T> forward_losses(Tape<T>& tape, const TrainConfig& cfg, const ParamStore<T>& ps,
                            const Batch& batch, const Tensor<T>& z_v_m, const Tensor<T>& z_t_m,
                            const MomentumQueue<T>& queue_v, const MomentumQueue<T>& queue_t,
                            Rng& rng) {
  const ModelConfig& mc = cfg.model;
  const Toggles& tg = cfg.toggles;
  const std::size_t n = batch.size();
  const bool regions = cfg.uses_regions();
  const std::size_t r = regions ? batch.region_count() : 0;
  require(n >= 2, "train step: batch of ", n, " (need at least 2)");
  require(!regions || r > 0, "train step: region terms enabled but batch has no regions");

  // Online encoders: [N global images; R region crops] and [N captions; R fragments].
  std::vector<Image> crops = regions ? region_crops(batch, mc.image_size) : std::vector<Image>{};
  std::vector<const Image*> imgs;
  std::vector<const TokenSeq*> texts;
  for (std::size_t i = 0; i < n; ++i) {
    imgs.push_back(&batch.records[i]->image);
    texts.push_back(&batch.captions[i]);
  }
  for (std::size_t q = 0; q < r; ++q) {
    imgs.push_back(&crops[q]);
    texts.push_back(&batch.fragments[q]);
  }
  const SeqBatch<T> vision = encode_images<T>(tape, ps, mc, imgs);
  const SeqBatch<T> text = encode_texts<T>(tape, ps, mc, texts);
  const Tensor<T> emb_v = project(tape, ps, vision.cls(tape), Modality::vision);
  const Tensor<T> emb_t = project(tape, ps, text.cls(tape), Modality::text);
  const auto g_idx = detail::iota_from(0, n);
  const Tensor<T> z_v = r ? ops::gather_rows(tape, emb_v, g_idx) : emb_v;
  const Tensor<T> z_t = r ? ops::gather_rows(tape, emb_t, g_idx) : emb_t;
  for (const Tensor<T>* e : {&emb_v, &emb_t})
    for (T x : e->data())
      require<NumericError>(std::isfinite(static_cast<double>(x)),
                            "train step: non-finite embedding from the online encoders");

  EmbeddingBatch<T> eb;
  eb.tau = cfg.tau;
  eb.global = {z_v, z_t, z_v_m.defined() ? z_v_m : z_v, z_t_m.defined() ? z_t_m : z_t};
  if (r) {
    const auto r_idx = detail::iota_from(n, r);
    eb.regions.sample = batch.region_sample;
    eb.regions.k = batch.region_k;
    eb.regions.z_v = ops::gather_rows(tape, emb_v, r_idx);
    eb.regions.z_t = ops::gather_rows(tape, emb_t, r_idx);
  }

  // Hard negatives: global first, then per region.
  const auto gneg = sample_global_negatives(z_v, z_t, cfg.tau, rng);
  require(gneg.has_value(), "train step: no global negatives");
  MatchPairs pairs = itm_pairs(n, *gneg);
  const std::size_t n_itm = pairs.size();
  if (tg.rg_itm) {
    const MatchPairs rg = rg_itm_pairs(n, batch.region_sample, sample_hard_negatives(eb, rng));
    pairs.pairs.insert(pairs.pairs.end(), rg.pairs.begin(), rg.pairs.end());
    pairs.labels.insert(pairs.labels.end(), rg.labels.begin(), rg.labels.end());
  }

  LossTerms<T> terms;
  // Global contrastive term.
  if (tg.mc || tg.md) {
    require(z_v_m.defined() && z_t_m.defined(), "train step: momentum globals missing");
    const Tensor<T> Zv = tg.mc ? candidate_set(queue_v, z_v_m) : z_v_m;
    const Tensor<T> Zt = tg.mc ? candidate_set(queue_t, z_t_m) : z_t_m;
    const auto targets = soft_targets(z_v_m, z_t_m, Zv, Zt, tg.md ? cfg.alpha : 0.0, cfg.tau);
    terms.itc_mcd = itc_mcd_loss(tape, z_v, z_t, Zv, Zt, targets, cfg.tau);
  } else {
    const Tensor<T> eye = detail::identity<T>(n);
    terms.itc_mcd = itc_mcd_loss(tape, z_v, z_t, z_v, z_t, SoftTargets<T>{eye, eye}, cfg.tau);
  }

  // Matching terms share one fusion pass.
  const SeqBatch<T> fused = fuse<T>(tape, ps, mc, vision, text, pairs.pairs);
  const Tensor<T> fcls = fused.cls(tape);
  MatchPairs itm{{pairs.pairs.begin(), pairs.pairs.begin() + static_cast<std::ptrdiff_t>(n_itm)},
                 {pairs.labels.begin(), pairs.labels.begin() + static_cast<std::ptrdiff_t>(n_itm)}};
  terms.itm = itm_loss(tape, ps, ops::gather_rows(tape, fcls, detail::iota_from(0, n_itm)), itm);

  if (tg.rg_itc) terms.rg_itc = rg_itc_loss(tape, eb.regions, z_v_m, z_t_m, cfg.tau);
  if (tg.rg_itm) {
    MatchPairs rg{{pairs.pairs.begin() + static_cast<std::ptrdiff_t>(n_itm), pairs.pairs.end()},
                  {pairs.labels.begin() + static_cast<std::ptrdiff_t>(n_itm), pairs.labels.end()}};
    terms.rg_itm = rg_itm_loss(
        tape, ps, ops::gather_rows(tape, fcls, detail::iota_from(n_itm, rg.size())), rg);
    // Box regression from the (global image, region text) fusions.
    const Tensor<T> box_cls = ops::gather_rows(tape, fcls, detail::iota_from(n_itm + r, r));
    terms.box = box_loss(tape, box_head(tape, ps, box_cls), boxes_tensor<T>(batch.region_boxes),
                         cfg.box_l1, cfg.box_giou);
  }
  return terms;
}

/// One optimizer step:
///   EMA update -> momentum globals -> online forwards -> hard negatives ->
///   losses -> backward -> clip -> AdamW -> enqueue.
/// Transactional: on any failure the parameters, shadow, optimizer state,
/// queues and sampler are left exactly as before and the error propagates.
template <typename T>
LossBreakdown train_step(TrainState<T>& s, const Batch& batch) {
  const TrainConfig& cfg = s.config;
  const bool momentum = cfg.uses_momentum();
  const std::string rng_before = s.rng.state();
  std::optional<ParamStore<T>> shadow_before;
  const std::uint64_t momentum_step_before = s.momentum.step;
  try {
    Tensor<T> z_v_m, z_t_m;
    if (momentum) {
      shadow_before = s.momentum.shadow.clone(false);
      ema_update(s.params, s.momentum, cfg.momentum);
      std::tie(z_v_m, z_t_m) = momentum_globals(s.momentum.shadow, cfg.model, batch);
    }
    s.params.zero_grad();
    Tape<T> tape(true);
    const LossTerms<T> terms =
        forward_losses(tape, cfg, s.params, batch, z_v_m, z_t_m, s.queue_v, s.queue_t, s.rng);
    auto [total, breakdown] = total_loss(tape, terms, cfg.effective_weights());
    require<NumericError>(std::isfinite(breakdown.total), "train step ", s.step,
                          ": non-finite total loss (itc ", breakdown.itc_mcd, ", itm ",
                          breakdown.itm, ", rg_itc ", breakdown.rg_itc, ", rg_itm ",
                          breakdown.rg_itm, ", box ", breakdown.box, ")");
    tape.backward(total);
    tape.clear();
    clip_grad_norm(s.params, cfg.clip_norm);
    adamw_step(s.params, s.opt);  // validates every gradient before writing
    if (cfg.toggles.mc) {
      s.queue_v.enqueue(z_v_m);
      s.queue_t.enqueue(z_t_m);
    }
    ++s.step;
    return breakdown;
  } catch (...) {
    if (shadow_before)
      for (const auto& [name, t] : *shadow_before) s.momentum.shadow.assign(name, t.data());
    s.momentum.step = momentum_step_before;
    s.rng.set_state(rng_before);
    s.params.zero_grad();
    throw;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/index.json plus one HCT1 file per tensor.

namespace detail {

inline std::string tensor_file(const std::string& group, const std::string& name) {
  return "tensors/" + group + "/" + name + ".hct";
}

template <typename T>
void save_group(const std::filesystem::path& dir, const std::string& group,
                const std::map<std::string, Tensor<T>>& tensors) {
  std::filesystem::create_directories(dir / "tensors" / group);
  for (const auto& [name, t] : tensors) save_tensor(dir / tensor_file(group, name), t);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const TrainState<T>& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require<IoError>(!ec, "cannot create checkpoint directory ", dir.string(), ": ", ec.message());
  auto as_map = [](const ParamStore<T>& ps) {
    std::map<std::string, Tensor<T>> m;
    for (const auto& [name, t] : ps) m.emplace(name, t);
    return m;
  };
  auto buffers = [&](const std::map<std::string, Buffer<T>>& b) {
    std::map<std::string, Tensor<T>> m;
    for (const auto& [name, buf] : b) m.emplace(name, Tensor<T>({buf.size()}, buf));
    return m;
  };
  detail::save_group(dir, "params", as_map(s.params));
  detail::save_group(dir, "shadow", as_map(s.momentum.shadow));
  detail::save_group(dir, "adam_m", buffers(s.opt.m));
  detail::save_group(dir, "adam_v", buffers(s.opt.v));
  auto queue_tensor = [](const MomentumQueue<T>& q) {
    return Tensor<T>({q.capacity(), q.dim()}, q.storage());
  };
  save_tensor(dir / "queue_v.hct", queue_tensor(s.queue_v));
  save_tensor(dir / "queue_t.hct", queue_tensor(s.queue_t));
  nlohmann::json idx{{"format", "hccm-checkpoint-1"},
                     {"dtype", std::is_same_v<T, float> ? "f32" : "f64"},
                     {"config", to_json(s.config)},
                     {"step", s.step},
                     {"epoch", s.epoch},
                     {"cursor", s.cursor},
                     {"best_mr", s.best_mr},
                     {"best_epoch", s.best_epoch},
                     {"train_seconds", s.train_seconds},
                     {"rng", s.rng.state()},
                     {"momentum_step", s.momentum.step},
                     {"opt_step", s.opt.step},
                     {"opt_lr", s.opt.lr},
                     {"queue_v", {{"head", s.queue_v.write_head()}, {"valid", s.queue_v.valid_count()}}},
                     {"queue_t", {{"head", s.queue_t.write_head()}, {"valid", s.queue_t.valid_count()}}},
                     {"params", s.params.names()}};
  const auto tmp = dir / "index.json.tmp";
  {
    std::ofstream out(tmp);
    require<IoError>(static_cast<bool>(out), "cannot write ", tmp.string());
    out << idx.dump(2) << '\n';
    require<IoError>(static_cast<bool>(out), "write failed for ", tmp.string());
  }
  fs::rename(tmp, dir / "index.json", ec);
  require<IoError>(!ec, "cannot finalize checkpoint index in ", dir.string(), ": ", ec.message());
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  std::ifstream in(index_path);
  require<IoError>(static_cast<bool>(in), "missing checkpoint index ", index_path.string());
  nlohmann::json idx;
  try {
    idx = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("corrupt checkpoint index " + index_path.string() + ": " + e.what());
  }
  require<IoError>(idx.value("format", "") == "hccm-checkpoint-1", "unknown checkpoint format in ",
                   index_path.string());
  TrainState<T> s = TrainState<T>::init(train_config_from_json(idx.at("config")));
  auto load_into = [&](const std::string& group, const ParamStore<T>& ps) {
    for (const auto& [name, t] : ps) {
      const auto loaded = load_tensor<T>(dir / detail::tensor_file(group, name));
      require<IoError>(loaded.shape() == t.shape(), "checkpoint tensor ", group, "/", name,
                       " has shape ", shape_str(loaded.shape()), ", expected ", shape_str(t.shape()));
      ps.assign(name, loaded.data());
    }
  };
  load_into("params", s.params);
  load_into("shadow", s.momentum.shadow);
  for (auto* group : {&s.opt.m, &s.opt.v})
    for (auto& [name, buf] : *group) {
      const auto loaded = load_tensor<T>(
          dir / detail::tensor_file(group == &s.opt.m ? "adam_m" : "adam_v", name));
      require<IoError>(loaded.size() == buf.size(), "checkpoint optimizer moment for ", name,
                       " has ", loaded.size(), " values, expected ", buf.size());
      buf = loaded.values();
    }
  auto restore_queue = [&](MomentumQueue<T>& q, const std::string& key) {
    const auto t = load_tensor<T>(dir / (key + ".hct"));
    require<IoError>(t.size() == q.capacity() * q.dim(), "checkpoint queue ", key, " has wrong size");
    q.restore(t.values(), idx.at(key).at("head"), idx.at(key).at("valid"));
  };
  restore_queue(s.queue_v, "queue_v");
  restore_queue(s.queue_t, "queue_t");
  s.step = idx.at("step");
  s.epoch = idx.at("epoch");
  s.cursor = idx.at("cursor");
  s.best_mr = idx.at("best_mr");
  s.best_epoch = idx.at("best_epoch");
  s.train_seconds = idx.value("train_seconds", 0.0);
  s.rng.set_state(idx.at("rng").get<std::string>());
  s.momentum.step = idx.at("momentum_step");
  s.opt.step = idx.at("opt_step");
  s.opt.lr = idx.at("opt_lr");
  return s;
}

/// Online parameters only (for evaluation).
template <typename T>
std::pair<TrainConfig, ParamStore<T>> load_model(const std::filesystem::path& dir) {
  TrainState<T> s = load_checkpoint<T>(dir);
  return {s.config, s.params};
}

// ---------------------------------------------------------------------------
// fit

inline nlohmann::json breakdown_json(const LossBreakdown& b) {
  return {{"itc_mcd", b.itc_mcd}, {"itm", b.itm}, {"rg_itc", b.rg_itc},
          {"rg_itm", b.rg_itm},   {"box", b.box}, {"total", b.total}};
}

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;  // logs and checkpoints
  bool verbose = false;
  /// Called after every step with (state step, breakdown); may throw to stop.
  std::function<void(std::uint64_t, const LossBreakdown&)> on_step;
  /// Stop (after saving "last") once this many steps have run in this call; 0 = no limit.
  std::size_t stop_after = 0;
};

template <typename T>
struct FitResult {
  TrainState<T> state;                 // final state
  ParamStore<T> best_params;           // best validation mR (final params without validation)
  std::optional<RetrievalReport> best_report;
  std::vector<LossBreakdown> losses;   // per step, this call only
  std::vector<nlohmann::json> epoch_log;
};

/// Train for the configured epochs (resuming from `state`'s cursor), validate
/// after each epoch and keep the parameters with the best validation mR.
template <typename T>
FitResult<T> fit(TrainState<T> state, const std::vector<SceneRecord>& train,
                 const std::vector<SceneRecord>& val, const Vocabulary& vocab,
                 const FitOptions& opt = {}) {
  namespace fs = std::filesystem;
  const TrainConfig cfg = state.config;
  require(vocab.size() == cfg.model.vocab_size, "fit: vocabulary of ", vocab.size(),
          " tokens vs model vocab_size ", cfg.model.vocab_size);
  const BatchIterator it(train, cfg.batch_size, derive_seed(cfg.seed, "batches"));
  const std::size_t per_epoch = it.batches_per_epoch();
  require(cfg.epochs == 0 || per_epoch > 0, "fit: ", train.size(),
          " training records cannot fill one batch of ", cfg.batch_size);
  std::size_t total_steps = cfg.epochs * per_epoch;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  std::ofstream step_log, epoch_log;
  if (opt.out_dir) {
    std::error_code ec;
    fs::create_directories(*opt.out_dir, ec);
    require<IoError>(!ec, "cannot create run directory ", opt.out_dir->string());
    const auto mode = state.step > 0 ? std::ios::app : std::ios::trunc;
    step_log.open(*opt.out_dir / "steps.jsonl", mode);
    epoch_log.open(*opt.out_dir / "epochs.jsonl", mode);
    require<IoError>(step_log && epoch_log, "cannot open logs in ", opt.out_dir->string());
  }

  FitResult<T> res;
  res.best_params = state.params.clone(false);
  if (opt.out_dir && fs::exists(*opt.out_dir / "best" / "index.json") && state.best_mr >= 0)
    res.best_params = load_checkpoint<T>(*opt.out_dir / "best").params;
  std::size_t ran = 0;
  bool stopped = false;
  const double seconds_before = state.train_seconds;
  const auto t_start = std::chrono::steady_clock::now();
  auto sync_clock = [&] {
    state.train_seconds =
        seconds_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };
  while (state.epoch < cfg.epochs && state.step < total_steps && !stopped) {
    for (; state.cursor < per_epoch && state.step < total_steps; ++state.cursor) {
      state.opt.lr = lr_schedule(state.step, total_steps, cfg.lr, cfg.warmup_frac, cfg.min_lr_frac);
      const Batch batch = it.batch(state.epoch, state.cursor, vocab);
      const double lr = state.opt.lr;
      const LossBreakdown b = train_step(state, batch);
      res.losses.push_back(b);
      if (step_log.is_open()) {
        nlohmann::json line = breakdown_json(b);
        line["step"] = state.step;
        line["epoch"] = state.epoch;
        line["batch"] = state.cursor;
        line["lr"] = lr;
        step_log << line.dump() << '\n';
      }
      if (opt.on_step) opt.on_step(state.step, b);
      if (opt.stop_after && ++ran >= opt.stop_after) {
        ++state.cursor;
        stopped = true;
        break;
      }
    }
    if (stopped && state.cursor < per_epoch && state.step < total_steps) break;
    // Epoch finished (or the step budget ran out inside it).
    nlohmann::json line{{"epoch", state.epoch}, {"step", state.step}};
    if (!val.empty()) {
      const RetrievalReport rep = evaluate(state.params, cfg.model, val, vocab, cfg.eval_top_r);
      line["val"] = to_json(rep);
      if (rep.mr > state.best_mr) {
        state.best_mr = rep.mr;
        state.best_epoch = state.epoch;
        res.best_params = state.params.clone(false);
        res.best_report = rep;
        sync_clock();
        if (opt.out_dir) save_checkpoint(state, *opt.out_dir / "best");
      }
      if (opt.verbose)
        std::fprintf(stderr, "epoch %zu step %llu val mR %.2f (best %.2f @ %zu)\n", state.epoch,
                     static_cast<unsigned long long>(state.step), rep.mr, state.best_mr,
                     state.best_epoch);
    }
    res.epoch_log.push_back(line);
    if (epoch_log.is_open()) epoch_log << line.dump() << std::endl;
    ++state.epoch;
    state.cursor = 0;
    sync_clock();
    if (opt.out_dir) save_checkpoint(state, *opt.out_dir / "last");
  }
  sync_clock();
  if (stopped && opt.out_dir) save_checkpoint(state, *opt.out_dir / "last");
  if (val.empty()) res.best_params = state.params.clone(false);
  res.state = std::move(state);
  return res;
}

}  // namespace hccm
