#include <gtest/gtest.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <limits>

#include "hccm/dataset.hpp"
#include "hccm/train.hpp"
#include "test_util.hpp"

using namespace hccm;
using namespace hccm::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("hccm_" + tag + "_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

const Vocabulary& vocab() {
  static const Vocabulary v(scene_vocabulary());
  return v;
}

// 48-pixel scenes so a 9-patch encoder runs in milliseconds.
const std::vector<SceneRecord>& tiny_records(Split split) {
  static const auto all = [] {
    GenConfig g;
    g.image_size = 48;
    g.n_train = 24;
    g.n_val = 8;
    g.n_test = 0;
    g.n_heldout = 0;
    g.seed = 3;
    return generate_dataset(g);
  }();
  static const auto train = filter_split(all, Split::train);
  static const auto val = filter_split(all, Split::val);
  return split == Split::train ? train : val;
}

TrainConfig tiny_config(const std::string& code = "1111") {
  TrainConfig c;
  c.model.image_size = 48;
  c.model.patch = 16;
  c.model.width = 16;
  c.model.embed_dim = 8;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.ffn_mult = 2;
  c.model.fusion_layers = 1;
  c.model.vocab_size = vocab().size();
  c.batch_size = 4;
  c.queue_size = 8;
  c.epochs = 2;
  c.seed = 17;
  c.toggles = Toggles::from_code(code);
  return c;
}

Batch first_batch(const TrainConfig& c, std::size_t b = 0) {
  const BatchIterator it(tiny_records(Split::train), c.batch_size, 99);
  return it.batch(0, b, vocab());
}

template <typename T>
bool same_state(const TrainState<T>& a, const TrainState<T>& b) {
  return a.params.same_values(b.params) && a.momentum.shadow.same_values(b.momentum.shadow) &&
         a.momentum.step == b.momentum.step && a.queue_v == b.queue_v && a.queue_t == b.queue_t &&
         a.opt == b.opt && a.rng.state() == b.rng.state() && a.step == b.step;
}

bool same_breakdown(const LossBreakdown& a, const LossBreakdown& b) {
  return a.itc_mcd == b.itc_mcd && a.itm == b.itm && a.rg_itc == b.rg_itc && a.rg_itm == b.rg_itm &&
         a.box == b.box && a.total == b.total;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

TEST(AdamW, ZeroGradientAppliesOnlyDecoupledDecay) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  ps.set_requires_grad(true);
  ps.zero_grad();
  auto s = OptimState<double>::for_params(ps, 1e-3, 0.01);
  adamw_step(ps, s);
  EXPECT_NEAR(ps.at("w")[0], 1.0 * (1 - 1e-5), 1e-15);
  EXPECT_NEAR(ps.at("w")[1], -2.0 * (1 - 1e-5), 1e-15);
  EXPECT_NEAR(ps.at("w")[2], 0.5 * (1 - 1e-5), 1e-15);
}

TEST(AdamW, ZeroGradientWithoutDecayIsIdentity) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({2}, {0.7, -0.1}));
  auto s = OptimState<double>::for_params(ps, 1e-3, 0.0);
  adamw_step(ps, s);
  EXPECT_EQ(ps.at("w")[0], 0.7);
  EXPECT_EQ(ps.at("w")[1], -0.1);
}

TEST(AdamW, ConstantUnitGradientTwoSteps) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({1}, {1.0}));
  ps.at("w").ensure_grad()[0] = 1.0;
  auto s = OptimState<double>::for_params(ps, 1e-3, 0.01);
  double theta = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    adamw_step(ps, s);
    m = 0.9 * m + 0.1;
    v = 0.999 * v + 0.001;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta -= 1e-3 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * theta);
  }
  EXPECT_NEAR(ps.at("w")[0], theta, 1e-10);
}

TEST(AdamW, MatchesScalarRecursion) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({1}, {0.3}));
  ps.set_requires_grad(true);
  auto s = OptimState<double>::for_params(ps, 0.01, 0.1, 0.8, 0.95, 1e-8);
  Rng rng(4);
  double theta = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 50; ++t) {
    const double g = rng.normal();
    ps.at("w").ensure_grad();
    ps.at("w").grad()[0] = g;
    adamw_step(ps, s);
    m = 0.8 * m + 0.2 * g;
    v = 0.95 * v + 0.05 * g * g;
    const double mh = m / (1 - std::pow(0.8, t)), vh = v / (1 - std::pow(0.95, t));
    theta -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * theta);
    ASSERT_NEAR(ps.at("w")[0], theta, 1e-10) << "step " << t;
  }
}

TEST(AdamW, NonFiniteGradientLeavesEverythingUntouched) {
  ParamStore<float> ps;
  ps.add("a", Tensor<float>({2}, {1.f, 2.f}));
  ps.add("b", Tensor<float>({2}, {3.f, 4.f}));
  ps.set_requires_grad(true);
  for (const auto& [_, t] : ps) t.ensure_grad();
  auto s = OptimState<float>::for_params(ps, 1e-2, 0.0);
  ps.at("a").grad()[0] = 1.f;
  adamw_step(ps, s);
  const auto before = ps.clone(false);
  const auto s_before = s;
  ps.at("b").grad()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(adamw_step(ps, s), NumericError);
  EXPECT_TRUE(ps.same_values(before));
  EXPECT_TRUE(s == s_before);
}

TEST(Schedule, WarmupThenCosineToFloor) {
  const double base = 1e-3;
  EXPECT_DOUBLE_EQ(lr_schedule(0, 1000, base), 0.0);
  EXPECT_NEAR(lr_schedule(25, 1000, base), base / 2, 1e-15);
  EXPECT_NEAR(lr_schedule(50, 1000, base), base, 1e-15);
  EXPECT_NEAR(lr_schedule(1000, 1000, base), 0.1 * base, 1e-15);
  // Midpoint of the cosine segment sits halfway between base and floor.
  EXPECT_NEAR(lr_schedule(525, 1000, base), 0.55 * base, 1e-15);
  double prev = base;
  for (std::size_t s = 50; s <= 1000; ++s) {
    const double lr = lr_schedule(s, 1000, base);
    ASSERT_LE(lr, prev + 1e-18);
    prev = lr;
  }
  EXPECT_THROW(lr_schedule(1001, 1000, base), ValidationError);
}

TEST(Clip, ScalesGlobalNormDownOnly) {
  ParamStore<double> ps;
  ps.add("a", Tensor<double>({2}, {0, 0}));
  ps.add("b", Tensor<double>({1}, {0}));
  ps.set_requires_grad(true);
  for (const auto& [_, t] : ps) t.ensure_grad();
  ps.at("a").grad()[0] = 3;
  ps.at("b").grad()[0] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 10.0), 5.0);
  EXPECT_DOUBLE_EQ(ps.at("a").grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.at("a").grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(ps.at("b").grad()[0], 0.8, 1e-15);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsMatchReferenceRecipe) {
  const TrainConfig c;
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.queue_size, 1024u);
  EXPECT_DOUBLE_EQ(c.lr, 1e-3);
  EXPECT_DOUBLE_EQ(c.tau, 0.07);
  EXPECT_DOUBLE_EQ(c.alpha, 0.4);
  EXPECT_DOUBLE_EQ(c.momentum, 0.995);
  EXPECT_DOUBLE_EQ(c.weights.itc, 0.25);
  EXPECT_DOUBLE_EQ(c.weights.itm, 1.0);
  EXPECT_DOUBLE_EQ(c.weights.rg_itc, 0.25);
  EXPECT_DOUBLE_EQ(c.weights.rg_itm, 0.5);
  EXPECT_DOUBLE_EQ(c.weights.box, 0.1);
  EXPECT_EQ(c.toggles.code(), "1111");
}

TEST(Config, JsonRoundTripAndStrictKeys) {
  TrainConfig c = tiny_config("1010");
  c.lr = 3e-4;
  c.model.heads = 4;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.toggles.code(), "1010");

  auto j = to_json(c);
  j["learning_rate"] = 1.0;
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  j = to_json(c);
  j["batch_size"] = -4;
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  j = to_json(c);
  j["tau"] = "warm";
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  j = to_json(c);
  j["queue_size"] = 10;  // not a multiple of batch_size 4
  EXPECT_THROW(train_config_from_json(j), ValidationError);
}

TEST(Config, TogglesCodeAndEffectiveWeights) {
  for (const char* code : {"0000", "1000", "1100", "0010", "0011", "1110", "1101", "1111"})
    EXPECT_EQ(Toggles::from_code(code).code(), code);
  EXPECT_THROW(Toggles::from_code("111"), ValidationError);
  EXPECT_THROW(Toggles::from_code("11a1"), ValidationError);
  TrainConfig c;
  c.toggles = Toggles::from_code("1110");
  const auto w = c.effective_weights();
  EXPECT_EQ(w.rg_itm, 0.0);
  EXPECT_EQ(w.box, 0.0);
  EXPECT_EQ(w.rg_itc, 0.25);
  c.toggles = Toggles::from_code("0001");
  EXPECT_FALSE(c.uses_momentum());
  c.toggles = Toggles::from_code("0010");
  EXPECT_TRUE(c.uses_momentum());
}

// ---------------------------------------------------------------------------
// Training step

TEST(TrainStep, BaselineEqualsIndependentItcPlusItm) {
  const TrainConfig c = tiny_config("0000");
  auto s = TrainState<double>::init(c);
  const Batch batch = first_batch(c);
  const std::size_t n = batch.size();

  Rng rng_a = s.rng, rng_b = s.rng;
  Tape<double> tape(false);
  const LossTerms<double> terms = forward_losses(tape, c, s.params, batch, Tensor<double>{},
                                                 Tensor<double>{}, s.queue_v, s.queue_t, rng_a);
  EXPECT_FALSE(terms.rg_itc.defined());
  EXPECT_FALSE(terms.rg_itm.defined());
  EXPECT_FALSE(terms.box.defined());
  const auto [total, bd] = total_loss(tape, terms, c.effective_weights());

  // Reference: encoders and fusion reused, loss composition written out.
  std::vector<const Image*> imgs;
  std::vector<const TokenSeq*> caps;
  for (std::size_t i = 0; i < n; ++i) {
    imgs.push_back(&batch.records[i]->image);
    caps.push_back(&batch.captions[i]);
  }
  const auto v = encode_images<double>(tape, s.params, c.model, imgs);
  const auto t = encode_texts<double>(tape, s.params, c.model, caps);
  const auto zv = project(tape, s.params, v.cls(tape), Modality::vision);
  const auto zt = project(tape, s.params, t.cls(tape), Modality::text);
  double itc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a(n), b(n);
    for (std::size_t j = 0; j < n; ++j) {
      a[j] = dot_rows(zv, i, zt, j) / c.tau;
      b[j] = dot_rows(zt, i, zv, j) / c.tau;
    }
    itc += neg_log_softmax(a, i) + neg_log_softmax(b, i);
  }
  itc /= 2.0 * double(n);

  auto draw = [&](const Tensor<double>& x, const Tensor<double>& y, std::size_t i) {
    std::vector<double> p(n, 0.0);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) z += p[j] = std::exp(dot_rows(x, i, y, j) / c.tau);
    for (auto& q : p) q /= z;
    return rng_b.categorical(p);
  };
  std::vector<FusePair> pairs;
  std::vector<std::size_t> jn(n), ln(n);
  for (std::size_t i = 0; i < n; ++i) {
    jn[i] = draw(zv, zt, i);
    ln[i] = draw(zt, zv, i);
  }
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, i});
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, jn[i]});
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({ln[i], i});
  const auto fused = fuse<double>(tape, s.params, c.model, v, t, pairs);
  const auto logits = match_head(tape, s.params, fused.cls(tape));
  double itm = 0;
  for (std::size_t k = 0; k < 3 * n; ++k)
    itm += neg_log_softmax({logits.at(k, 0), logits.at(k, 1)}, k < n ? 1 : 0);
  itm /= 3.0 * double(n);

  EXPECT_NEAR(bd.itc_mcd, itc, 1e-6);
  EXPECT_NEAR(bd.itm, itm, 1e-6);
  EXPECT_NEAR(bd.total, 0.25 * itc + itm, 1e-6);
  EXPECT_EQ(bd.rg_itc, 0.0);
  EXPECT_EQ(bd.box, 0.0);
  EXPECT_EQ(rng_a.state(), rng_b.state());
}

TEST(TrainStep, BaselineLeavesMomentumModelAndQueueIdle) {
  auto s = TrainState<float>::init(tiny_config("0000"));
  const auto shadow = s.momentum.shadow.clone(false);
  train_step(s, first_batch(s.config));
  EXPECT_TRUE(s.momentum.shadow.same_values(shadow));
  EXPECT_EQ(s.queue_v.valid_count(), 0u);
  EXPECT_FALSE(s.params.same_values(shadow));
}

TEST(TrainStep, QueueGrowsOnlyWithMomentumCandidates) {
  auto on = TrainState<float>::init(tiny_config("1111"));
  auto off = TrainState<float>::init(tiny_config("0111"));
  for (std::size_t k = 0; k < 3; ++k) {
    const Batch b = first_batch(on.config, k);
    train_step(on, b);
    train_step(off, b);
    EXPECT_EQ(on.queue_v.valid_count(), std::min<std::size_t>(4 * (k + 1), 8));
    EXPECT_EQ(on.queue_t.valid_count(), on.queue_v.valid_count());
    EXPECT_EQ(off.queue_v.valid_count(), 0u);
  }
  EXPECT_EQ(on.momentum.step, 3u);
  EXPECT_EQ(off.momentum.step, 3u);
}

TEST(TrainStep, DeterministicForFixedSeed) {
  for (const char* code : {"0000", "1111", "0011"}) {
    auto a = TrainState<float>::init(tiny_config(code));
    auto b = TrainState<float>::init(tiny_config(code));
    for (std::size_t k = 0; k < 3; ++k) {
      const Batch batch = first_batch(a.config, k);
      EXPECT_TRUE(same_breakdown(train_step(a, batch), train_step(b, batch))) << code;
    }
    EXPECT_TRUE(same_state(a, b)) << code;
  }
}

TEST(TrainStep, FailureRollsBackEveryComponent) {
  auto s = TrainState<float>::init(tiny_config("1111"));
  train_step(s, first_batch(s.config, 0));
  // Poison one embedding weight so the forward pass produces non-finite losses.
  const std::string victim = "proj_v.w";
  auto before = s;
  before.params = s.params.clone(false);
  before.momentum.shadow = s.momentum.shadow.clone(false);
  std::vector<float> poisoned(s.params.at(victim).data().begin(), s.params.at(victim).data().end());
  for (auto& x : poisoned) x = std::numeric_limits<float>::infinity();
  s.params.assign(victim, poisoned);
  before.params.assign(victim, poisoned);
  EXPECT_THROW(train_step(s, first_batch(s.config, 1)), NumericError);
  EXPECT_TRUE(same_state(s, before));
}

TEST(TrainStep, TwoHundredStepsStayFinite) {
  TrainConfig c = tiny_config("1111");
  auto s = TrainState<float>::init(c);
  const BatchIterator it(tiny_records(Split::train), c.batch_size, 5);
  for (std::size_t k = 0; k < 200; ++k) {
    const auto bd = train_step(s, it.batch(k / it.batches_per_epoch(), k % it.batches_per_epoch(), vocab()));
    ASSERT_TRUE(std::isfinite(bd.total)) << "step " << k;
    ASSERT_GT(bd.rg_itc, 0.0);
    ASSERT_GT(bd.box, 0.0);
  }
  for (const auto& [name, t] : s.params)
    for (float x : t.data()) ASSERT_TRUE(std::isfinite(x)) << name;
}

TEST(TrainStep, ReferenceConfigTwoHundredStepsStayFinite) {
  GenConfig g;
  g.n_train = 320;
  g.n_val = g.n_test = g.n_heldout = 0;
  g.seed = 8;
  const auto train = generate_dataset(g);
  TrainConfig c;  // reference architecture and recipe, all components on
  c.model.vocab_size = vocab().size();
  auto s = TrainState<float>::init(c);
  const BatchIterator it(train, c.batch_size, 13);
  const std::size_t per_epoch = it.batches_per_epoch();
  for (std::size_t k = 0; k < 200; ++k) {
    s.opt.lr = lr_schedule(k, 200, c.lr);
    const auto bd = train_step(s, it.batch(k / per_epoch, k % per_epoch, vocab()));
    ASSERT_TRUE(std::isfinite(bd.total)) << "step " << k;
  }
  EXPECT_EQ(s.queue_v.valid_count(), std::min<std::size_t>(200 * 16, c.queue_size));
}

// ---------------------------------------------------------------------------
// Checkpoints and resume

TEST(Checkpoint, RoundTripContinuesIdentically) {
  TempDir dir("ckpt");
  auto a = TrainState<float>::init(tiny_config("1111"));
  train_step(a, first_batch(a.config, 0));
  train_step(a, first_batch(a.config, 1));
  save_checkpoint(a, dir.path);
  auto b = load_checkpoint<float>(dir.path);
  EXPECT_TRUE(same_state(a, b));
  EXPECT_EQ(to_json(a.config), to_json(b.config));
  const Batch next = first_batch(a.config, 2);
  EXPECT_TRUE(same_breakdown(train_step(a, next), train_step(b, next)));
  EXPECT_TRUE(same_state(a, b));
  const auto [cfg, params] = load_model<float>(dir.path);
  EXPECT_EQ(cfg.toggles.code(), "1111");
}

TEST(Checkpoint, MissingIndexIsAnIoError) {
  TempDir dir("ckpt_missing");
  EXPECT_THROW(load_checkpoint<float>(dir.path / "nope"), IoError);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  TempDir d1("fit_full"), d2("fit_resume");
  const TrainConfig c = tiny_config("1111");
  const auto& train = tiny_records(Split::train);
  const auto& val = tiny_records(Split::val);

  FitOptions to_full, first, rest;
  to_full.out_dir = d1.path;
  first.out_dir = rest.out_dir = d2.path;
  const auto full = fit(TrainState<float>::init(c), train, val, vocab(), to_full);
  first.stop_after = 4;  // mid second epoch (6 batches per epoch)
  const auto part = fit(TrainState<float>::init(c), train, val, vocab(), first);
  EXPECT_EQ(part.losses.size(), 4u);
  const auto resumed = fit(load_checkpoint<float>(d2.path / "last"), train, val, vocab(), rest);

  EXPECT_TRUE(same_state(full.state, resumed.state));
  EXPECT_TRUE(full.best_params.same_values(resumed.best_params));
  ASSERT_EQ(part.losses.size() + resumed.losses.size(), full.losses.size());
  for (std::size_t k = 0; k < full.losses.size(); ++k) {
    const auto& r = k < 4 ? part.losses[k] : resumed.losses[k - 4];
    EXPECT_TRUE(same_breakdown(full.losses[k], r)) << "step " << k;
  }
  // Logs of the split run concatenate to the uninterrupted ones.
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(d1.path / "steps.jsonl"), slurp(d2.path / "steps.jsonl"));
  EXPECT_EQ(slurp(d1.path / "epochs.jsonl"), slurp(d2.path / "epochs.jsonl"));
}

TEST(Fit, ZeroEpochsReturnsInitialParameters) {
  TrainConfig c = tiny_config("1111");
  c.epochs = 0;
  const auto init = TrainState<float>::init(c);
  const auto res = fit(init, tiny_records(Split::train), tiny_records(Split::val), vocab());
  EXPECT_TRUE(res.losses.empty());
  EXPECT_TRUE(res.state.params.same_values(init.params));
  EXPECT_TRUE(res.best_params.same_values(init.params));
}

TEST(Fit, MaxStepsCapsTraining) {
  TrainConfig c = tiny_config("0000");
  c.max_steps = 5;
  const auto res = fit(TrainState<float>::init(c), tiny_records(Split::train), {}, vocab());
  EXPECT_EQ(res.losses.size(), 5u);
  EXPECT_EQ(res.state.step, 5u);
}

TEST(Fit, VocabularyMismatchRejected) {
  TrainConfig c = tiny_config();
  c.model.vocab_size += 1;
  EXPECT_THROW(fit(TrainState<float>::init(c), tiny_records(Split::train), {}, vocab()), ValidationError);
}
