#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "hccm/gradcheck.hpp"
#include "hccm/image.hpp"
#include "hccm/model.hpp"
#include "hccm/rng.hpp"
#include "hccm/tokenizer.hpp"

using namespace hccm;

namespace {

Vocabulary test_vocab() {
  return Vocabulary({"[CLS]", "[PAD]", "[UNK]", "a", "red", "blue", "circle", "square", "near",
                     "left", "of"});
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 8;
  c.width = 16;
  c.embed_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_mult = 2;
  c.fusion_layers = 1;
  c.vocab_size = 11;
  c.max_text_len = 32;
  return c;
}

template <typename T>
void expect_rows_near(const Tensor<T>& a, std::size_t ra, const Tensor<T>& b, std::size_t rb,
                      double tol) {
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t c = 0; c < a.cols(); ++c)
    EXPECT_NEAR(a.at(ra, c), b.at(rb, c), tol) << "column " << c;
}

// Bilinear weights written as a tent-kernel sum over every pixel.
double oracle_sample(const Image& img, double x, double y, std::size_t ch) {
  const double fx = std::min(std::max(x - 0.5, 0.0), double(img.width - 1));
  const double fy = std::min(std::max(y - 0.5, 0.0), double(img.height - 1));
  double acc = 0;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const double wx = std::max(0.0, 1.0 - std::abs(fx - double(c)));
      const double wy = std::max(0.0, 1.0 - std::abs(fy - double(r)));
      acc += wx * wy * img.at(r, c, ch);
    }
  return acc;
}

Image oracle_roi(const Image& img, double x1, double y1, double x2, double y2, std::size_t oh,
                 std::size_t ow) {
  Image out(oh, ow);
  const double bw = (x2 - x1) / double(ow), bh = (y2 - y1) / double(oh);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double xs[2] = {x1 + (c + 0.25) * bw, x1 + (c + 0.75) * bw};
        const double ys[2] = {y1 + (r + 0.25) * bh, y1 + (r + 0.75) * bh};
        double s = 0;
        for (double y : ys)
          for (double x : xs) s += oracle_sample(img, x, y, ch);
        out.at(r, c, ch) = static_cast<float>(s / 4);
      }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer

TEST(Tokenizer, EmptyTextRejected) {
  const auto v = test_vocab();
  EXPECT_THROW(v.tokenize("", 32), ValidationError);
  EXPECT_THROW(v.tokenize(" ,. !", 32), ValidationError);
}

TEST(Tokenizer, CaseInsensitive) {
  const auto v = test_vocab();
  EXPECT_EQ(v.tokenize("Red circle", 32), v.tokenize("red circle", 32));
  EXPECT_EQ(v.tokenize("RED, circle.", 32), v.tokenize("red circle", 32));
}

TEST(Tokenizer, VocabularyLookupAndRoundTrip) {
  const auto v = test_vocab();
  const auto s = v.tokenize("a red circle near a blue square", 16);
  const std::vector<std::int32_t> ids{0, 3, 4, 6, 8, 3, 5, 7, 1, 1, 1, 1, 1, 1, 1, 1};
  EXPECT_EQ(s.ids, ids);
  EXPECT_EQ(s.valid_length(), 8u);
  EXPECT_EQ(v.detokenize(s), "a red circle near a blue square");
  EXPECT_EQ(v.detokenize(v.tokenize("A Red Circle", 16)), "a red circle");
}

TEST(Tokenizer, UnknownWordsAndTruncation) {
  const auto v = test_vocab();
  const auto s = v.tokenize("a green circle", 32);
  EXPECT_EQ(s.ids[2], kUnkId);
  const auto t = v.tokenize("a red circle near a blue square", 4);
  EXPECT_EQ(t.ids, (std::vector<std::int32_t>{0, 3, 4, 6}));
  EXPECT_EQ(t.valid_length(), 4u);
}

TEST(Tokenizer, VocabularyFileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "hccm_vocab_test";
  std::filesystem::create_directories(dir);
  const auto v = test_vocab();
  v.save(dir / "vocab.txt");
  const auto w = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(w.tokens(), v.tokens());
  EXPECT_EQ(w.id("square"), 7);
  EXPECT_THROW(Vocabulary({"[PAD]", "[CLS]", "[UNK]"}), ValidationError);
  EXPECT_THROW(Vocabulary({"[CLS]", "[PAD]", "[UNK]", "a", "a"}), ValidationError);
  EXPECT_THROW(Vocabulary::load(dir / "missing.txt"), IoError);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// ROI Align

TEST(RoiAlign, ConstantImageGivesConstantOutput) {
  Image img(8, 8, 0.37f);
  for (const Box b : {Box{0.5, 0.5, 1, 1}, Box{0.3, 0.6, 0.4, 0.5}, Box{0.9, 0.1, 0.3, 0.3}}) {
    const Image out = roi_align(img, b, 5, 3);
    for (float p : out.pixels) EXPECT_NEAR(p, 0.37f, 1e-6);
  }
}

// Full box at input resolution: each output pixel averages samples a quarter
// pixel either side of its center, i.e. the separable kernel
// [1/8, 3/4, 1/8] with edge clamping.
TEST(RoiAlign, FullBoxIsQuarterPixelSmoothing) {
  const Image img = random_image(8, 8, 3);
  const Image out = roi_align(img, Box{0.5, 0.5, 1, 1}, 8, 8);
  auto px = [&](long r, long c, std::size_t ch) {
    r = std::clamp(r, 0L, 7L);
    c = std::clamp(c, 0L, 7L);
    return double(img.at(std::size_t(r), std::size_t(c), ch));
  };
  const double k[3] = {0.125, 0.75, 0.125};
  for (long r = 0; r < 8; ++r)
    for (long c = 0; c < 8; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double want = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) want += k[dy + 1] * k[dx + 1] * px(r + dy, c + dx, ch);
        EXPECT_NEAR(out.at(std::size_t(r), std::size_t(c), ch), want, 1e-6);
      }
}

TEST(RoiAlign, FullBoxPreservesSmoothInteriorRamp) {
  Image img(8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = float(0.05 * r + 0.1 * c);
  const Image out = roi_align(img, Box{0.5, 0.5, 1, 1}, 8, 8);
  for (std::size_t r = 1; r < 7; ++r)
    for (std::size_t c = 1; c < 7; ++c) EXPECT_NEAR(out.at(r, c, 0), img.at(r, c, 0), 1e-6);
}

TEST(RoiAlign, LeftHalfOfRampMatchesOracle) {
  Image img(4, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = float(c) / 3.0f;
  const Image out = roi_align(img, Box::from_corners(0, 0, 0.5, 1), 2, 2);
  const Image want = oracle_roi(img, 0, 0, 2, 4, 2, 2);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    EXPECT_NEAR(out.pixels[i], want.pixels[i], 1e-6);
  // Hand values: samples at x = 0.25, 0.75 sit on columns 0 and 0.25.
  EXPECT_NEAR(out.at(0, 0, 0), (0.0 + 0.25 / 3.0) / 2.0, 1e-6);
}

TEST(RoiAlign, ExhaustiveCornerGridMatchesOracle) {
  const Image img = random_image(8, 8, 11);
  const double grid[6] = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::size_t checked = 0, rejected = 0;
  for (int a = 0; a < 6; ++a)
    for (int b = a + 1; b < 6; ++b)
      for (int c = 0; c < 6; ++c)
        for (int d = c + 1; d < 6; ++d) {
          const Box box = Box::from_corners(grid[a], grid[c], grid[b], grid[d]);
          if ((grid[b] - grid[a]) * 8 < 2 || (grid[d] - grid[c]) * 8 < 2) {
            EXPECT_THROW(roi_align(img, box, 3, 3), ValidationError);
            ++rejected;
            continue;
          }
          for (std::size_t od : {1u, 3u, 4u}) {
            const Image out = roi_align(img, box, od, od + 1);
            const Image want =
                oracle_roi(img, grid[a] * 8, grid[c] * 8, grid[b] * 8, grid[d] * 8, od, od + 1);
            for (std::size_t i = 0; i < out.pixels.size(); ++i)
              ASSERT_NEAR(out.pixels[i], want.pixels[i], 1e-6);
          }
          ++checked;
        }
  EXPECT_EQ(checked + rejected, 225u);
  EXPECT_GT(checked, 0u);
}

TEST(RoiAlign, RejectsInvalidInput) {
  const Image img = random_image(8, 8, 1);
  EXPECT_THROW(roi_align(img, Box{0.5, 0.5, 0.1, 0.5}, 2, 2), ValidationError);
  EXPECT_THROW(roi_align(img, Box{0.5, 0.5, 0.5, 0.5}, 0, 2), ValidationError);
  EXPECT_THROW(roi_align(img, Box{0.5, 0.5, 0.0, 0.5}, 2, 2), ValidationError);
  EXPECT_THROW(roi_align(img, Box{1.5, 0.5, 0.5, 0.5}, 2, 2), ValidationError);
}

TEST(BoxType, CornersClipToUnitSquare) {
  const Corners c = Box{0.9, 0.1, 0.4, 0.4}.corners();
  EXPECT_DOUBLE_EQ(c.x1, 0.7);
  EXPECT_DOUBLE_EQ(c.x2, 1.0);
  EXPECT_DOUBLE_EQ(c.y1, 0.0);
  EXPECT_NEAR(c.y2, 0.3, 1e-15);
}

// ---------------------------------------------------------------------------
// Encoders

TEST(ImageEncoder, SequenceLengthAndClsRow) {
  ModelConfig c;
  c.vocab_size = 11;
  const auto ps = init_params<float>(c, 1);
  Tape<float> tape(false);
  const Image img = random_image(64, 64, 2);
  const auto out = encode_image(tape, ps, c, img);
  ASSERT_EQ(out.seq.shape(), (Shape{65, 64}));
  for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(out.cls.at(0, j), out.seq.at(0, j));
}

TEST(ImageEncoder, DeterministicAndBatchConsistent) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 7);
  Tape<double> tape(false);
  const Image a = random_image(16, 16, 1), b = random_image(16, 16, 2);
  const auto oa = encode_image(tape, ps, c, a);
  const auto oa2 = encode_image(tape, ps, c, a);
  EXPECT_EQ(oa.seq.values(), oa2.seq.values());
  const Image* both[] = {&b, &a};
  const auto batch = encode_images<double>(tape, ps, c, both);
  for (std::size_t r = 0; r < 5; ++r) expect_rows_near(batch.rows, 5 + r, oa.seq, r, 1e-12);
}

TEST(ImageEncoder, RejectsWrongDimensions) {
  ModelConfig c = tiny_config();
  const auto ps = init_params<float>(c, 1);
  Tape<float> tape(false);
  EXPECT_THROW(encode_image(tape, ps, c, random_image(24, 24, 1)), ShapeError);
  c.image_size = 20;
  EXPECT_THROW(c.validate(), ValidationError);
}

// Without positional embeddings the encoder is equivariant to patch order.
TEST(ImageEncoder, PatchPermutationEquivariantWithoutPositions) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 5);
  const auto& pos = ps.at("vision.pos");
  ps.assign("vision.pos", std::vector<double>(pos.size(), 0.0));
  const Image img = random_image(16, 16, 9);
  Image swapped = img;
  // Swap patch 0 (top-left) with patch 3 (bottom-right).
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        std::swap(swapped.at(y, x, ch), swapped.at(y + 8, x + 8, ch));
  Tape<double> tape(false);
  const auto a = encode_image(tape, ps, c, img);
  const auto b = encode_image(tape, ps, c, swapped);
  expect_rows_near(a.seq, 0, b.seq, 0, 1e-12);
  expect_rows_near(a.seq, 1, b.seq, 4, 1e-12);
  expect_rows_near(a.seq, 4, b.seq, 1, 1e-12);
  expect_rows_near(a.seq, 2, b.seq, 2, 1e-12);
  expect_rows_near(a.seq, 3, b.seq, 3, 1e-12);
}

TEST(TextEncoder, AllPaddingDependsOnlyOnCls) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 3);
  TokenSeq padded{{0, 1, 1, 1, 1}, {1, 0, 0, 0, 0}};
  TokenSeq bare{{0}, {1}};
  Tape<double> tape(false);
  const auto a = encode_text(tape, ps, c, padded);
  const auto b = encode_text(tape, ps, c, bare);
  ASSERT_EQ(a.seq.dim(0), 5u);
  for (double v : a.seq.values()) EXPECT_TRUE(std::isfinite(v));
  expect_rows_near(a.cls, 0, b.cls, 0, 1e-12);
}

TEST(TextEncoder, PaddingNeverChangesValidRows) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 4);
  const auto v = test_vocab();
  Tape<double> tape(false);
  for (const char* text : {"a red circle", "blue square near a red circle", "of"}) {
    const auto short_seq = v.tokenize(text, 8);
    const auto long_seq = v.tokenize(text, 32);
    const auto a = encode_text(tape, ps, c, short_seq);
    const auto b = encode_text(tape, ps, c, long_seq);
    const TokenSeq* one[] = {&long_seq};
    const auto trimmed = encode_texts<double>(tape, ps, c, one, false);
    ASSERT_EQ(trimmed.rows.dim(0), short_seq.valid_length());
    for (std::size_t r = 0; r < short_seq.valid_length(); ++r) {
      expect_rows_near(a.seq, r, b.seq, r, 1e-6);
      expect_rows_near(trimmed.rows, r, b.seq, r, 1e-6);
    }
  }
}

TEST(TextEncoder, IdenticalInputsIdenticalOutputs) {
  const auto c = tiny_config();
  const auto ps = init_params<float>(c, 4);
  const auto s = test_vocab().tokenize("a red circle", 16);
  Tape<float> tape(false);
  EXPECT_EQ(encode_text(tape, ps, c, s).seq.values(), encode_text(tape, ps, c, s).seq.values());
}

TEST(TextEncoder, RejectsOutOfRangeIds) {
  const auto c = tiny_config();
  const auto ps = init_params<float>(c, 4);
  Tape<float> tape(false);
  TokenSeq bad{{0, 99}, {1, 1}};
  EXPECT_THROW(encode_text(tape, ps, c, bad), ValidationError);
}

TEST(Fusion, PureAndAlignedWithText) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 8);
  const auto s = test_vocab().tokenize("a red circle near a blue square", 16);
  Tape<double> tape(false);
  const auto v = encode_image(tape, ps, c, random_image(16, 16, 1));
  const auto t = encode_text(tape, ps, c, s);
  const auto f1 = fuse(tape, ps, c, v, t);
  const auto f2 = fuse(tape, ps, c, v, t);
  EXPECT_EQ(f1.seq.shape(), t.seq.shape());
  EXPECT_EQ(f1.cls.values(), f2.cls.values());
  expect_rows_near(f1.cls, 0, f1.seq, 0, 0.0);
}

TEST(Fusion, ZeroCrossOutputMakesClsVisionIndependent) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 8);
  for (std::size_t l = 0; l < c.fusion_layers; ++l) {
    const std::string b = "fusion.blocks." + std::to_string(l) + ".cross.out.";
    ps.assign(b + "w", std::vector<double>(ps.at(b + "w").size(), 0.0));
    ps.assign(b + "b", std::vector<double>(ps.at(b + "b").size(), 0.0));
  }
  const auto s = test_vocab().tokenize("a red circle", 16);
  Tape<double> tape(false);
  const auto t = encode_text(tape, ps, c, s);
  const auto f1 = fuse(tape, ps, c, encode_image(tape, ps, c, random_image(16, 16, 1)), t);
  const auto f2 = fuse(tape, ps, c, encode_image(tape, ps, c, random_image(16, 16, 2)), t);
  expect_rows_near(f1.cls, 0, f2.cls, 0, 1e-12);

  // Text-only transform: self-attention and feed-forward blocks alone.
  Tensor<double> x = t.seq;
  std::vector<ops::AttentionSegment> seg{{0, x.dim(0), 0, x.dim(0)}};
  const std::string b = "fusion.blocks.0";
  Tensor<double> h = detail::layer_norm(tape, ps, b + ".ln1", x);
  x = ops::add(tape, x, detail::self_attention(tape, ps, b + ".self", h, c.heads, seg, t.mask));
  h = detail::layer_norm(tape, ps, b + ".ln3", x);
  x = ops::add(tape, x, detail::mlp(tape, ps, b + ".mlp", h));
  x = detail::layer_norm(tape, ps, "fusion.ln_f", x);
  expect_rows_near(f1.cls, 0, x, 0, 1e-12);
}

TEST(Fusion, SensitiveToVisionAcrossSeeds) {
  const auto c = tiny_config();
  const auto s = test_vocab().tokenize("a blue square", 16);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ps = init_params<double>(c, seed);
    Tape<double> tape(false);
    const auto t = encode_text(tape, ps, c, s);
    const auto f1 = fuse(tape, ps, c, encode_image(tape, ps, c, random_image(16, 16, 2 * seed)), t);
    const auto f2 =
        fuse(tape, ps, c, encode_image(tape, ps, c, random_image(16, 16, 2 * seed + 1)), t);
    double diff = 0;
    for (std::size_t j = 0; j < c.width; ++j) diff += std::abs(f1.cls[j] - f2.cls[j]);
    EXPECT_GT(diff, 1e-8) << "seed " << seed;
  }
}

TEST(Fusion, RejectsWidthMismatch) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 1);
  Tape<double> tape(false);
  const auto t = encode_text(tape, ps, c, test_vocab().tokenize("a", 4));
  EncoderOutput<double> v{Tensor<double>::zeros({5, 8}), Tensor<double>::zeros({1, 8}), {}};
  EXPECT_THROW(fuse(tape, ps, c, v, t), ShapeError);
}

TEST(Projection, UnitNormAndScaleInvariant) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 2);
  Rng rng(5);
  Tape<double> tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(c.width), v10(c.width);
    for (std::size_t j = 0; j < c.width; ++j) {
      v[j] = rng.normal();
      v10[j] = 10 * v[j];
    }
    for (Modality m : {Modality::vision, Modality::text}) {
      const auto a = project(tape, ps, Tensor<double>::matrix(1, c.width, v), m);
      const auto b = project(tape, ps, Tensor<double>::matrix(1, c.width, v10), m);
      double n = 0;
      for (double x : a.values()) n += x * x;
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
      for (std::size_t j = 0; j < c.embed_dim; ++j) EXPECT_NEAR(a[j], b[j], 1e-12);
    }
  }
}

TEST(Projection, IdentityMapExample) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 2);
  std::vector<double> w(c.width * c.embed_dim, 0.0);
  for (std::size_t j = 0; j < c.embed_dim; ++j) w[j * c.embed_dim + j] = 1.0;
  ps.assign("proj_v.w", w);
  std::vector<double> x(c.width, 0.0);
  x[0] = 3;
  x[1] = 4;
  Tape<double> tape(false);
  const auto z = project(tape, ps, Tensor<double>::matrix(1, c.width, x), Modality::vision);
  EXPECT_NEAR(z[0], 0.6, 1e-12);
  EXPECT_NEAR(z[1], 0.8, 1e-12);
  for (std::size_t j = 2; j < c.embed_dim; ++j) EXPECT_EQ(z[j], 0.0);
}

TEST(Heads, MatchLogitsToProbabilities) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 2);
  ps.assign("match.w", std::vector<double>(c.width * 2, 0.0));
  Tape<double> tape(false);
  const auto x = Tensor<double>::full({1, c.width}, 0.3);
  auto p = ops::softmax(tape, match_head(tape, ps, x));
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  ps.assign("match.b", std::vector<double>{0.0, 20.0});
  p = ops::softmax(tape, match_head(tape, ps, x));
  EXPECT_GT(p[1], 0.999);
}

TEST(Heads, BoxHeadRangeAndZeroWeights) {
  const auto c = tiny_config();
  const auto ps = init_params<double>(c, 2);
  Rng rng(1);
  Tape<double> tape(false);
  std::vector<double> x(3 * c.width);
  for (auto& v : x) v = 50 * rng.normal();
  const auto b = box_head(tape, ps, Tensor<double>::matrix(3, c.width, x));
  for (double v : b.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  ps.assign("box.w", std::vector<double>(c.width * 4, 0.0));
  const auto z = box_head(tape, ps, Tensor<double>::matrix(3, c.width, x));
  for (double v : z.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Params, NamesUniqueAndMomentumSubsetClosed) {
  ModelConfig c;
  c.vocab_size = 40;
  const auto ps = init_params<float>(c, 0);
  EXPECT_THROW(ps.at("vision.nope"), ValidationError);
  const auto sub = ps.subset(momentum_prefixes());
  for (const auto& [name, t] : sub) {
    EXPECT_TRUE(name.rfind("vision.", 0) == 0 || name.rfind("text.", 0) == 0 ||
                name.rfind("proj_", 0) == 0)
        << name;
    EXPECT_TRUE(t.same_storage(ps.at(name)));
  }
  EXPECT_TRUE(sub.contains("proj_v.w"));
  EXPECT_FALSE(sub.contains("fusion.ln_f.g"));
  EXPECT_FALSE(sub.contains("match.w"));
  EXPECT_FALSE(ps.contains("proj_v.b"));
  // Same seed, same values; different seed, different values.
  EXPECT_TRUE(init_params<float>(c, 0).same_values(ps));
  EXPECT_FALSE(init_params<float>(c, 1).same_values(ps));
}

// Gradients of the whole encode-fuse-project pipeline agree with finite differences.
TEST(EncoderGradients, PipelineMatchesFiniteDifferences) {
  auto c = tiny_config();
  c.width = 8;
  c.embed_dim = 4;
  const auto ps = init_params<double>(c, 12);
  const Image img = random_image(16, 16, 3);
  const auto toks = test_vocab().tokenize("a red circle near", 8);
  Rng rng(2);
  std::vector<double> wv(c.embed_dim), wf(2);
  for (auto& x : wv) x = rng.normal();
  for (auto& x : wf) x = rng.normal();
  auto f = [&](Tape<double>& tape) {
    const auto v = encode_image(tape, ps, c, img);
    const auto t = encode_text(tape, ps, c, toks);
    const auto zv = project(tape, ps, v.cls, Modality::vision);
    const auto zt = project(tape, ps, t.cls, Modality::text);
    const auto fused = fuse(tape, ps, c, v, t);
    const auto logits = match_head(tape, ps, fused.cls);
    const auto box = box_head(tape, ps, fused.cls);
    auto s = ops::sum(tape, ops::mul(tape, ops::add(tape, zv, zt),
                                     Tensor<double>::matrix(1, c.embed_dim, wv)));
    s = ops::add(tape, s, ops::sum(tape, ops::mul(tape, logits, Tensor<double>::matrix(1, 2, wf))));
    return ops::add(tape, s, ops::sum(tape, box));
  };
  std::vector<Tensor<double>> wrt;
  for (const auto& [name, t] : ps) wrt.push_back(t);
  EXPECT_LT(finite_difference_check(f, wrt, 1e-5), 1e-4);
}
