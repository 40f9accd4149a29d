#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hccm/dataset.hpp"
#include "hccm/scene.hpp"

using namespace hccm;
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

GenConfig small_config(std::uint64_t seed = 7) {
  GenConfig c;
  c.seed = seed;
  c.n_train = 40;
  c.n_val = 10;
  c.n_test = 10;
  c.n_heldout = 10;
  return c;
}

std::vector<SceneRecord> scenes(const GenConfig& cfg, Split split, std::size_t n) {
  std::vector<SceneRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_indexed(cfg, split, i));
  return out;
}

std::size_t color_index(const GenConfig& cfg, const std::string& c) {
  return static_cast<std::size_t>(std::find(cfg.colors.begin(), cfg.colors.end(), c) -
                                  cfg.colors.begin());
}

std::size_t relation_index(const GenConfig& cfg, const std::string& r) {
  return static_cast<std::size_t>(std::find(cfg.relations.begin(), cfg.relations.end(), r) -
                                  cfg.relations.begin());
}

Rgb rgb_of(const std::string& name) {
  for (const auto& [n, c] : color_table())
    if (n == name) return c;
  ADD_FAILURE() << "no color " << name;
  return {};
}

bool pixel_is(const Image& img, std::size_t y, std::size_t x, Rgb c) {
  return img.at(y, x, 0) == c.r && img.at(y, x, 1) == c.g && img.at(y, x, 2) == c.b;
}

std::string layout_key(const SceneRecord& r) {
  std::vector<std::string> parts;
  for (const auto& c : r.clusters) parts.push_back(std::to_string(c.slot) + ":" + fragment_text(c));
  std::sort(parts.begin(), parts.end());
  std::string key;
  for (const auto& p : parts) key += p + "|";
  return key;
}

}  // namespace

TEST(SceneVocabulary, ShippedFileMatchesGrammar) {
  const auto shipped = Vocabulary::load(fs::path(HCCM_SOURCE_DIR) / "data" / "vocab.txt");
  EXPECT_EQ(shipped.tokens(), scene_vocabulary());
}

TEST(SceneGenerator, NoUnknownTokensAndNoTruncation) {
  GenConfig cfg = small_config(3);
  const Vocabulary vocab(scene_vocabulary());
  for (Split s : kAllSplits)
    for (const auto& r : scenes(cfg, s, 150)) {
      const auto cap = vocab.tokenize(r.caption, kGlobalTextLen);
      EXPECT_EQ(std::count(cap.ids.begin(), cap.ids.end(), kUnkId), 0) << r.caption;
      EXPECT_EQ(split_words(r.caption).size() + 1, cap.valid_length()) << r.caption;
      for (const auto& g : r.regions) {
        const auto f = vocab.tokenize(g.fragment, kRegionTextLen);
        EXPECT_EQ(std::count(f.ids.begin(), f.ids.end(), kUnkId), 0) << g.fragment;
        EXPECT_EQ(split_words(g.fragment).size() + 1, f.valid_length());
      }
    }
}

TEST(SceneGenerator, BoxesValidAndRegionCountsInRange) {
  GenConfig cfg = small_config(11);
  for (const auto& r : scenes(cfg, Split::train, 300)) {
    EXPECT_NO_THROW(r.validate());
    EXPECT_GE(r.regions.size(), cfg.regions_min);
    EXPECT_LE(r.regions.size(), cfg.regions_max);
    std::set<std::size_t> slots;
    for (const auto& c : r.clusters) slots.insert(c.slot);
    EXPECT_EQ(slots.size(), r.clusters.size());
    for (const auto& o : r.objects) EXPECT_TRUE(o.box.valid());
  }
}

TEST(SceneGenerator, AmbiguityZeroKeepsEveryFragment) {
  GenConfig cfg = small_config(5);
  cfg.ambiguity = 0.0;
  for (const auto& r : scenes(cfg, Split::train, 200))
    for (const auto& g : r.regions)
      EXPECT_NE(r.caption.find(g.fragment), std::string::npos) << r.caption << " / " << g.fragment;
}

TEST(SceneGenerator, AmbiguityOneCorruptsCaptionOnly) {
  GenConfig cfg = small_config(5);
  cfg.ambiguity = 1.0;
  std::size_t corrupted_words = 0;
  for (const auto& r : scenes(cfg, Split::train, 200)) {
    ASSERT_EQ(r.regions.size(), r.clusters.size());
    for (std::size_t k = 0; k < r.regions.size(); ++k) {
      EXPECT_EQ(r.regions[k].fragment, fragment_text(r.clusters[k]));
      EXPECT_EQ(r.caption.find(r.regions[k].fragment), std::string::npos) << r.caption;
    }
    EXPECT_FALSE(r.caption.empty());
    if (r.caption.find("colored") != std::string::npos ||
        r.caption.find("shape") != std::string::npos)
      ++corrupted_words;
  }
  EXPECT_EQ(corrupted_words, 200u);  // at least one corrupted fragment always survives
}

TEST(SceneGenerator, EvalSplitsUseEvalAmbiguity) {
  GenConfig cfg = small_config(9);
  cfg.ambiguity = 1.0;
  cfg.eval_ambiguity = 0.0;
  for (Split s : {Split::val, Split::test, Split::heldout})
    for (const auto& r : scenes(cfg, s, 30))
      for (const auto& g : r.regions) EXPECT_NE(r.caption.find(g.fragment), std::string::npos);
}

TEST(SceneGenerator, DeterministicPerSeed) {
  GenConfig cfg = small_config(21);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto a = generate_indexed(cfg, Split::train, i);
    const auto b = generate_indexed(cfg, Split::train, i);
    EXPECT_EQ(a, b);
    EXPECT_EQ(record_json(a).dump(), record_json(b).dump());
  }
  GenConfig other = cfg;
  other.seed = 22;
  EXPECT_NE(generate_indexed(cfg, Split::train, 0).image,
            generate_indexed(other, Split::train, 0).image);
}

TEST(SceneGenerator, HeldoutCombinationsPartitionSplits) {
  GenConfig cfg = small_config(13);
  std::size_t heldout_clusters = 0;
  for (Split s : kAllSplits)
    for (const auto& r : scenes(cfg, s, 120))
      for (const auto& c : r.clusters) {
        const bool held = GenConfig::is_heldout_combo(color_index(cfg, c.anchor.color),
                                                      relation_index(cfg, c.relation));
        EXPECT_EQ(held, s == Split::heldout) << r.scene_id << ": " << fragment_text(c);
        heldout_clusters += held;
      }
  EXPECT_GT(heldout_clusters, 0u);
  // Each color and each relation appears on both sides of the partition.
  for (std::size_t c = 0; c < cfg.colors.size(); ++c) {
    std::size_t held = 0;
    for (std::size_t r = 0; r < cfg.relations.size(); ++r) held += GenConfig::is_heldout_combo(c, r);
    EXPECT_GT(held, 0u);
    EXPECT_LT(held, cfg.relations.size());
  }
}

TEST(SceneGenerator, DistinctLayoutsHaveDistinctCaptions) {
  GenConfig cfg = small_config(17);
  cfg.ambiguity = 0.0;
  std::map<std::string, std::string> caption_to_layout;
  for (const auto& r : scenes(cfg, Split::train, 1000)) {
    const auto key = layout_key(r);
    auto [it, fresh] = caption_to_layout.emplace(r.caption, key);
    if (!fresh) {
      EXPECT_EQ(it->second, key) << "caption shared by two layouts: " << r.caption;
    }
  }
}

TEST(SceneRender, PureAndInRange) {
  const auto r = generate_indexed(small_config(), Split::train, 3);
  EXPECT_EQ(render(r), render(r));
  EXPECT_EQ(render(r), r.image);
  for (float v : r.image.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(SceneRender, ObjectCenterPixelHasObjectColor) {
  GenConfig cfg = small_config(29);
  for (const auto& r : scenes(cfg, Split::train, 100))
    for (const auto& o : r.objects) {
      if (o.ring) continue;  // a ring's center holds the object it surrounds
      const auto y = static_cast<std::size_t>(o.box.cy * double(r.image_size));
      const auto x = static_cast<std::size_t>(o.box.cx * double(r.image_size));
      EXPECT_TRUE(pixel_is(r.image, y, x, rgb_of(o.spec.color)))
          << r.scene_id << " " << o.spec.color << " " << o.spec.shape;
    }
}

TEST(SceneRender, SingleCenteredSquare) {
  SceneRecord s;
  s.scene_id = "manual";
  s.image_size = 64;
  s.grid = 2;
  s.clusters.push_back({0, {"green", "square", ""}, "surrounded by", {"blue", "square", ""}});
  layout_scene(s);
  const Image img = render(s);
  // Slot 0 spans [0,32); its center pixel is the anchor.
  EXPECT_TRUE(pixel_is(img, 16, 16, rgb_of("green")));
  EXPECT_TRUE(pixel_is(img, 16, 3, rgb_of("blue")));  // ring edge, 2 px in from the box
  EXPECT_FALSE(pixel_is(img, 40, 40, rgb_of("green")));
}

TEST(SceneRender, ObjectBoxIsMostlyObjectColor) {
  GenConfig cfg = small_config(31);
  cfg.sizes = {"small", "large"};
  cfg.regions_max = 3;
  std::size_t checked = 0;
  for (const auto& r : scenes(cfg, Split::train, 150))
    for (const auto& o : r.objects) {
      const Corners c = o.box.corners();
      const double n = double(r.image_size);
      std::size_t inside = 0, hits = 0;
      const Rgb col = rgb_of(o.spec.color);
      for (std::size_t y = 0; y < r.image_size; ++y)
        for (std::size_t x = 0; x < r.image_size; ++x) {
          const double px = (double(x) + 0.5) / n, py = (double(y) + 0.5) / n;
          if (px < c.x1 || px > c.x2 || py < c.y1 || py > c.y2) continue;
          ++inside;
          hits += pixel_is(r.image, y, x, col);
        }
      ASSERT_GT(inside, 0u);
      EXPECT_GT(double(hits) / double(inside), 0.5) << o.spec.shape << (o.ring ? " ring" : "");
      ++checked;
    }
  EXPECT_GT(checked, 500u);
}

TEST(GenConfigJson, RoundTripAndValidation) {
  GenConfig c = small_config(99);
  c.ambiguity = 0.25;
  const GenConfig back = gen_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));

  try {
    gen_config_from_json(json{{"ambiguity", 1.5}});
    FAIL() << "ambiguity 1.5 accepted";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("ambiguity"), std::string::npos);
  }
  EXPECT_THROW(gen_config_from_json(json{{"colour", "red"}}), ValidationError);
  EXPECT_THROW(gen_config_from_json(json{{"regions_max", 5}}), ValidationError);
  EXPECT_THROW(gen_config_from_json(json{{"grid", 4}}), ValidationError);
  EXPECT_THROW(gen_config_from_json(json{{"shapes", {"hexagon"}}}), ValidationError);
  EXPECT_NO_THROW(gen_config_from_json(json{{"grid", 3}, {"image_size", 72}, {"regions_max", 5}}));
}

TEST(DatasetIo, RoundTripTenRecords) {
  TempDir dir("rt");
  GenConfig cfg = small_config(41);
  cfg.sizes = {"small", "large"};
  std::vector<SceneRecord> recs;
  for (Split s : kAllSplits)
    for (const auto& r : scenes(cfg, s, s == Split::train ? 4 : 2)) recs.push_back(r);
  ASSERT_EQ(recs.size(), 10u);
  write_dataset(recs, dir.path);
  const auto back = read_dataset(dir.path);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i], recs[i]) << recs[i].scene_id;
    EXPECT_EQ(std::memcmp(back[i].image.pixels.data(), recs[i].image.pixels.data(),
                          recs[i].image.pixels.size() * sizeof(float)),
              0);
  }
  EXPECT_EQ(read_dataset(dir.path, Split::heldout).size(), 2u);
  EXPECT_EQ(dataset_vocabulary(dir.path).tokens(), scene_vocabulary());
}

namespace {

void rewrite_manifest_line(const fs::path& dir, std::size_t line_idx, const std::string& text) {
  std::ifstream in(dir / "manifest.jsonl");
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) lines.push_back(l);
  in.close();
  lines.at(line_idx) = text;
  std::ofstream out(dir / "manifest.jsonl");
  for (const auto& x : lines) out << x << '\n';
}

}  // namespace

TEST(DatasetIo, ZeroWidthBoxRejectedNamingInvariant) {
  TempDir dir("w0");
  auto recs = scenes(small_config(), Split::train, 3);
  write_dataset(recs, dir.path);
  json j = record_json(recs[1]);
  j["regions"][0]["box"][2] = 0.0;
  rewrite_manifest_line(dir.path, 1, j.dump());
  try {
    read_dataset(dir.path);
    FAIL() << "w = 0 accepted";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("0 < w,h <= 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
  }
}

TEST(DatasetIo, MalformedLineAndMissingImage) {
  TempDir dir("bad");
  auto recs = scenes(small_config(), Split::train, 4);
  write_dataset(recs, dir.path);
  rewrite_manifest_line(dir.path, 2, "{\"scene_id\": ");
  try {
    read_dataset(dir.path);
    FAIL() << "malformed line accepted";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  write_dataset(recs, dir.path);
  fs::remove(dir.path / image_file_name(recs[3]));
  try {
    read_dataset(dir.path);
    FAIL() << "missing image accepted";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(recs[3].scene_id), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(dir.path / "nope"), IoError);
}

TEST(DatasetIo, TwoThousandRecordsUnderThirtySeconds) {
  TempDir dir("big");
  GenConfig cfg;
  cfg.seed = 1;
  const auto t0 = std::chrono::steady_clock::now();
  const auto recs = scenes(cfg, Split::train, 2000);
  const auto t1 = std::chrono::steady_clock::now();
  write_dataset(recs, dir.path);
  const auto back = read_dataset(dir.path);
  const auto t2 = std::chrono::steady_clock::now();
  EXPECT_EQ(back.size(), 2000u);
  EXPECT_EQ(back.back(), recs.back());
  const double io = std::chrono::duration<double>(t2 - t1).count();
  EXPECT_LT(io, 30.0);
  RecordProperty("generate_seconds", std::to_string(std::chrono::duration<double>(t1 - t0).count()));
  RecordProperty("io_seconds", std::to_string(io));
}

TEST(DatasetGen, DefaultSplitCounts) {
  GenConfig cfg;
  EXPECT_EQ(cfg.count(Split::train), 2000u);
  EXPECT_EQ(cfg.count(Split::val), 200u);
  EXPECT_EQ(cfg.count(Split::test), 200u);
  EXPECT_EQ(cfg.count(Split::heldout), 200u);
  const auto all = generate_dataset(small_config());
  EXPECT_EQ(all.size(), 70u);
  EXPECT_EQ(filter_split(all, Split::val).size(), 10u);
  EXPECT_EQ(all.front().scene_id, "train-00000");
  EXPECT_EQ(all.back().scene_id, "heldout-00009");
}

TEST(BatchIterator, CountsDeterminismAndCoverage) {
  const auto recs = scenes(small_config(), Split::train, 10);
  const Vocabulary vocab(scene_vocabulary());
  EXPECT_THROW(BatchIterator(recs, 1, 0), ValidationError);
  BatchIterator it(recs, 4, 123);
  EXPECT_EQ(it.batches_per_epoch(), 2u);
  EXPECT_EQ(it.epoch(0, vocab).size(), 2u);
  BatchIterator again(recs, 4, 123);
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t b = 0; b < 2; ++b) EXPECT_EQ(it.batch_indices(e, b), again.batch_indices(e, b));
  EXPECT_NE(it.epoch_order(0), it.epoch_order(1));

  for (std::size_t e = 0; e < 5; ++e) {
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& batch : it.epoch(e, vocab))
      for (const auto* r : batch.records) {
        seen.insert(r->scene_id);
        ++total;
      }
    EXPECT_EQ(seen.size(), total);
    EXPECT_EQ(total, 8u);
    for (const auto& id : seen)
      EXPECT_TRUE(std::any_of(recs.begin(), recs.end(),
                              [&](const SceneRecord& r) { return r.scene_id == id; }));
  }
  BatchIterator ordered(recs, 5, 0, false);
  EXPECT_EQ(ordered.batch_indices(0, 1), (std::vector<std::size_t>{5, 6, 7, 8, 9}));
}

TEST(BatchIterator, RegionIndexingPreserved) {
  const auto recs = scenes(small_config(), Split::train, 8);
  const Vocabulary vocab(scene_vocabulary());
  const Batch b = BatchIterator(recs, 4, 9).batch(0, 1, vocab);
  ASSERT_EQ(b.size(), 4u);
  std::size_t expected = 0;
  for (const auto* r : b.records) expected += r->regions.size();
  ASSERT_EQ(b.region_count(), expected);
  for (std::size_t r = 0; r < b.region_count(); ++r) {
    const auto& rec = *b.records[b.region_sample[r]];
    EXPECT_EQ(b.region_boxes[r], rec.regions[b.region_k[r]].box);
    EXPECT_EQ(vocab.detokenize(b.fragments[r]), rec.regions[b.region_k[r]].fragment);
    if (r > 0) {
      EXPECT_GE(b.region_sample[r], b.region_sample[r - 1]);
    }
  }
  for (std::size_t i = 0; i < b.size(); ++i)
    EXPECT_EQ(vocab.detokenize(b.captions[i]), b.records[i]->caption);
}
