#pragma once

// Dataset files and batching.
//
// On disk: <dir>/manifest.jsonl (one scene per line), <dir>/images/<id>.hct
// (f32 HxWx3 tensors) and <dir>/vocab.txt.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/image.hpp"
#include "hccm/rng.hpp"
#include "hccm/scene.hpp"
#include "hccm/tensor.hpp"
#include "hccm/tensor_io.hpp"
#include "hccm/tokenizer.hpp"
#include "json.hpp"

namespace hccm {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON mapping

inline json to_json(const GenConfig& c) {
  return {{"image_size", c.image_size}, {"grid", c.grid},
          {"colors", c.colors},         {"shapes", c.shapes},
          {"sizes", c.sizes},           {"relations", c.relations},
          {"regions_min", c.regions_min}, {"regions_max", c.regions_max},
          {"ambiguity", c.ambiguity},   {"eval_ambiguity", c.eval_ambiguity},
          {"n_train", c.n_train},       {"n_val", c.n_val},
          {"n_test", c.n_test},         {"n_heldout", c.n_heldout},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline GenConfig gen_config_from_json(const json& j) {
  require(j.is_object(), "gen config: expected a JSON object");
  GenConfig c;
  const json defaults = to_json(c);
  for (const auto& [k, _] : j.items())
    require(defaults.contains(k), "gen config: unknown key '", k, "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("gen config: bad value for '") + key + "': " + e.what());
    }
  };
  get("image_size", c.image_size);
  get("grid", c.grid);
  get("colors", c.colors);
  get("shapes", c.shapes);
  get("sizes", c.sizes);
  get("relations", c.relations);
  get("regions_min", c.regions_min);
  get("regions_max", c.regions_max);
  get("ambiguity", c.ambiguity);
  get("eval_ambiguity", c.eval_ambiguity);
  get("n_train", c.n_train);
  get("n_val", c.n_val);
  get("n_test", c.n_test);
  get("n_heldout", c.n_heldout);
  get("seed", c.seed);
  c.validate();
  return c;
}

inline GenConfig load_gen_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<IoError>(static_cast<bool>(in), "cannot open gen config ", path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("gen config " + path.string() + ": " + e.what());
  }
  return gen_config_from_json(j);
}

namespace detail {

inline json box_json(const Box& b) { return {b.cx, b.cy, b.w, b.h}; }

inline Box box_from_json(const json& j) {
  require(j.is_array() && j.size() == 4, "box must be [cx, cy, w, h]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  b.validate();
  return b;
}

inline json object_json(const ObjectSpec& o) {
  json j{{"color", o.color}, {"shape", o.shape}};
  if (!o.size.empty()) j["size"] = o.size;
  return j;
}

inline ObjectSpec object_from_json(const json& j) {
  return {j.at("color").get<std::string>(), j.at("shape").get<std::string>(),
          j.value("size", std::string{})};
}

}  // namespace detail

inline std::string image_file_name(const SceneRecord& r) { return "images/" + r.scene_id + ".hct"; }

inline json record_json(const SceneRecord& r) {
  json regions = json::array(), clusters = json::array(), objects = json::array();
  for (const auto& g : r.regions)
    regions.push_back({{"box", detail::box_json(g.box)}, {"fragment", g.fragment}});
  for (const auto& c : r.clusters)
    clusters.push_back({{"slot", c.slot},
                        {"anchor", detail::object_json(c.anchor)},
                        {"relation", c.relation},
                        {"neighbor", detail::object_json(c.neighbor)}});
  for (const auto& o : r.objects)
    objects.push_back({{"spec", detail::object_json(o.spec)},
                       {"box", detail::box_json(o.box)},
                       {"ring", o.ring}});
  return {{"scene_id", r.scene_id},     {"split", split_name(r.split)},
          {"caption", r.caption},       {"regions", regions},
          {"image", image_file_name(r)}, {"image_size", r.image_size},
          {"grid", r.grid},             {"texture_seed", r.texture_seed},
          {"clusters", clusters},       {"objects", objects}};
}

/// Parses one manifest object; the image is left empty.
inline SceneRecord record_from_json(const json& j) {
  SceneRecord r;
  r.scene_id = j.at("scene_id").get<std::string>();
  r.split = parse_split(j.at("split").get<std::string>());
  r.caption = j.at("caption").get<std::string>();
  r.image_size = j.value("image_size", std::size_t{64});
  r.grid = j.value("grid", std::size_t{2});
  r.texture_seed = j.value("texture_seed", std::uint64_t{0});
  for (const auto& g : j.at("regions"))
    r.regions.push_back({detail::box_from_json(g.at("box")), g.at("fragment").get<std::string>()});
  if (j.contains("clusters"))
    for (const auto& c : j.at("clusters"))
      r.clusters.push_back({c.at("slot").get<std::size_t>(),
                            detail::object_from_json(c.at("anchor")),
                            c.at("relation").get<std::string>(),
                            detail::object_from_json(c.at("neighbor"))});
  if (j.contains("objects"))
    for (const auto& o : j.at("objects"))
      r.objects.push_back({detail::object_from_json(o.at("spec")),
                           detail::box_from_json(o.at("box")), o.at("ring").get<bool>()});
  return r;
}

inline Tensor<float> image_tensor(const Image& img) {
  return Tensor<float>({img.height, img.width, 3}, std::span<const float>(img.pixels));
}

inline Image image_from_tensor(const Tensor<float>& t) {
  require(t.ndim() == 3 && t.shape()[2] == 3, "image tensor must be H x W x 3");
  Image img(t.shape()[0], t.shape()[1]);
  std::copy(t.values().begin(), t.values().end(), img.pixels.begin());
  return img;
}

inline void write_dataset(const std::vector<SceneRecord>& records,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  require<IoError>(!ec, "cannot create dataset directory ", (dir / "images").string(), ": ",
                   ec.message());
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  require<IoError>(static_cast<bool>(manifest), "cannot write ",
                   (dir / "manifest.jsonl").string());
  for (const auto& r : records) {
    r.validate();
    manifest << record_json(r).dump() << '\n';
    save_tensor(dir / image_file_name(r), image_tensor(r.image));
  }
  manifest.flush();
  require<IoError>(static_cast<bool>(manifest), "write failed for ",
                   (dir / "manifest.jsonl").string());
  Vocabulary(scene_vocabulary()).save(dir / "vocab.txt");
}

/// Reads every record (or only those of `split`), images included.
inline std::vector<SceneRecord> read_dataset(const std::filesystem::path& dir,
                                             std::optional<Split> split = std::nullopt) {
  const auto path = dir / "manifest.jsonl";
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open manifest ", path.string());
  std::vector<SceneRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    SceneRecord r;
    try {
      r = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (split && r.split != *split) continue;
    const auto img_path = dir / image_file_name(r);
    require<IoError>(std::filesystem::exists(img_path), "scene ", r.scene_id,
                     ": missing image file ", img_path.string());
    r.image = image_from_tensor(load_tensor<float>(img_path));
    out.push_back(std::move(r));
  }
  return out;
}

/// Vocabulary stored next to a dataset, or the built-in one if absent.
inline Vocabulary dataset_vocabulary(const std::filesystem::path& dir) {
  const auto p = dir / "vocab.txt";
  return std::filesystem::exists(p) ? Vocabulary::load(p) : Vocabulary(scene_vocabulary());
}

/// Per-scene seed, independent of generation order.
inline std::uint64_t scene_seed(const GenConfig& cfg, Split split, std::size_t index) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(split), index);
}

inline std::string scene_id(Split split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", split_name(split), index);
  return buf;
}

inline SceneRecord generate_indexed(const GenConfig& cfg, Split split, std::size_t index) {
  Rng rng(scene_seed(cfg, split, index));
  return generate_scene(cfg, rng, split, scene_id(split, index));
}

/// All four splits in split order.
inline std::vector<SceneRecord> generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  std::vector<SceneRecord> out;
  for (Split s : kAllSplits)
    for (std::size_t i = 0; i < cfg.count(s); ++i) out.push_back(generate_indexed(cfg, s, i));
  return out;
}

inline std::vector<SceneRecord> filter_split(const std::vector<SceneRecord>& records, Split s) {
  std::vector<SceneRecord> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// One training batch. Regions are flattened sample-major; region r belongs to
/// sample region_sample[r] and is its region_k[r]-th region.
struct Batch {
  std::vector<const SceneRecord*> records;
  std::vector<TokenSeq> captions;
  std::vector<TokenSeq> fragments;
  std::vector<std::size_t> region_sample;
  std::vector<std::size_t> region_k;
  std::vector<Box> region_boxes;

  std::size_t size() const { return records.size(); }
  std::size_t region_count() const { return region_sample.size(); }
};

inline Batch make_batch(std::vector<const SceneRecord*> recs, const Vocabulary& vocab) {
  Batch b;
  b.records = std::move(recs);
  for (std::size_t i = 0; i < b.records.size(); ++i) {
    const SceneRecord& r = *b.records[i];
    b.captions.push_back(vocab.tokenize(r.caption, kGlobalTextLen));
    for (std::size_t k = 0; k < r.regions.size(); ++k) {
      b.fragments.push_back(vocab.tokenize(r.regions[k].fragment, kRegionTextLen));
      b.region_sample.push_back(i);
      b.region_k.push_back(k);
      b.region_boxes.push_back(r.regions[k].box);
    }
  }
  return b;
}

/// Epoch-wise batching with a seeded shuffle; a trailing partial batch is dropped.
class BatchIterator {
 public:
  BatchIterator(const std::vector<SceneRecord>& records, std::size_t batch_size,
                std::uint64_t seed, bool shuffle = true)
      : records_(&records), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
    require(batch_size >= 2, "batch_size must be at least 2 (matching needs a negative), got ",
            batch_size);
  }

  std::size_t batches_per_epoch() const { return records_->size() / batch_size_; }

  /// Record order of one epoch.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(records_->size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle_) {
      Rng rng(derive_seed(seed_, "epoch", epoch));
      rng.shuffle(order.begin(), order.end());
    }
    return order;
  }

  std::vector<std::size_t> batch_indices(std::size_t epoch, std::size_t b) const {
    require(b < batches_per_epoch(), "batch index ", b, " out of range");
    const auto order = epoch_order(epoch);
    return {order.begin() + static_cast<std::ptrdiff_t>(b * batch_size_),
            order.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size_)};
  }

  Batch batch(std::size_t epoch, std::size_t b, const Vocabulary& vocab) const {
    std::vector<const SceneRecord*> recs;
    for (std::size_t i : batch_indices(epoch, b)) recs.push_back(&(*records_)[i]);
    return make_batch(std::move(recs), vocab);
  }

  std::vector<Batch> epoch(std::size_t e, const Vocabulary& vocab) const {
    std::vector<Batch> out;
    const auto order = epoch_order(e);
    for (std::size_t b = 0; b < batches_per_epoch(); ++b) {
      std::vector<const SceneRecord*> recs;
      for (std::size_t i = b * batch_size_; i < (b + 1) * batch_size_; ++i)
        recs.push_back(&(*records_)[order[i]]);
      out.push_back(make_batch(std::move(recs), vocab));
    }
    return out;
  }

 private:
  const std::vector<SceneRecord>* records_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

}  // namespace hccm
