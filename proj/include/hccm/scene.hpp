#pragma once

// Synthetic compositional scenes.
//
// The image is divided into grid x grid slots. Each occupied slot holds one
// cluster: an anchor object and a neighbor related to it by one spatial
// relation. A cluster is one region; its fragment describes exactly the two
// objects in it. The global caption names every fragment prefixed by the
// slot's position words, in slot (reading) order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/image.hpp"
#include "hccm/rng.hpp"
#include "hccm/tokenizer.hpp"

namespace hccm {

enum class Split { train, val, test, heldout };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::heldout: return "heldout";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "heldout") return Split::heldout;
  throw ValidationError("unknown split '" + s + "' (expected train|val|test|heldout)");
}

inline constexpr std::array<Split, 4> kAllSplits{Split::train, Split::val, Split::test,
                                                 Split::heldout};

struct Rgb {
  float r, g, b;
};

inline const std::vector<std::pair<std::string, Rgb>>& color_table() {
  static const std::vector<std::pair<std::string, Rgb>> t{
      {"red", {0.90f, 0.10f, 0.10f}},    {"green", {0.10f, 0.75f, 0.15f}},
      {"blue", {0.10f, 0.25f, 0.95f}},   {"yellow", {0.95f, 0.90f, 0.10f}},
      {"purple", {0.60f, 0.10f, 0.80f}}, {"orange", {1.00f, 0.55f, 0.00f}}};
  return t;
}

inline const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> s{"circle", "square", "triangle", "cross"};
  return s;
}

inline const std::vector<std::string>& relation_words() {
  static const std::vector<std::string> r{"left of", "above", "near", "surrounded by"};
  return r;
}

inline const std::vector<std::string>& size_words() {
  static const std::vector<std::string> s{"small", "large"};
  return s;
}

/// Shipped vocabulary: reserved tokens then every word the grammar emits.
inline std::vector<std::string> scene_vocabulary() {
  std::vector<std::string> v{"[CLS]", "[PAD]", "[UNK]", "a", "and", "colored", "shape"};
  for (const auto& [c, _] : color_table()) v.push_back(c);
  for (const auto& s : shape_words()) v.push_back(s);
  for (const char* w : {"left", "of", "above", "near", "surrounded", "by"}) v.push_back(w);
  for (const char* w : {"top", "middle", "bottom", "center", "right"}) v.push_back(w);
  for (const auto& s : size_words()) v.push_back(s);
  return v;
}

struct GenConfig {
  std::size_t image_size = 64;
  std::size_t grid = 2;
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "orange"};
  std::vector<std::string> shapes{"circle", "square", "triangle", "cross"};
  std::vector<std::string> sizes{};  // empty: one size, no size word
  std::vector<std::string> relations{"left of", "above", "near", "surrounded by"};
  std::size_t regions_min = 2;
  std::size_t regions_max = 3;
  double ambiguity = 0.3;       // train split
  double eval_ambiguity = 0.0;  // val, test, heldout
  std::size_t n_train = 2000, n_val = 200, n_test = 200, n_heldout = 200;
  std::uint64_t seed = 0;

  std::size_t count(Split s) const {
    switch (s) {
      case Split::train: return n_train;
      case Split::val: return n_val;
      case Split::test: return n_test;
      case Split::heldout: return n_heldout;
    }
    return 0;
  }

  double ambiguity_for(Split s) const { return s == Split::train ? ambiguity : eval_ambiguity; }

  void validate() const {
    require(ambiguity >= 0 && ambiguity <= 1, "gen config: ambiguity ", ambiguity,
            " outside [0,1]");
    require(eval_ambiguity >= 0 && eval_ambiguity <= 1, "gen config: eval_ambiguity ",
            eval_ambiguity, " outside [0,1]");
    require(!colors.empty() && !shapes.empty() && !relations.empty(),
            "gen config: object and relation vocabularies must be non-empty");
    auto known = [](const std::vector<std::string>& xs, const std::vector<std::string>& all,
                    const char* what) {
      for (const auto& x : xs)
        require(std::find(all.begin(), all.end(), x) != all.end(), "gen config: unknown ", what,
                " '", x, "'");
    };
    std::vector<std::string> all_colors;
    for (const auto& [c, _] : color_table()) all_colors.push_back(c);
    known(colors, all_colors, "color");
    known(shapes, shape_words(), "shape");
    known(relations, relation_words(), "relation");
    known(sizes, size_words(), "size");
    require(grid == 2 || grid == 3, "gen config: grid must be 2 or 3, got ", grid);
    require(image_size % grid == 0 && image_size / grid >= 24, "gen config: image_size ",
            image_size, " gives slots below 24 px for grid ", grid);
    require(regions_min >= 2 && regions_min <= regions_max && regions_max <= 8,
            "gen config: regions per scene must satisfy 2 <= min <= max <= 8");
    require(regions_max <= grid * grid, "gen config: cannot place ", regions_max,
            " non-overlapping regions in a ", grid, "x", grid, " slot grid");
    if (std::find(relations.begin(), relations.end(), "surrounded by") != relations.end())
      require(std::find(shapes.begin(), shapes.end(), "circle") != shapes.end() ||
                  std::find(shapes.begin(), shapes.end(), "square") != shapes.end(),
              "gen config: 'surrounded by' needs circle or square in the shape list");
    // Every split must have at least one admissible (color, relation) combination.
    bool seen = false, held = false;
    for (std::size_t c = 0; c < colors.size(); ++c)
      for (std::size_t r = 0; r < relations.size(); ++r)
        (is_heldout_combo(c, r) ? held : seen) = true;
    require(seen && (held || n_heldout == 0),
            "gen config: vocabulary leaves a split without admissible color/relation pairs");
  }

  /// Held-out (anchor color, relation) combinations, by index into the
  /// configured lists. Each color and each relation keeps seen combinations.
  static bool is_heldout_combo(std::size_t color, std::size_t relation) {
    return (color + relation) % 4 == 3;
  }
};

struct ObjectSpec {
  std::string color;
  std::string shape;
  std::string size;  // empty when sizes are disabled

  bool operator==(const ObjectSpec&) const = default;
};

/// Anchor + relation + neighbor in one slot.
struct Cluster {
  std::size_t slot = 0;
  ObjectSpec anchor;
  std::string relation;
  ObjectSpec neighbor;

  bool operator==(const Cluster&) const = default;
};

/// A drawn object; box is the tight pixel extent as image fractions.
struct SceneObject {
  ObjectSpec spec;
  Box box;
  bool ring = false;

  bool operator==(const SceneObject&) const = default;
};

struct Region {
  Box box;
  std::string fragment;

  bool operator==(const Region&) const = default;
};

struct SceneRecord {
  std::string scene_id;
  Split split = Split::train;
  std::string caption;
  std::vector<Region> regions;
  std::vector<Cluster> clusters;
  std::vector<SceneObject> objects;
  std::size_t image_size = 64;
  std::size_t grid = 2;
  std::uint64_t texture_seed = 0;
  Image image;

  bool operator==(const SceneRecord&) const = default;

  void validate() const {
    require(regions.size() >= 2 && regions.size() <= 8, "scene ", scene_id, ": ",
            regions.size(), " regions, expected 2..8");
    require(regions.size() == clusters.size(), "scene ", scene_id,
            ": region and cluster counts differ");
    for (const auto& r : regions) {
      r.box.validate();
      require(!r.fragment.empty(), "scene ", scene_id, ": empty fragment");
    }
    require(!caption.empty(), "scene ", scene_id, ": empty caption");
  }
};

// ---------------------------------------------------------------------------
// Phrases

inline std::string object_phrase(const ObjectSpec& o) {
  std::string s = "a ";
  if (!o.size.empty()) s += o.size + " ";
  return s + o.color + " " + o.shape;
}

inline std::string fragment_text(const Cluster& c) {
  return object_phrase(c.anchor) + " " + c.relation + " " + object_phrase(c.neighbor);
}

/// Position words of a slot, e.g. "top left" (grid 2) or "middle center" (grid 3).
inline std::string slot_words(std::size_t slot, std::size_t grid) {
  static const char* rows2[] = {"top", "bottom"};
  static const char* cols2[] = {"left", "right"};
  static const char* rows3[] = {"top", "middle", "bottom"};
  static const char* cols3[] = {"left", "center", "right"};
  const std::size_t r = slot / grid, c = slot % grid;
  return grid == 2 ? std::string(rows2[r]) + " " + cols2[c]
                   : std::string(rows3[r]) + " " + cols3[c];
}

// ---------------------------------------------------------------------------
// Geometry and rendering

namespace detail {

// Slot-local layout as fractions of the slot side.
constexpr double kObjectSide = 0.375;
constexpr double kSmallScale = 0.7;
constexpr double kInnerSide = 0.3125;
constexpr double kRingSide = 0.875;
constexpr double kSquareRingWidth = 5.0 / 32.0;
constexpr double kCircleRingWidth = 6.0 / 32.0;

struct Placed {
  ObjectSpec spec;
  double cx, cy, side;  // pixels
  bool ring;
};

inline std::vector<Placed> place_cluster(const Cluster& c, std::size_t image_size,
                                         std::size_t grid) {
  const double s = double(image_size) / double(grid);
  const double ox = double(c.slot % grid) * s, oy = double(c.slot / grid) * s;
  // Even pixel sides keep object boxes on pixel boundaries.
  auto side = [&](const ObjectSpec& o, double base) {
    return 2 * std::round(s * base * (o.size == "small" ? kSmallScale : 1.0) / 2);
  };
  const double lo = 0.25 * s, hi = 0.75 * s, mid = 0.5 * s;
  if (c.relation == "left of")
    return {{c.anchor, ox + lo, oy + mid, side(c.anchor, kObjectSide), false},
            {c.neighbor, ox + hi, oy + mid, side(c.neighbor, kObjectSide), false}};
  if (c.relation == "above")
    return {{c.anchor, ox + mid, oy + lo, side(c.anchor, kObjectSide), false},
            {c.neighbor, ox + mid, oy + hi, side(c.neighbor, kObjectSide), false}};
  if (c.relation == "near")
    return {{c.anchor, ox + lo, oy + lo, side(c.anchor, kObjectSide), false},
            {c.neighbor, ox + hi, oy + hi, side(c.neighbor, kObjectSide), false}};
  require(c.relation == "surrounded by", "scene: unknown relation '", c.relation, "'");
  return {{c.anchor, ox + mid, oy + mid, side(c.anchor, kInnerSide), false},
          {c.neighbor, ox + mid, oy + mid, std::round(s * kRingSide), true}};
}

// Membership of the pixel whose center is (px, py) in an object.
inline bool covers(const Placed& o, double px, double py, double slot_side) {
  const double dx = px - o.cx, dy = py - o.cy, h = o.side / 2;
  if (std::abs(dx) > h || std::abs(dy) > h) return false;
  const std::string& shape = o.spec.shape;
  if (o.ring) {
    if (shape == "circle") {
      const double r = std::sqrt(dx * dx + dy * dy);
      return r <= h && r >= h - kCircleRingWidth * slot_side;
    }
    const double inner = h - kSquareRingWidth * slot_side;
    return std::abs(dx) > inner || std::abs(dy) > inner;
  }
  if (shape == "square") return true;
  if (shape == "circle") return dx * dx + dy * dy <= h * h;
  if (shape == "triangle") {
    // Apex at the top center, base along the bottom edge, half a pixel of slack.
    const double t = (dy + h) / (2 * h);
    return std::abs(dx) <= t * h + 0.5;
  }
  // cross: two bars of width 0.4 * side
  return std::abs(dx) <= 0.2 * o.side || std::abs(dy) <= 0.2 * o.side;
}

inline Box pixel_box(double x1, double y1, double x2, double y2, std::size_t image_size) {
  const double n = double(image_size);
  return Box::from_corners(x1 / n, y1 / n, x2 / n, y2 / n);
}

}  // namespace detail

/// Deterministic rasterization: gray texture, then objects in cluster order
/// (anchor, neighbor) with hard edges.
inline Image render(const SceneRecord& scene) {
  const std::size_t n = scene.image_size;
  Image img(n, n);
  Rng tex(scene.texture_seed);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const float g = static_cast<float>(0.25 + 0.30 * tex.uniform());
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = g;
    }
  const double slot = double(n) / double(scene.grid);
  for (const auto& cl : scene.clusters)
    for (const auto& o : detail::place_cluster(cl, n, scene.grid)) {
      Rgb col{};
      bool found = false;
      for (const auto& [name, rgb] : color_table())
        if (name == o.spec.color) {
          col = rgb;
          found = true;
        }
      require(found, "render: unknown color '", o.spec.color, "'");
      const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(o.cx - o.side / 2)));
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(o.cy - o.side / 2)));
      const auto x1 = std::min(n, static_cast<std::size_t>(std::ceil(o.cx + o.side / 2)));
      const auto y1 = std::min(n, static_cast<std::size_t>(std::ceil(o.cy + o.side / 2)));
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          if (detail::covers(o, double(x) + 0.5, double(y) + 0.5, slot)) {
            img.at(y, x, 0) = col.r;
            img.at(y, x, 1) = col.g;
            img.at(y, x, 2) = col.b;
          }
    }
  return img;
}

/// Fill objects, regions and fragments from the clusters.
inline void layout_scene(SceneRecord& s) {
  s.objects.clear();
  s.regions.clear();
  for (const auto& cl : s.clusters) {
    double rx1 = 1e9, ry1 = 1e9, rx2 = -1e9, ry2 = -1e9;
    for (const auto& o : detail::place_cluster(cl, s.image_size, s.grid)) {
      const double x1 = o.cx - o.side / 2, y1 = o.cy - o.side / 2;
      const double x2 = o.cx + o.side / 2, y2 = o.cy + o.side / 2;
      s.objects.push_back({o.spec, detail::pixel_box(x1, y1, x2, y2, s.image_size), o.ring});
      rx1 = std::min(rx1, x1);
      ry1 = std::min(ry1, y1);
      rx2 = std::max(rx2, x2);
      ry2 = std::max(ry2, y2);
    }
    s.regions.push_back({detail::pixel_box(rx1, ry1, rx2, ry2, s.image_size), fragment_text(cl)});
  }
}

namespace detail {

inline std::string corrupt_fragment(const Cluster& c, Rng& rng) {
  ObjectSpec a = c.anchor, b = c.neighbor;
  switch (rng.below(4)) {
    case 0: a.color = "colored"; break;
    case 1: a.shape = "shape"; break;
    case 2: b.color = "colored"; break;
    default: b.shape = "shape"; break;
  }
  return object_phrase(a) + " " + c.relation + " " + object_phrase(b);
}

}  // namespace detail

/// Global caption: slot words + fragment per cluster in slot order. With
/// probability `ambiguity` a fragment is dropped or has one attribute replaced
/// by a generic word; at least one (possibly corrupted) fragment always remains.
inline std::string global_caption(const std::vector<Cluster>& clusters, std::size_t grid,
                                  double ambiguity, Rng& rng) {
  std::vector<std::size_t> order(clusters.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return clusters[a].slot < clusters[b].slot; });
  enum class Fate { keep, drop, corrupt };
  std::vector<Fate> fate(clusters.size(), Fate::keep);
  for (std::size_t i : order)
    if (rng.bernoulli(ambiguity)) fate[i] = rng.bernoulli(0.5) ? Fate::drop : Fate::corrupt;
  if (std::all_of(fate.begin(), fate.end(), [](Fate f) { return f == Fate::drop; }))
    fate[order[rng.below(order.size())]] = Fate::corrupt;
  std::string caption;
  for (std::size_t i : order) {
    if (fate[i] == Fate::drop) continue;
    const auto& c = clusters[i];
    const std::string frag =
        fate[i] == Fate::corrupt ? detail::corrupt_fragment(c, rng) : fragment_text(c);
    if (!caption.empty()) caption += ' ';
    caption += slot_words(c.slot, grid) + " " + frag;
  }
  return caption;
}

/// One scene. Train/val/test clusters avoid the held-out (color, relation)
/// combinations; heldout clusters use only those.
inline SceneRecord generate_scene(const GenConfig& cfg, Rng& rng, Split split,
                                  std::string scene_id) {
  cfg.validate();
  SceneRecord s;
  s.scene_id = std::move(scene_id);
  s.split = split;
  s.image_size = cfg.image_size;
  s.grid = cfg.grid;
  const std::size_t slots = cfg.grid * cfg.grid;
  const std::size_t k = cfg.regions_min + rng.below(cfg.regions_max - cfg.regions_min + 1);
  std::vector<std::size_t> slot_ids(slots);
  for (std::size_t i = 0; i < slots; ++i) slot_ids[i] = i;
  rng.shuffle(slot_ids.begin(), slot_ids.end());
  const bool want_heldout = split == Split::heldout;
  auto pick_object = [&](const std::vector<std::string>& shapes) {
    ObjectSpec o;
    o.color = cfg.colors[rng.below(cfg.colors.size())];
    o.shape = shapes[rng.below(shapes.size())];
    if (!cfg.sizes.empty()) o.size = cfg.sizes[rng.below(cfg.sizes.size())];
    return o;
  };
  std::vector<std::string> ring_shapes;
  for (const auto& sh : cfg.shapes)
    if (sh == "circle" || sh == "square") ring_shapes.push_back(sh);
  for (std::size_t i = 0; i < k; ++i) {
    Cluster c;
    c.slot = slot_ids[i];
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const std::size_t ci = rng.below(cfg.colors.size());
      const std::size_t ri = rng.below(cfg.relations.size());
      if (GenConfig::is_heldout_combo(ci, ri) != want_heldout) continue;
      c.anchor = pick_object(cfg.shapes);
      c.anchor.color = cfg.colors[ci];
      c.relation = cfg.relations[ri];
      c.neighbor = pick_object(c.relation == "surrounded by" ? ring_shapes : cfg.shapes);
      ok = true;
    }
    require(ok, "generate_scene: no admissible cluster for ", s.scene_id,
                " after 100 attempts (seed state ", rng.state().substr(0, 32), "...)");
    s.clusters.push_back(std::move(c));
  }
  layout_scene(s);
  s.caption = global_caption(s.clusters, cfg.grid, cfg.ambiguity_for(split), rng);
  s.texture_seed = rng.next();
  s.image = render(s);
  return s;
}

}  // namespace hccm
