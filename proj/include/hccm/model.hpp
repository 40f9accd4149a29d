#pragma once

// Toy vision, text and fusion transformers with projection and task heads.
//
// Encoders work on row-concatenated batches (SeqBatch): every sequence owns a
// contiguous block of rows and attention is restricted to its own block, so a
// whole batch runs through one set of matrix products.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/image.hpp"
#include "hccm/ops.hpp"
#include "hccm/rng.hpp"
#include "hccm/tensor.hpp"
#include "hccm/tokenizer.hpp"

namespace hccm {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t width = 64;
  std::size_t embed_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t fusion_layers = 2;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = kGlobalTextLen;

  std::size_t grid() const { return image_size / patch; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t ffn() const { return ffn_mult * width; }

  void validate() const {
    require(patch > 0 && image_size > 0 && image_size % patch == 0, "model: image_size ",
            image_size, " is not a multiple of patch ", patch);
    require(width > 0 && heads > 0 && width % heads == 0, "model: width ", width,
            " not divisible by heads ", heads);
    require(embed_dim > 0 && ffn_mult > 0, "model: embed_dim and ffn_mult must be positive");
    require(vocab_size >= 3, "model: vocab_size must cover the reserved tokens");
    require(max_text_len >= 2, "model: max_text_len must be at least 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in a stable (lexicographic) order.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> t) {
    const bool fresh = map_.emplace(name, std::move(t)).second;
    require(fresh, "params: duplicate name '", name, "'");
  }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    require(it != map_.end(), "params: missing '", name, "'");
    return it->second;
  }

  std::size_t size() const { return map_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : map_) n += t.size();
    return n;
  }

  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : map_) out.push_back(name);
    return out;
  }

  /// Independent copy of every tensor.
  ParamStore clone(bool requires_grad) const {
    ParamStore out;
    for (const auto& [name, t] : map_) out.add(name, t.clone(requires_grad));
    return out;
  }

  /// Handles (shared storage) of the tensors whose name starts with one of the prefixes.
  ParamStore subset(std::span<const std::string> prefixes) const {
    ParamStore out;
    for (const auto& [name, t] : map_)
      for (const auto& p : prefixes)
        if (name.compare(0, p.size(), p) == 0) {
          out.add(name, t);
          break;
        }
    return out;
  }

  template <typename U>
  ParamStore<U> cast(bool requires_grad) const {
    ParamStore<U> out;
    for (const auto& [name, t] : map_) out.add(name, t.template cast<U>(requires_grad));
    return out;
  }

  void set_requires_grad(bool on) const {
    for (const auto& [_, t] : map_) t.set_requires_grad(on);
  }
  void zero_grad() const {
    for (const auto& [_, t] : map_) t.zero_grad();
  }
  void clear_grad() const {
    for (const auto& [_, t] : map_) t.clear_grad();
  }

  /// Replace the values of `name` (shape must match).
  void assign(const std::string& name, std::span<const T> values) const {
    const auto& t = at(name);
    require<ShapeError>(values.size() == t.size(), "params: '", name, "' holds ", t.size(),
                        " values, got ", values.size());
    Tensor<T> h = t;
    std::copy(values.begin(), values.end(), h.data().begin());
  }

  bool same_values(const ParamStore& other) const {
    if (size() != other.size()) return false;
    for (const auto& [name, t] : map_) {
      if (!other.contains(name)) return false;
      if (t.values() != other.at(name).values()) return false;
    }
    return true;
  }

 private:
  Map map_;
};

/// Prefixes of the encoders and projections that carry a momentum shadow.
inline const std::vector<std::string>& momentum_prefixes() {
  static const std::vector<std::string> p{"vision.", "text.", "proj_v.", "proj_t."};
  return p;
}

namespace detail {

template <typename T>
void add_uniform(ParamStore<T>& ps, std::uint64_t seed, const std::string& name, Shape shape,
                 double bound) {
  Rng rng(derive_seed(seed, name));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  ps.add(name, Tensor<T>(std::move(shape), std::move(v)));
}

template <typename T>
void add_linear(ParamStore<T>& ps, std::uint64_t seed, const std::string& name, std::size_t in,
                std::size_t out, bool bias = true) {
  add_uniform(ps, seed, name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  if (bias) ps.add(name + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
void add_layer_norm(ParamStore<T>& ps, const std::string& name, std::size_t n) {
  ps.add(name + ".g", Tensor<T>::full({n}, T(1)));
  ps.add(name + ".b", Tensor<T>::zeros({n}));
}

template <typename T>
void add_mlp(ParamStore<T>& ps, std::uint64_t seed, const std::string& p, const ModelConfig& c) {
  add_linear(ps, seed, p + ".fc1", c.width, c.ffn());
  add_linear(ps, seed, p + ".fc2", c.ffn(), c.width);
}

template <typename T>
void add_encoder_blocks(ParamStore<T>& ps, std::uint64_t seed, const std::string& p,
                        const ModelConfig& c) {
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string b = p + ".blocks." + std::to_string(l);
    add_layer_norm(ps, b + ".ln1", c.width);
    add_linear(ps, seed, b + ".attn.qkv", c.width, 3 * c.width);
    add_linear(ps, seed, b + ".attn.out", c.width, c.width);
    add_layer_norm(ps, b + ".ln2", c.width);
    add_mlp(ps, seed, b + ".mlp", c);
  }
  add_layer_norm(ps, p + ".ln_f", c.width);
}

}  // namespace detail

/// Fresh parameters. Every tensor draws from its own stream derived from
/// (seed, name), so adding a parameter never perturbs the others.
template <typename T>
ParamStore<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  using namespace detail;
  c.validate();
  ParamStore<T> ps;
  constexpr double emb = 0.02 * 1.7320508075688772;  // uniform with std 0.02

  add_linear(ps, seed, "vision.patch", c.patch_dim(), c.width);
  add_uniform(ps, seed, "vision.cls", {1, c.width}, emb);
  add_uniform(ps, seed, "vision.pos", {1 + c.patches(), c.width}, emb);
  add_encoder_blocks(ps, seed, "vision", c);

  add_uniform(ps, seed, "text.tok", {c.vocab_size, c.width}, emb);
  add_uniform(ps, seed, "text.pos", {c.max_text_len, c.width}, emb);
  add_encoder_blocks(ps, seed, "text", c);

  for (std::size_t l = 0; l < c.fusion_layers; ++l) {
    const std::string b = "fusion.blocks." + std::to_string(l);
    add_layer_norm(ps, b + ".ln1", c.width);
    add_linear(ps, seed, b + ".self.qkv", c.width, 3 * c.width);
    add_linear(ps, seed, b + ".self.out", c.width, c.width);
    add_layer_norm(ps, b + ".ln2", c.width);
    add_linear(ps, seed, b + ".cross.q", c.width, c.width);
    add_linear(ps, seed, b + ".cross.kv", c.width, 2 * c.width);
    add_linear(ps, seed, b + ".cross.out", c.width, c.width);
    add_layer_norm(ps, b + ".ln3", c.width);
    add_mlp(ps, seed, b + ".mlp", c);
  }
  add_layer_norm(ps, "fusion.ln_f", c.width);

  add_linear(ps, seed, "proj_v", c.width, c.embed_dim, false);
  add_linear(ps, seed, "proj_t", c.width, c.embed_dim, false);
  add_linear(ps, seed, "match", c.width, 2);
  add_linear(ps, seed, "box", c.width, 4);
  return ps;
}

/// Contiguous rows [begin, begin + len) of a batch matrix.
struct RowSpan {
  std::size_t begin = 0;
  std::size_t len = 0;
};

/// Ragged batch of sequences stored as one [rows, width] matrix.
template <typename T>
struct SeqBatch {
  Tensor<T> rows;
  std::vector<RowSpan> seqs;
  std::vector<std::uint8_t> mask;  // one entry per row; empty means all rows valid

  std::size_t count() const { return seqs.size(); }

  std::vector<std::size_t> cls_index() const {
    std::vector<std::size_t> idx;
    idx.reserve(seqs.size());
    for (const auto& s : seqs) idx.push_back(s.begin);
    return idx;
  }

  /// [count, width] matrix of the first row of every sequence.
  Tensor<T> cls(Tape<T>& tape) const { return ops::gather_rows(tape, rows, cls_index()); }
};

/// Stack two batches; sequences of `b` follow those of `a`.
template <typename T>
SeqBatch<T> concat(Tape<T>& tape, const SeqBatch<T>& a, const SeqBatch<T>& b) {
  SeqBatch<T> out;
  out.rows = ops::concat_rows(tape, std::vector<Tensor<T>>{a.rows, b.rows});
  const std::size_t off = a.rows.dim(0);
  out.seqs = a.seqs;
  for (const auto& s : b.seqs) out.seqs.push_back({s.begin + off, s.len});
  if (!a.mask.empty() || !b.mask.empty()) {
    out.mask = a.mask.empty() ? std::vector<std::uint8_t>(a.rows.dim(0), 1) : a.mask;
    if (b.mask.empty())
      out.mask.insert(out.mask.end(), b.rows.dim(0), 1);
    else
      out.mask.insert(out.mask.end(), b.mask.begin(), b.mask.end());
  }
  return out;
}

/// One sequence of encoder output; cls is row 0 of seq.
template <typename T>
struct EncoderOutput {
  Tensor<T> seq;
  Tensor<T> cls;
  std::vector<std::uint8_t> mask;  // empty means all rows valid
};

namespace detail {

inline std::vector<ops::AttentionSegment> self_segments(const std::vector<RowSpan>& seqs) {
  std::vector<ops::AttentionSegment> segs;
  segs.reserve(seqs.size());
  for (const auto& s : seqs) segs.push_back({s.begin, s.len, s.begin, s.len});
  return segs;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const ParamStore<T>& ps, const std::string& name,
                 const Tensor<T>& x) {
  const std::string b = name + ".b";
  return ops::linear(tape, x, ps.at(name + ".w"), ps.contains(b) ? ps.at(b) : Tensor<T>{});
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const ParamStore<T>& ps, const std::string& name,
                     const Tensor<T>& x) {
  return ops::layer_norm(tape, x, ps.at(name + ".g"), ps.at(name + ".b"));
}

template <typename T>
Tensor<T> mlp(Tape<T>& tape, const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return linear(tape, ps, name + ".fc2", ops::gelu(tape, linear(tape, ps, name + ".fc1", x)));
}

template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const ParamStore<T>& ps, const std::string& name,
                         const Tensor<T>& h, std::size_t heads,
                         const std::vector<ops::AttentionSegment>& segs,
                         const std::vector<std::uint8_t>& mask) {
  const std::size_t d = h.dim(1);
  Tensor<T> qkv = linear(tape, ps, name + ".qkv", h);
  Tensor<T> q = ops::slice_cols(tape, qkv, 0, d);
  Tensor<T> k = ops::slice_cols(tape, qkv, d, d);
  Tensor<T> v = ops::slice_cols(tape, qkv, 2 * d, d);
  return linear(tape, ps, name + ".out", ops::attention(tape, q, k, v, heads, segs, mask));
}

// Pre-norm transformer stack followed by the final layer norm.
template <typename T>
Tensor<T> encoder_stack(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                        const std::string& prefix, Tensor<T> x,
                        const std::vector<RowSpan>& seqs, const std::vector<std::uint8_t>& mask) {
  const auto segs = self_segments(seqs);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string b = prefix + ".blocks." + std::to_string(l);
    Tensor<T> h = layer_norm(tape, ps, b + ".ln1", x);
    x = ops::add(tape, x, self_attention(tape, ps, b + ".attn", h, c.heads, segs, mask));
    h = layer_norm(tape, ps, b + ".ln2", x);
    x = ops::add(tape, x, mlp(tape, ps, b + ".mlp", h));
  }
  return layer_norm(tape, ps, prefix + ".ln_f", x);
}

}  // namespace detail

/// Patch rows of a batch of images: [count * patches, patch * patch * 3],
/// patches in raster order, each flattened as (dy, dx, channel).
template <typename T>
Tensor<T> patchify(const ModelConfig& c, std::span<const Image* const> images) {
  const std::size_t p = c.patch, g = c.grid(), pd = c.patch_dim();
  Tensor<T> out = Tensor<T>::zeros({images.size() * c.patches(), pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    require<ShapeError>(img.height == c.image_size && img.width == c.image_size,
                        "encode_image: image is ", img.height, "x", img.width, ", model expects ",
                        c.image_size, "x", c.image_size, " (multiples of patch ", p, ")");
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px) {
        T* row = out.data().data() + ((b * g + py) * g + px) * pd;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < 3; ++ch)
              *row++ = static_cast<T>(img.at(py * p + dy, px * p + dx, ch));
      }
  }
  return out;
}

/// Vision encoder over a batch: [CLS] + patch embeddings + learned positions,
/// then the transformer stack. Each sequence has 1 + patches rows.
template <typename T>
SeqBatch<T> encode_images(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                          std::span<const Image* const> images) {
  const std::size_t n = images.size(), np = c.patches(), len = 1 + np;
  require(n > 0, "encode_images: empty batch");
  Tensor<T> emb = detail::linear(tape, ps, "vision.patch", patchify<T>(c, images));
  Tensor<T> stacked = ops::concat_rows(tape, std::vector<Tensor<T>>{ps.at("vision.cls"), emb});
  std::vector<std::size_t> order, pos;
  order.reserve(n * len);
  pos.reserve(n * len);
  SeqBatch<T> out;
  for (std::size_t b = 0; b < n; ++b) {
    out.seqs.push_back({b * len, len});
    order.push_back(0);
    pos.push_back(0);
    for (std::size_t i = 0; i < np; ++i) {
      order.push_back(1 + b * np + i);
      pos.push_back(1 + i);
    }
  }
  Tensor<T> x = ops::add(tape, ops::gather_rows(tape, stacked, order),
                         ops::gather_rows(tape, ps.at("vision.pos"), pos));
  out.rows = detail::encoder_stack(tape, ps, c, "vision", x, out.seqs, out.mask);
  return out;
}

/// Text encoder over a batch with bidirectional masked self-attention.
///
/// With keep_padding the sequences keep their full padded length and padded
/// keys are masked; otherwise padding rows are dropped before encoding. Valid
/// rows agree between the two layouts.
template <typename T>
SeqBatch<T> encode_texts(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                         std::span<const TokenSeq* const> texts, bool keep_padding = false) {
  require(!texts.empty(), "encode_texts: empty batch");
  std::vector<std::size_t> ids, pos;
  SeqBatch<T> out;
  bool any_pad = false;
  for (const TokenSeq* t : texts) {
    require(t->ids.size() == t->mask.size() && !t->ids.empty() && t->ids[0] == kClsId &&
                t->mask[0],
            "encode_text: sequence must start with a valid [CLS]");
    require(t->ids.size() <= c.max_text_len, "encode_text: length ", t->ids.size(),
            " exceeds max_text_len ", c.max_text_len);
    const std::size_t begin = ids.size();
    for (std::size_t i = 0; i < t->ids.size(); ++i) {
      if (!keep_padding && !t->mask[i]) continue;
      const auto id = t->ids[i];
      require(id >= 0 && static_cast<std::size_t>(id) < c.vocab_size, "encode_text: token id ",
              id, " outside vocabulary of ", c.vocab_size);
      ids.push_back(static_cast<std::size_t>(id));
      pos.push_back(i);
      out.mask.push_back(t->mask[i]);
      any_pad = any_pad || !t->mask[i];
    }
    out.seqs.push_back({begin, ids.size() - begin});
  }
  if (!any_pad) out.mask.clear();
  Tensor<T> x = ops::add(tape, ops::gather_rows(tape, ps.at("text.tok"), ids),
                         ops::gather_rows(tape, ps.at("text.pos"), pos));
  out.rows = detail::encoder_stack(tape, ps, c, "text", x, out.seqs, out.mask);
  return out;
}

/// A (vision sequence, text sequence) pair to fuse.
struct FusePair {
  std::size_t vision = 0;
  std::size_t text = 0;
};

/// Fusion encoder: text rows are queries; every block runs text
/// self-attention, cross-attention over the paired vision sequence, and a
/// feed-forward layer. The output has one sequence per pair aligned with the
/// text positions.
template <typename T>
SeqBatch<T> fuse(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                 const SeqBatch<T>& vision, const SeqBatch<T>& text,
                 std::span<const FusePair> pairs) {
  require<ShapeError>(vision.rows.dim(1) == c.width && text.rows.dim(1) == c.width,
                      "fuse: width mismatch, vision ", shape_str(vision.rows.shape()), " text ",
                      shape_str(text.rows.shape()), " model ", c.width);
  require(!pairs.empty(), "fuse: no pairs");
  std::vector<std::size_t> rows;
  SeqBatch<T> out;
  std::vector<ops::AttentionSegment> cross;
  for (const auto& p : pairs) {
    require(p.vision < vision.count() && p.text < text.count(), "fuse: pair (", p.vision, ", ",
            p.text, ") out of range");
    const RowSpan ts = text.seqs[p.text];
    const RowSpan vs = vision.seqs[p.vision];
    const std::size_t begin = rows.size();
    for (std::size_t i = 0; i < ts.len; ++i) {
      rows.push_back(ts.begin + i);
      if (!text.mask.empty()) out.mask.push_back(text.mask[ts.begin + i]);
    }
    out.seqs.push_back({begin, ts.len});
    cross.push_back({begin, ts.len, vs.begin, vs.len});
  }
  const auto segs = detail::self_segments(out.seqs);
  Tensor<T> x = ops::gather_rows(tape, text.rows, rows);
  for (std::size_t l = 0; l < c.fusion_layers; ++l) {
    const std::string b = "fusion.blocks." + std::to_string(l);
    Tensor<T> h = detail::layer_norm(tape, ps, b + ".ln1", x);
    x = ops::add(tape, x, detail::self_attention(tape, ps, b + ".self", h, c.heads, segs, out.mask));
    h = detail::layer_norm(tape, ps, b + ".ln2", x);
    Tensor<T> q = detail::linear(tape, ps, b + ".cross.q", h);
    Tensor<T> kv = detail::linear(tape, ps, b + ".cross.kv", vision.rows);
    Tensor<T> k = ops::slice_cols(tape, kv, 0, c.width);
    Tensor<T> v = ops::slice_cols(tape, kv, c.width, c.width);
    Tensor<T> a = ops::attention(tape, q, k, v, c.heads, cross, vision.mask);
    x = ops::add(tape, x, detail::linear(tape, ps, b + ".cross.out", a));
    h = detail::layer_norm(tape, ps, b + ".ln3", x);
    x = ops::add(tape, x, detail::mlp(tape, ps, b + ".mlp", h));
  }
  out.rows = detail::layer_norm(tape, ps, "fusion.ln_f", x);
  return out;
}

enum class Modality { vision, text };

/// Bias-free linear map to the embedding space followed by L2 normalization.
template <typename T>
Tensor<T> project(Tape<T>& tape, const ParamStore<T>& ps, const Tensor<T>& cls, Modality m) {
  const Tensor<T>& w = ps.at(m == Modality::vision ? "proj_v.w" : "proj_t.w");
  return ops::l2_normalize(tape, ops::matmul(tape, cls, w));
}

/// Two logits per row: index 1 is "matched".
template <typename T>
Tensor<T> match_head(Tape<T>& tape, const ParamStore<T>& ps, const Tensor<T>& fused_cls) {
  return detail::linear(tape, ps, "match", fused_cls);
}

/// Box (cx, cy, w, h) per row, each coordinate squashed into (0, 1).
template <typename T>
Tensor<T> box_head(Tape<T>& tape, const ParamStore<T>& ps, const Tensor<T>& fused_cls) {
  return ops::sigmoid(tape, detail::linear(tape, ps, "box", fused_cls));
}

// ---------------------------------------------------------------------------
// Single-sequence conveniences

template <typename T>
EncoderOutput<T> to_output(Tape<T>& tape, const SeqBatch<T>& batch, std::size_t i) {
  const RowSpan s = batch.seqs.at(i);
  std::vector<std::size_t> idx(s.len);
  for (std::size_t r = 0; r < s.len; ++r) idx[r] = s.begin + r;
  EncoderOutput<T> out;
  out.seq = ops::gather_rows(tape, batch.rows, idx);
  out.cls = ops::gather_rows(tape, out.seq, std::vector<std::size_t>{0});
  if (!batch.mask.empty())
    out.mask.assign(batch.mask.begin() + static_cast<std::ptrdiff_t>(s.begin),
                    batch.mask.begin() + static_cast<std::ptrdiff_t>(s.begin + s.len));
  return out;
}

template <typename T>
SeqBatch<T> to_batch(const EncoderOutput<T>& o) {
  SeqBatch<T> b;
  b.rows = o.seq;
  b.seqs = {{0, o.seq.dim(0)}};
  b.mask = o.mask;
  return b;
}

template <typename T>
EncoderOutput<T> encode_image(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                              const Image& img) {
  const Image* one[] = {&img};
  return to_output(tape, encode_images<T>(tape, ps, c, one), 0);
}

template <typename T>
EncoderOutput<T> encode_text(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                             const TokenSeq& toks) {
  const TokenSeq* one[] = {&toks};
  return to_output(tape, encode_texts<T>(tape, ps, c, one, true), 0);
}

template <typename T>
EncoderOutput<T> fuse(Tape<T>& tape, const ParamStore<T>& ps, const ModelConfig& c,
                      const EncoderOutput<T>& vision, const EncoderOutput<T>& text) {
  const FusePair one[] = {{0, 0}};
  return to_output(tape, fuse<T>(tape, ps, c, to_batch(vision), to_batch(text), one), 0);
}

}  // namespace hccm
