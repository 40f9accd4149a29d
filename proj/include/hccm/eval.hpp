#pragma once

// Bidirectional retrieval evaluation.
//
// Directions follow the drone-retrieval naming:
//   image query: each image ranks the caption gallery;
//   text query:  each caption ranks the image gallery.
// Ranks break score ties by ascending gallery index.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hccm/error.hpp"
#include "hccm/model.hpp"
#include "hccm/scene.hpp"
#include "hccm/tokenizer.hpp"
#include "json.hpp"

namespace hccm {

/// Dense row-major query x gallery score matrix.
struct ScoreMatrix {
  std::size_t queries = 0, gallery = 0;
  std::vector<double> s;

  ScoreMatrix() = default;
  ScoreMatrix(std::size_t q, std::size_t g, double fill = 0.0) : queries(q), gallery(g), s(q * g, fill) {}

  double& operator()(std::size_t q, std::size_t g) { return s[q * gallery + g]; }
  double operator()(std::size_t q, std::size_t g) const { return s[q * gallery + g]; }

  ScoreMatrix transposed() const {
    ScoreMatrix t(gallery, queries);
    for (std::size_t q = 0; q < queries; ++q)
      for (std::size_t g = 0; g < gallery; ++g) t(g, q) = (*this)(q, g);
    return t;
  }
};

/// 0-based rank of gallery item `truth` in row q: items scoring higher, plus
/// equal-scoring items with a smaller index.
inline std::size_t rank_of(const ScoreMatrix& m, std::size_t q, std::size_t truth) {
  const double st = m(q, truth);
  std::size_t rank = 0;
  for (std::size_t g = 0; g < m.gallery; ++g) {
    const double v = m(q, g);
    if (v > st || (v == st && g < truth)) ++rank;
  }
  return rank;
}

/// Percentage of queries whose true item ranks within the top k, per k.
inline std::vector<double> recall_at_k(const ScoreMatrix& m, std::span<const std::size_t> truth,
                                       std::span<const std::size_t> ks) {
  require(truth.size() == m.queries, "recall_at_k: ", truth.size(), " truth indices for ",
          m.queries, " queries");
  require(m.queries > 0, "recall_at_k: no queries");
  for (std::size_t k : ks)
    require(k >= 1 && k <= m.gallery, "recall_at_k: k = ", k, " outside [1, ", m.gallery, "]");
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t q = 0; q < m.queries; ++q) {
    require(truth[q] < m.gallery, "recall_at_k: truth ", truth[q], " outside gallery");
    for (double v : std::span<const double>(m.s.data() + q * m.gallery, m.gallery))
      require(!std::isnan(v), "recall_at_k: NaN score in query ", q);
    const std::size_t r = rank_of(m, q, truth[q]);
    for (std::size_t i = 0; i < ks.size(); ++i) hits[i] += r < ks[i];
  }
  std::vector<double> out;
  for (std::size_t h : hits) out.push_back(100.0 * double(h) / double(m.queries));
  return out;
}

struct RetrievalReport {
  double image_query_r1 = 0, image_query_r5 = 0, image_query_r10 = 0;
  double text_query_r1 = 0, text_query_r5 = 0, text_query_r10 = 0;
  double mr = 0;
  std::size_t queries = 0, gallery = 0;
  std::size_t rerank_top_r = 0;

  std::array<double, 6> recalls() const {
    return {image_query_r1, image_query_r5, image_query_r10,
            text_query_r1,  text_query_r5,  text_query_r10};
  }
};

inline double mean_recall(const RetrievalReport& r) {
  const auto v = r.recalls();
  return std::accumulate(v.begin(), v.end(), 0.0) / 6.0;
}

/// Report from text->image scores (rows: captions, columns: images), where
/// caption i describes image i. Ks beyond the gallery size are clamped to it.
inline RetrievalReport retrieval_report(const ScoreMatrix& text_to_image,
                                        const ScoreMatrix& image_to_text) {
  require(text_to_image.queries == text_to_image.gallery &&
              image_to_text.queries == text_to_image.queries &&
              image_to_text.gallery == text_to_image.gallery,
          "retrieval_report: expected matching square score matrices");
  const std::size_t n = text_to_image.queries;
  std::vector<std::size_t> truth(n);
  std::iota(truth.begin(), truth.end(), std::size_t{0});
  std::vector<std::size_t> ks{std::min<std::size_t>(1, n), std::min<std::size_t>(5, n),
                              std::min<std::size_t>(10, n)};
  const auto iq = recall_at_k(image_to_text, truth, ks);
  const auto tq = recall_at_k(text_to_image, truth, ks);
  RetrievalReport r;
  r.image_query_r1 = iq[0];
  r.image_query_r5 = iq[1];
  r.image_query_r10 = iq[2];
  r.text_query_r1 = tq[0];
  r.text_query_r5 = tq[1];
  r.text_query_r10 = tq[2];
  r.mr = mean_recall(r);
  r.queries = r.gallery = n;
  return r;
}

inline nlohmann::json to_json(const RetrievalReport& r) {
  return {{"image_query", {{"R@1", r.image_query_r1}, {"R@5", r.image_query_r5}, {"R@10", r.image_query_r10}}},
          {"text_query", {{"R@1", r.text_query_r1}, {"R@5", r.text_query_r5}, {"R@10", r.text_query_r10}}},
          {"mR", r.mr},
          {"queries", r.queries},
          {"gallery", r.gallery},
          {"rerank_top_r", r.rerank_top_r}};
}

inline RetrievalReport report_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  r.image_query_r1 = j.at("image_query").at("R@1");
  r.image_query_r5 = j.at("image_query").at("R@5");
  r.image_query_r10 = j.at("image_query").at("R@10");
  r.text_query_r1 = j.at("text_query").at("R@1");
  r.text_query_r5 = j.at("text_query").at("R@5");
  r.text_query_r10 = j.at("text_query").at("R@10");
  r.mr = j.at("mR");
  r.queries = j.value("queries", std::size_t{0});
  r.gallery = j.value("gallery", std::size_t{0});
  r.rerank_top_r = j.value("rerank_top_r", std::size_t{0});
  return r;
}

/// Aligned plain-text table.
inline std::string report_table(const RetrievalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "direction      R@1     R@5    R@10\n"
                "image query %6.2f  %6.2f  %6.2f\n"
                "text query  %6.2f  %6.2f  %6.2f\n"
                "mR          %6.2f\n",
                r.image_query_r1, r.image_query_r5, r.image_query_r10, r.text_query_r1,
                r.text_query_r5, r.text_query_r10, r.mr);
  return buf;
}

// ---------------------------------------------------------------------------
// Re-ranking

/// Re-score the top_r gallery items of each query with `match(q, g)` (a
/// probability in [0, 1]). Re-scored items are lifted above every other item
/// of the row; the rest keep their scores.
inline ScoreMatrix rerank(const ScoreMatrix& m, std::size_t top_r,
                          const std::function<std::vector<double>(std::size_t,
                                                                  std::span<const std::size_t>)>& match) {
  require(top_r <= m.gallery, "rerank: top_r ", top_r, " exceeds gallery of ", m.gallery);
  ScoreMatrix out = m;
  if (top_r == 0) return out;
  std::vector<std::size_t> order(m.gallery);
  for (std::size_t q = 0; q < m.queries; ++q) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_r), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return m(q, a) > m(q, b) || (m(q, a) == m(q, b) && a < b);
                      });
    const std::span<const std::size_t> cands(order.data(), top_r);
    const auto p = match(q, cands);
    require(p.size() == top_r, "rerank: matcher returned ", p.size(), " scores for ", top_r);
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < m.gallery; ++g) row_max = std::max(row_max, m(q, g));
    for (std::size_t i = 0; i < top_r; ++i) out(q, cands[i]) = row_max + 1.0 + p[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model-based evaluation

template <typename T>
struct CorpusEmbeddings {
  Tensor<T> z_v, z_t;          // N x d', unit rows
  SeqBatch<T> vision, text;    // encoder outputs, kept for re-ranking
};

/// Global embeddings (and encoder sequences) of every image and caption.
template <typename T>
CorpusEmbeddings<T> embed_corpus(const ParamStore<T>& ps, const ModelConfig& c,
                                 const std::vector<SceneRecord>& records, const Vocabulary& vocab,
                                 bool keep_sequences = true, std::size_t chunk = 64) {
  require(!records.empty(), "embed_corpus: no records");
  Tape<T> tape(false);
  std::vector<Tensor<T>> zv, zt, vrows, trows;
  CorpusEmbeddings<T> out;
  std::size_t voff = 0, toff = 0;
  for (std::size_t b = 0; b < records.size(); b += chunk) {
    const std::size_t e = std::min(records.size(), b + chunk);
    std::vector<const Image*> imgs;
    std::vector<TokenSeq> caps;
    for (std::size_t i = b; i < e; ++i) {
      imgs.push_back(&records[i].image);
      caps.push_back(vocab.tokenize(records[i].caption, kGlobalTextLen));
    }
    std::vector<const TokenSeq*> cap_ptrs;
    for (const auto& t : caps) cap_ptrs.push_back(&t);
    const SeqBatch<T> v = encode_images<T>(tape, ps, c, imgs);
    const SeqBatch<T> t = encode_texts<T>(tape, ps, c, cap_ptrs);
    zv.push_back(project(tape, ps, v.cls(tape), Modality::vision));
    zt.push_back(project(tape, ps, t.cls(tape), Modality::text));
    if (keep_sequences) {
      vrows.push_back(v.rows);
      trows.push_back(t.rows);
      for (const auto& s : v.seqs) out.vision.seqs.push_back({s.begin + voff, s.len});
      for (const auto& s : t.seqs) out.text.seqs.push_back({s.begin + toff, s.len});
      voff += v.rows.dim(0);
      toff += t.rows.dim(0);
    }
  }
  out.z_v = ops::concat_rows(tape, zv);
  out.z_t = ops::concat_rows(tape, zt);
  if (keep_sequences) {
    out.vision.rows = ops::concat_rows(tape, vrows);
    out.text.rows = ops::concat_rows(tape, trows);
  }
  return out;
}

/// Rows: queries from `q`, columns: gallery from `g`; cosine similarity of unit rows.
template <typename T>
ScoreMatrix similarity_matrix(const Tensor<T>& q, const Tensor<T>& g) {
  Tape<T> tape(false);
  const Tensor<T> s = ops::matmul_nt(tape, q, g);
  ScoreMatrix m(q.dim(0), g.dim(0));
  for (std::size_t i = 0; i < m.s.size(); ++i) m.s[i] = static_cast<double>(s[i]);
  return m;
}

/// Matched-probability of fused (image, caption) pairs.
template <typename T>
std::vector<double> match_probabilities(const ParamStore<T>& ps, const ModelConfig& c,
                                        const CorpusEmbeddings<T>& corpus,
                                        std::span<const FusePair> pairs) {
  Tape<T> tape(false);
  const SeqBatch<T> f = fuse<T>(tape, ps, c, corpus.vision, corpus.text, pairs);
  const Tensor<T> p = ops::softmax(tape, match_head(tape, ps, f.cls(tape)));
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = static_cast<double>(p[2 * i + 1]);
  return out;
}

/// Recall report for a record set, optionally re-ranking the top_r candidates
/// of every query with the matching head.
template <typename T>
RetrievalReport evaluate(const ParamStore<T>& ps, const ModelConfig& c,
                         const std::vector<SceneRecord>& records, const Vocabulary& vocab,
                         std::size_t top_r = 0) {
  const auto corpus = embed_corpus(ps, c, records, vocab, top_r > 0);
  ScoreMatrix t2i = similarity_matrix(corpus.z_t, corpus.z_v);
  ScoreMatrix i2t = t2i.transposed();
  top_r = std::min(top_r, records.size());
  if (top_r > 0) {
    t2i = rerank(t2i, top_r, [&](std::size_t q, std::span<const std::size_t> g) {
      std::vector<FusePair> pairs;
      for (std::size_t j : g) pairs.push_back({j, q});
      return match_probabilities(ps, c, corpus, pairs);
    });
    i2t = rerank(i2t, top_r, [&](std::size_t q, std::span<const std::size_t> g) {
      std::vector<FusePair> pairs;
      for (std::size_t j : g) pairs.push_back({q, j});
      return match_probabilities(ps, c, corpus, pairs);
    });
  }
  RetrievalReport r = retrieval_report(t2i, i2t);
  r.rerank_top_r = top_r;
  return r;
}

}  // namespace hccm
