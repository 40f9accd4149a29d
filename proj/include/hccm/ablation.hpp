#pragma once

// The eight-row component grid and its consolidated table.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "hccm/eval.hpp"
#include "hccm/train.hpp"
#include "json.hpp"

namespace hccm {

/// Rows of the component grid as (mc, md, rg_itc, rg_itm) codes, baseline first.
inline const std::array<std::string, 8>& ablation_grid() {
  static const std::array<std::string, 8> g{"0000", "1000", "1100", "0010",
                                            "0011", "1110", "1101", "1111"};
  return g;
}

/// Seed of repetition k; shared by every row so rows are compared on equal
/// initializations and batch orders.
inline std::uint64_t ablation_seed(std::uint64_t base, std::size_t k) {
  return derive_seed(base, "ablation", k);
}

/// One trained grid cell. `test`/`heldout` rank by embedding similarity
/// alone; the `_rerank` reports add matching-head re-ranking of the top
/// rerank_top_r candidates (absent when that depth is 0).
struct CellResult {
  std::string code;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  RetrievalReport test, heldout;
  std::optional<RetrievalReport> test_rerank, heldout_rerank;
  double train_seconds = 0;
};

inline nlohmann::json to_json(const CellResult& c) {
  nlohmann::json j{{"code", c.code},          {"seed_index", c.seed_index}, {"seed", c.seed},
                   {"test", to_json(c.test)}, {"heldout", to_json(c.heldout)},
                   {"train_seconds", c.train_seconds}};
  if (c.test_rerank) j["test_rerank"] = to_json(*c.test_rerank);
  if (c.heldout_rerank) j["heldout_rerank"] = to_json(*c.heldout_rerank);
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  CellResult c;
  c.code = j.at("code");
  c.seed_index = j.at("seed_index");
  c.seed = j.at("seed");
  c.test = report_from_json(j.at("test"));
  c.heldout = report_from_json(j.at("heldout"));
  c.train_seconds = j.value("train_seconds", 0.0);
  if (j.contains("test_rerank")) c.test_rerank = report_from_json(j.at("test_rerank"));
  if (j.contains("heldout_rerank")) c.heldout_rerank = report_from_json(j.at("heldout_rerank"));
  return c;
}

/// Element-wise mean of reports.
inline RetrievalReport mean_report(const std::vector<RetrievalReport>& rs) {
  require(!rs.empty(), "mean_report: no reports");
  RetrievalReport m;
  const double n = double(rs.size());
  for (const auto& r : rs) {
    m.image_query_r1 += r.image_query_r1 / n;
    m.image_query_r5 += r.image_query_r5 / n;
    m.image_query_r10 += r.image_query_r10 / n;
    m.text_query_r1 += r.text_query_r1 / n;
    m.text_query_r5 += r.text_query_r5 / n;
    m.text_query_r10 += r.text_query_r10 / n;
  }
  m.mr = mean_recall(m);
  m.queries = rs.front().queries;
  m.gallery = rs.front().gallery;
  m.rerank_top_r = rs.front().rerank_top_r;
  return m;
}

struct AblationRow {
  std::string code;
  std::size_t seeds = 0;
  RetrievalReport test, heldout;
  std::optional<RetrievalReport> test_rerank, heldout_rerank;  // when every cell has them
  double train_seconds = 0;                                      // summed over seeds
};

inline std::vector<AblationRow> consolidate(const std::vector<CellResult>& cells) {
  std::vector<AblationRow> rows;
  for (const auto& code : ablation_grid()) {
    std::vector<RetrievalReport> t, h, tr, hr;
    double secs = 0;
    for (const auto& c : cells)
      if (c.code == code) {
        t.push_back(c.test);
        h.push_back(c.heldout);
        if (c.test_rerank && c.heldout_rerank) {
          tr.push_back(*c.test_rerank);
          hr.push_back(*c.heldout_rerank);
        }
        secs += c.train_seconds;
      }
    if (t.empty()) continue;
    AblationRow row{code, t.size(), mean_report(t), mean_report(h), std::nullopt, std::nullopt, secs};
    if (tr.size() == t.size()) {
      row.test_rerank = mean_report(tr);
      row.heldout_rerank = mean_report(hr);
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string component_marks(const std::string& code) {
  std::string s;
  for (char ch : code) s += ch == '1' ? "  x  " : "  .  ";
  return s;
}

namespace detail {

inline std::string ablation_block(const std::vector<AblationRow>& rows, bool reranked) {
  std::string out =
      "  MC   MD  RGC  RGM  seeds | img R@1  R@5   R@10 | txt R@1  R@5   R@10 |  mR    | heldout mR\n";
  char buf[256];
  for (const auto& r : rows) {
    const RetrievalReport& t = reranked ? *r.test_rerank : r.test;
    const RetrievalReport& h = reranked ? *r.heldout_rerank : r.heldout;
    std::snprintf(buf, sizeof buf, "%s %3zu   | %6.2f %6.2f %6.2f | %6.2f %6.2f %6.2f | %6.2f | %6.2f\n",
                  component_marks(r.code).c_str(), r.seeds, t.image_query_r1, t.image_query_r5,
                  t.image_query_r10, t.text_query_r1, t.text_query_r5, t.text_query_r10, t.mr, h.mr);
    out += buf;
  }
  return out;
}

}  // namespace detail

/// Aligned tables (components, test recalls for both query directions, test
/// mR, heldout mR): embedding ranking, then re-ranked when available.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "embedding ranking (test split)\n" + detail::ablation_block(rows, false);
  const bool reranked = !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) {
    return r.test_rerank.has_value();
  });
  if (reranked)
    out += "\nmatching-head re-ranking of the top " + std::to_string(rows.front().test_rerank->rerank_top_r) +
           " (test split)\n" + detail::ablation_block(rows, true);
  return out;
}

inline nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rows) {
    a.push_back({{"code", r.code},
                 {"mc", r.code[0] == '1'},
                 {"md", r.code[1] == '1'},
                 {"rg_itc", r.code[2] == '1'},
                 {"rg_itm", r.code[3] == '1'},
                 {"seeds", r.seeds},
                 {"test", to_json(r.test)},
                 {"heldout", to_json(r.heldout)},
                 {"train_seconds", r.train_seconds}});
    if (r.test_rerank) {
      a.back()["test_rerank"] = to_json(*r.test_rerank);
      a.back()["heldout_rerank"] = to_json(*r.heldout_rerank);
    }
  }
  return a;
}

}  // namespace hccm
