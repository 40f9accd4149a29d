#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hccm/error.hpp"

namespace hccm {

inline constexpr std::int32_t kClsId = 0;
inline constexpr std::int32_t kPadId = 1;
inline constexpr std::int32_t kUnkId = 2;

inline constexpr std::size_t kGlobalTextLen = 32;
inline constexpr std::size_t kRegionTextLen = 16;

/// Token ids padded to a fixed length; mask marks real tokens (including [CLS]).
struct TokenSeq {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  std::size_t length() const { return ids.size(); }
  std::size_t valid_length() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
  bool operator==(const TokenSeq&) const = default;
};

/// Lowercase and split on anything that is not an ASCII letter or digit.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Line-numbered vocabulary; ids 0, 1, 2 are [CLS], [PAD], [UNK].
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(tokens_.size() >= 3 && tokens_[0] == "[CLS]" && tokens_[1] == "[PAD]" &&
                tokens_[2] == "[UNK]",
            "vocabulary: ids 0..2 must be [CLS], [PAD], [UNK]");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const bool fresh = index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second;
      require(fresh, "vocabulary: duplicate token '", tokens_[i], "' at line ", i + 1);
    }
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require<IoError>(static_cast<bool>(in), "cannot open vocabulary ", path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    return Vocabulary(std::move(tokens));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    require<IoError>(static_cast<bool>(out), "cannot write vocabulary ", path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  std::int32_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// [CLS] + words, truncated or padded to max_len.
  TokenSeq tokenize(std::string_view text, std::size_t max_len) const {
    require(max_len >= 2, "tokenize: max_len must be at least 2");
    const auto words = split_words(text);
    require(!words.empty(), "tokenize: empty text after normalization");
    TokenSeq seq;
    seq.ids.assign(max_len, kPadId);
    seq.mask.assign(max_len, 0);
    seq.ids[0] = kClsId;
    seq.mask[0] = 1;
    for (std::size_t i = 0; i < words.size() && i + 1 < max_len; ++i) {
      seq.ids[i + 1] = id(words[i]);
      seq.mask[i + 1] = 1;
    }
    return seq;
  }

  /// Space-joined words of the real tokens, without [CLS] and [PAD].
  std::string detokenize(const TokenSeq& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      if (!seq.mask[i] || seq.ids[i] == kClsId || seq.ids[i] == kPadId) continue;
      if (!out.empty()) out += ' ';
      out += token(seq.ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace hccm
