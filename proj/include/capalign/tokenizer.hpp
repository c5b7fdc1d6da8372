#pragma once

// Word/punctuation tokenizer with a fixed context-length contract, and the
// exploratory length statistics computed over a caption corpus.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capalign/error.hpp"
#include "capalign/io.hpp"

namespace capalign::tokenizer {

inline constexpr int kDefaultContextLength = 77;

using TokenId = std::int32_t;

/// Dense token table. Ids 0..3 are start, end, pad and unk, in that order;
/// they are the first four lines of a vocabulary file.
class Vocabulary {
 public:
  static constexpr TokenId kStartId = 0;
  static constexpr TokenId kEndId = 1;
  static constexpr TokenId kPadId = 2;
  static constexpr TokenId kUnkId = 3;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `words` follow the four default specials.
  explicit Vocabulary(const std::vector<std::string>& words)
      : Vocabulary(with_specials(words), 0) {}

  /// `tokens` lists every entry in id order, specials first.
  static Vocabulary from_tokens(std::vector<std::string> tokens) { return Vocabulary(std::move(tokens), 0); }

  static Vocabulary load(const std::filesystem::path& path) {
    auto lines = io::read_lines(path);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return from_tokens(std::move(lines));
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  TokenId start_id() const { return kStartId; }
  TokenId end_id() const { return kEndId; }
  TokenId pad_id() const { return kPadId; }
  TokenId unk_id() const { return kUnkId; }
  std::size_t size() const { return tokens_.size(); }

  TokenId lookup(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view piece) const { return index_.count(std::string(piece)) > 0; }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

 private:
  Vocabulary(std::vector<std::string> tokens, int) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4) throw ParseError("vocabulary needs the four special tokens");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw ParseError("empty vocabulary entry at id " + std::to_string(i));
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw ParseError("duplicate vocabulary entry '" + tokens_[i] + "'");
      }
    }
  }

  static std::vector<std::string> with_specials(const std::vector<std::string>& words) {
    std::vector<std::string> tokens{"<|startoftext|>", "<|endoftext|>", "<|pad|>", "<|unk|>"};
    tokens.insert(tokens.end(), words.begin(), words.end());
    return tokens;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Exactly context_length ids: start, content, end, then pads.
struct TokenSequence {
  std::vector<TokenId> ids;
  int true_length = 2;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct LengthStats {
  double mean = 0.0;
  double std_dev = 0.0;
  double minimum = 0.0;
  double lower_quartile = 0.0;
  double median = 0.0;
  double upper_quartile = 0.0;
  double maximum = 0.0;
  double truncated_fraction = 0.0;
};

/// Byte range of one piece inside the source text.
struct Piece {
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
inline bool is_space(unsigned char c) { return c < 0x80 && std::isspace(c); }

/// Whitespace separates pieces; every ASCII punctuation character is a
/// piece of its own. Bytes >= 0x80 belong to words.
inline std::vector<Piece> split_pieces(std::string_view text) {
  std::vector<Piece> pieces;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_punct(c)) {
      pieces.push_back({i, i + 1});
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && !is_space(static_cast<unsigned char>(text[j])) &&
             !is_punct(static_cast<unsigned char>(text[j]))) {
        ++j;
      }
      pieces.push_back({i, j});
      i = j;
    }
  }
  return pieces;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  for (const auto& p : split_pieces(text)) {
    std::string w(text.substr(p.begin, p.end - p.begin));
    for (auto& ch : w) {
      if (static_cast<unsigned char>(ch) < 0x80) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    words.push_back(std::move(w));
  }
  return words;
}

inline std::size_t count_pieces(std::string_view text) { return split_pieces(text).size(); }

inline TokenSequence tokenize(std::string_view caption, const Vocabulary& vocab,
                              int context_length = kDefaultContextLength) {
  if (context_length < 3) throw std::invalid_argument("context_length must be >= 3");
  const auto words = split_words(caption);
  const auto capacity = static_cast<std::size_t>(context_length - 2);
  const auto content = std::min(words.size(), capacity);

  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(context_length), vocab.pad_id());
  seq.ids[0] = vocab.start_id();
  for (std::size_t i = 0; i < content; ++i) seq.ids[i + 1] = vocab.lookup(words[i]);
  seq.ids[content + 1] = vocab.end_id();
  seq.true_length = static_cast<int>(content + 2);
  return seq;
}

/// Value at nearest rank ceil(p * n) of an ascending sample.
inline double nearest_rank(const std::vector<int>& sorted, double p) {
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

/// Statistics over raw lengths. Standard deviation uses the n - 1 denominator
/// (0 for a single value).
inline LengthStats length_stats_from_lengths(std::vector<int> lengths, int context_length) {
  if (lengths.empty()) throw EmptyInput("no captions to summarize");
  std::sort(lengths.begin(), lengths.end());
  const double n = static_cast<double>(lengths.size());

  LengthStats st;
  double sum = 0.0;
  std::size_t truncated = 0;
  for (int len : lengths) {
    sum += len;
    if (len == context_length) ++truncated;
  }
  st.mean = sum / n;
  if (lengths.size() > 1) {
    double ss = 0.0;
    for (int len : lengths) ss += (len - st.mean) * (len - st.mean);
    st.std_dev = std::sqrt(ss / (n - 1.0));
  }
  st.minimum = lengths.front();
  st.maximum = lengths.back();
  st.lower_quartile = nearest_rank(lengths, 0.25);
  st.median = nearest_rank(lengths, 0.5);
  st.upper_quartile = nearest_rank(lengths, 0.75);
  st.truncated_fraction = static_cast<double>(truncated) / n;
  return st;
}

inline LengthStats length_stats(const std::vector<std::string>& captions, const Vocabulary& vocab,
                                int context_length = kDefaultContextLength) {
  if (captions.empty()) throw EmptyInput("no captions to summarize");
  std::vector<int> lengths;
  lengths.reserve(captions.size());
  for (const auto& c : captions) lengths.push_back(tokenize(c, vocab, context_length).true_length);
  return length_stats_from_lengths(std::move(lengths), context_length);
}

inline std::vector<std::pair<std::string, double>> stats_rows(const LengthStats& st) {
  return {{"Mean", st.mean},
          {"Standard Deviation", st.std_dev},
          {"Minimum", st.minimum},
          {"Lower Quartile", st.lower_quartile},
          {"Median", st.median},
          {"Upper Quartile", st.upper_quartile},
          {"Maximum", st.maximum},
          {"Truncated Fraction", st.truncated_fraction}};
}

inline std::string stats_to_csv(const LengthStats& st) {
  std::string out = "statistic,value\n";
  for (const auto& [name, value] : stats_rows(st)) out += name + "," + io::format_fixed(value, 3) + "\n";
  return out;
}

/// Vocabulary of every piece seen in `texts` at least `min_count` times,
/// ordered by descending frequency then lexicographically.
inline Vocabulary build_vocabulary(const std::vector<std::string>& texts, std::size_t min_count = 1) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) ++counts[std::move(w)];
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  const Vocabulary specials;
  for (auto& [w, n] : counts) {
    if (n >= min_count && !specials.contains(w)) entries.emplace_back(w, n);
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(entries.size());
  for (auto& [w, n] : entries) words.push_back(w);
  return Vocabulary(words);
}

}  // namespace capalign::tokenizer
