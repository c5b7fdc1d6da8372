#pragma once

// Main-text extraction and prompt-completion pair construction from
// pre-extracted document span records.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "capalign/error.hpp"
#include "capalign/io.hpp"

namespace capalign::corpus {

/// One extracted text run with its font metadata.
struct DocumentSpan {
  std::string doc_id;
  int page = 1;
  int span_index = 0;
  std::string text;
  std::string font_name;
  double font_size = 0.0;
};

struct PageRange {
  int first = 1;
  int last = 1;

  friend bool operator==(const PageRange&, const PageRange&) = default;
};

/// Pages of one document removed before any counting (glossaries,
/// acknowledgments, reference lists).
struct PageExclusionRule {
  std::string doc_id;
  std::vector<PageRange> page_ranges;
};

struct PromptCompletionPair {
  std::string doc_id;
  std::string prompt;
  std::string completion;

  friend bool operator==(const PromptCompletionPair&, const PromptCompletionPair&) = default;
};

struct CorpusStats {
  std::vector<std::pair<std::string, std::size_t>> rows;  // doc_id order of first appearance
  std::size_t total = 0;
};

/// Sentences per prompt-completion window: one prompt plus four completion sentences.
inline constexpr std::size_t kWindowSize = 5;

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(first, last - first + 1);
}

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace detail

/// Sorts and merges the ranges of a rule. Throws ParseError on an inverted
/// or non-positive range.
inline PageExclusionRule normalize(PageExclusionRule rule) {
  for (const auto& r : rule.page_ranges) {
    if (r.first < 1 || r.first > r.last) {
      throw ParseError("invalid page range [" + std::to_string(r.first) + ", " +
                       std::to_string(r.last) + "] for " + rule.doc_id);
    }
  }
  auto& ranges = rule.page_ranges;
  std::sort(ranges.begin(), ranges.end(),
            [](const PageRange& a, const PageRange& b) { return a.first < b.first; });
  std::vector<PageRange> merged;
  for (const auto& r : ranges) {
    if (!merged.empty() && r.first <= merged.back().last + 1) {
      merged.back().last = std::max(merged.back().last, r.last);
    } else {
      merged.push_back(r);
    }
  }
  ranges = std::move(merged);
  return rule;
}

inline bool is_excluded(const DocumentSpan& span, const std::vector<PageExclusionRule>& exclusions) {
  for (const auto& rule : exclusions) {
    if (rule.doc_id != span.doc_id) continue;
    for (const auto& r : rule.page_ranges) {
      if (span.page >= r.first && span.page <= r.last) return true;
    }
  }
  return false;
}

/// Keeps the spans set in the modal (font_name, font_size) pair, counted over
/// spans that survive page exclusion. Ties go to the larger size, then to the
/// lexicographically smaller font name. Input order is preserved.
inline std::vector<DocumentSpan> filter_dominant_font(const std::vector<DocumentSpan>& spans,
                                                      const std::vector<PageExclusionRule>& exclusions) {
  std::vector<DocumentSpan> kept;
  kept.reserve(spans.size());
  for (const auto& s : spans) {
    if (!is_excluded(s, exclusions)) kept.push_back(s);
  }
  if (kept.empty()) throw EmptyCorpus();

  std::map<std::pair<std::string, double>, std::size_t> counts;
  for (const auto& s : kept) ++counts[{s.font_name, s.font_size}];

  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    const auto& [font, size] = it->first;
    const auto& [best_font, best_size] = best->first;
    if (it->second != best->second) {
      if (it->second > best->second) best = it;
    } else if (size != best_size) {
      if (size > best_size) best = it;
    } else if (font < best_font) {
      best = it;
    }
  }

  const auto& [font, size] = best->first;
  std::erase_if(kept, [&](const DocumentSpan& s) { return s.font_name != font || s.font_size != size; });
  return kept;
}

/// Splits at '.', '!' or '?' followed by whitespace or end of text. The
/// terminator stays with its sentence.
inline std::vector<std::string> segment_sentences(std::string_view text) {
  std::vector<std::string> sentences;
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    auto piece = detail::trim(text.substr(start, end - start));
    if (!piece.empty()) sentences.emplace_back(piece);
    start = end;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    if (i + 1 == text.size() || detail::is_space(text[i + 1])) flush(i + 1);
  }
  if (start < text.size()) flush(text.size());
  return sentences;
}

/// Disjoint windows of five sentences; a trailing partial window is dropped.
inline std::vector<PromptCompletionPair> build_pairs(const std::vector<std::string>& sentences,
                                                     const std::string& doc_id) {
  std::vector<PromptCompletionPair> pairs;
  for (std::size_t w = 0; w + kWindowSize <= sentences.size(); w += kWindowSize) {
    PromptCompletionPair pair{doc_id, sentences[w], {}};
    for (std::size_t k = 1; k < kWindowSize; ++k) {
      if (k > 1) pair.completion += ' ';
      pair.completion += sentences[w + k];
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

inline CorpusStats corpus_stats(const std::vector<PromptCompletionPair>& pairs) {
  CorpusStats stats;
  std::map<std::string, std::size_t> index;
  for (const auto& p : pairs) {
    auto [it, inserted] = index.try_emplace(p.doc_id, stats.rows.size());
    if (inserted) stats.rows.emplace_back(p.doc_id, 0);
    ++stats.rows[it->second].second;
    ++stats.total;
  }
  return stats;
}

/// Joins one document's spans in (page, span_index) order into a single
/// whitespace-normalized string. Sentences may cross page boundaries.
inline std::string document_text(std::vector<DocumentSpan> spans) {
  std::sort(spans.begin(), spans.end(), [](const DocumentSpan& a, const DocumentSpan& b) {
    return std::tie(a.page, a.span_index) < std::tie(b.page, b.span_index);
  });
  std::string out;
  bool pending_space = false;
  for (const auto& s : spans) {
    for (char c : s.text) {
      if (detail::is_space(c)) {
        pending_space = true;
        continue;
      }
      if (pending_space && !out.empty()) out += ' ';
      pending_space = false;
      out += c;
    }
    pending_space = true;
  }
  return out;
}

/// Full per-document extraction: exclusion, dominant-font filtering, text
/// assembly, segmentation and windowing. Documents are processed
/// independently in order of first appearance; a document with no surviving
/// spans contributes nothing. Throws EmptyCorpus when no document survives.
inline std::vector<PromptCompletionPair> extract_pairs(const std::vector<DocumentSpan>& spans,
                                                       const std::vector<PageExclusionRule>& exclusions) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<DocumentSpan>> by_doc;
  for (const auto& s : spans) {
    auto [it, inserted] = by_doc.try_emplace(s.doc_id);
    if (inserted) order.push_back(s.doc_id);
    it->second.push_back(s);
  }
  std::vector<PromptCompletionPair> pairs;
  bool any = false;
  for (const auto& doc : order) {
    std::vector<DocumentSpan> main_text;
    try {
      main_text = filter_dominant_font(by_doc[doc], exclusions);
    } catch (const EmptyCorpus&) {
      continue;
    }
    any = true;
    auto doc_pairs = build_pairs(segment_sentences(document_text(std::move(main_text))), doc);
    pairs.insert(pairs.end(), std::make_move_iterator(doc_pairs.begin()),
                 std::make_move_iterator(doc_pairs.end()));
  }
  if (!any) throw EmptyCorpus();
  return pairs;
}

// ---- file formats ----

inline std::vector<DocumentSpan> read_spans(const std::filesystem::path& path) {
  std::vector<DocumentSpan> spans;
  std::set<std::tuple<std::string, int, int>> seen;
  for (const auto& rec : io::read_jsonl(path)) {
    DocumentSpan s{io::field<std::string>(rec, "doc_id"), io::field<int>(rec, "page"),
                   io::field<int>(rec, "span_index"),     io::field<std::string>(rec, "text"),
                   io::field<std::string>(rec, "font_name"), io::field<double>(rec, "font_size")};
    const std::string where = s.doc_id + " page " + std::to_string(s.page) + " span " +
                              std::to_string(s.span_index);
    if (s.page < 1) throw ParseError(where + ": page must be >= 1");
    if (s.span_index < 0) throw ParseError(where + ": span_index must be >= 0");
    if (!(s.font_size > 0.0)) throw ParseError(where + ": font_size must be > 0");
    if (detail::trim(s.text).empty()) throw ParseError(where + ": empty text");
    if (!seen.emplace(s.doc_id, s.page, s.span_index).second) {
      throw ParseError(where + ": duplicate (doc_id, page, span_index)");
    }
    spans.push_back(std::move(s));
  }
  return spans;
}

// One record per line: {"doc_id": "...", "page_ranges": [[first, last], ...]}
inline std::vector<PageExclusionRule> read_exclusions(const std::filesystem::path& path) {
  std::vector<PageExclusionRule> rules;
  for (const auto& rec : io::read_jsonl(path)) {
    PageExclusionRule rule{io::field<std::string>(rec, "doc_id"), {}};
    for (const auto& r : io::field<io::json>(rec, "page_ranges")) {
      if (!r.is_array() || r.size() != 2 || !r[0].is_number_integer() || !r[1].is_number_integer()) {
        throw ParseError("page range must be [first, last] for " + rule.doc_id);
      }
      rule.page_ranges.push_back({r[0].get<int>(), r[1].get<int>()});
    }
    rules.push_back(normalize(std::move(rule)));
  }
  return rules;
}

inline std::string pairs_to_jsonl(const std::vector<PromptCompletionPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    io::ordered_json rec;
    rec["doc_id"] = p.doc_id;
    rec["prompt"] = p.prompt;
    rec["completion"] = p.completion;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<PromptCompletionPair> read_pairs(const std::filesystem::path& path) {
  std::vector<PromptCompletionPair> pairs;
  for (const auto& rec : io::read_jsonl(path)) {
    pairs.push_back({io::field<std::string>(rec, "doc_id"), io::field<std::string>(rec, "prompt"),
                     io::field<std::string>(rec, "completion")});
  }
  return pairs;
}

inline std::string stats_to_csv(const CorpusStats& stats) {
  std::string out = "doc_id,pair_count\n";
  for (const auto& [doc, n] : stats.rows) out += io::csv_escape(doc) + "," + std::to_string(n) + "\n";
  out += "Total," + std::to_string(stats.total) + "\n";
  return out;
}

}  // namespace capalign::corpus
