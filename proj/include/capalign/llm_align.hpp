#pragma once

// Fine-tuning datasets for the two LLM paths (prompt/completion records and
// pad-joined text), and caption expansion through a completion backend with
// retries, a persistent response cache and a seeded offline mock.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include "capalign/corpus.hpp"
#include "capalign/error.hpp"
#include "capalign/io.hpp"
#include "capalign/tokenizer.hpp"

namespace capalign::llm {

using corpus::PromptCompletionPair;

inline constexpr int kDefaultMaxNewTokens = 512;
inline constexpr const char* kDefaultPadLiteral = "<|endoftext|>";
inline constexpr const char* kDefaultPromptTemplate =
    "Rewrite the following dermatology image caption as a fuller description of what the image shows, "
    "in plain language.\nCaption: {caption}\nDescription:";

// ---- fine-tuning datasets ----

struct LmRecord {
  std::string prompt;
  std::string completion;
};

struct ConcatRecord {
  std::string text;
};

inline std::vector<LmRecord> make_lm_records(const std::vector<PromptCompletionPair>& pairs) {
  std::vector<LmRecord> records;
  records.reserve(pairs.size());
  for (const auto& p : pairs) records.push_back({p.prompt, p.completion});
  return records;
}

/// {"prompt": " <prompt>", "completion": "<completion>"}; the prompt gains one leading space.
inline std::string lm_record_to_json(const LmRecord& r) {
  io::ordered_json rec;
  rec["prompt"] = " " + r.prompt;
  rec["completion"] = r.completion;
  return rec.dump();
}

inline std::string lm_records_to_jsonl(const std::vector<LmRecord>& records) {
  std::string out;
  for (const auto& r : records) out += lm_record_to_json(r) + "\n";
  return out;
}

inline std::vector<ConcatRecord> make_concat_records(const std::vector<PromptCompletionPair>& pairs,
                                                     const std::string& pad_literal) {
  if (pad_literal.empty()) throw PadCollision("pad literal must be non-empty");
  std::vector<ConcatRecord> records;
  records.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.prompt.find(pad_literal) != std::string::npos || p.completion.find(pad_literal) != std::string::npos) {
      throw PadCollision("pad literal '" + pad_literal + "' occurs inside a pair from " + p.doc_id);
    }
    records.push_back({p.prompt + pad_literal + p.completion});
  }
  return records;
}

/// One record per line; line breaks inside a record become spaces.
inline std::string concat_records_to_text(const std::vector<ConcatRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    std::string line = r.text;
    std::replace(line.begin(), line.end(), '\n', ' ');
    std::replace(line.begin(), line.end(), '\r', ' ');
    out += line + "\n";
  }
  return out;
}

// ---- backends ----

struct CompletionRequest {
  std::string prompt;  // the caption after prompt templating
  std::string caption;
  int max_new_tokens = kDefaultMaxNewTokens;
  std::uint64_t seed = 0;
};

/// Raised by a backend for a failed attempt that may succeed on retry.
class TransientBackendError : public Error {
 public:
  using Error::Error;
};

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual std::string name() const = 0;
  /// Returns generated text only (without the caption). Throws
  /// TransientBackendError for retryable failures.
  virtual std::string complete(const CompletionRequest& request) = 0;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Offline backend: seeded sampling of sentences from a bundled bank of
/// dermatology phrases. The output depends only on (caption, seed).
class MockBackend : public CompletionBackend {
 public:
  std::string name() const override { return "mock"; }

  std::string complete(const CompletionRequest& request) override {
    std::mt19937_64 rng(detail::fnv1a(request.caption) ^ (request.seed * 0x9E3779B97F4A7C15ULL));
    const auto& bank = phrase_bank();
    const std::size_t count = 3 + rng() % 4;
    std::string out;
    for (std::size_t k = 0; k < count; ++k) {
      if (k) out += ' ';
      out += bank[rng() % bank.size()];
    }
    return out;
  }

  static const std::vector<std::string>& phrase_bank() {
    static const std::vector<std::string> bank = {
        "The lesion appears as a raised, well-demarcated plaque with an erythematous base.",
        "Fine white scale covers much of the surface.",
        "The border is irregular and the color varies from light brown to black.",
        "Several small papules cluster around the central area.",
        "There is a shallow erosion with a yellow crust at its margin.",
        "The surrounding skin shows mild erythema and swelling.",
        "A firm, dome-shaped nodule is visible beneath the skin surface.",
        "Scattered vesicles filled with clear fluid appear along the edge.",
        "The patch is flat, hypopigmented and sharply defined.",
        "Telangiectatic vessels can be seen across the translucent surface.",
        "A central ulcer with a raised, rolled border is present.",
        "The skin is thickened with accentuated markings, consistent with lichenification.",
        "Purple discoloration suggests bleeding into the skin.",
        "The growth is exophytic with a warty, papillomatous surface.",
        "Excoriations from scratching are seen over the affected area.",
        "An atrophic scar with a shiny surface lies next to the lesion.",
        "The area is dry and cracked, with small fissures.",
        "Multiple comedones are present on the surrounding skin.",
        "The lesion is pedunculated, attached to the skin by a narrow stalk.",
        "A central umbilication gives the papule a dimpled appearance.",
        "This pattern is commonly seen in inflammatory skin conditions.",
        "Such findings often prompt a biopsy to confirm the diagnosis.",
        "The appearance may change over weeks as the lesion evolves.",
        "Patients often report itching or tenderness at the site."};
    return bank;
  }
};

// ---- cache ----

struct CacheKey {
  std::string backend;
  std::string caption;
  int max_new_tokens = 0;
  std::uint64_t seed = 0;

  friend auto operator<=>(const CacheKey&, const CacheKey&) = default;
};

/// Append-only JSONL file of request/response records. Reads happen once at
/// construction; later appends are serialized and flushed per record.
class ExpansionCache {
 public:
  ExpansionCache() = default;  // in-memory only

  explicit ExpansionCache(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(*path_)) {
      for (const auto& rec : io::read_jsonl(*path_)) {
        CacheKey key{io::field<std::string>(rec, "backend"), io::field<std::string>(rec, "caption"),
                     io::field<int>(rec, "max_new_tokens"), io::field<std::uint64_t>(rec, "seed")};
        entries_.insert_or_assign(std::move(key), io::field<std::string>(rec, "expanded"));
      }
    }
  }

  std::optional<std::string> find(const CacheKey& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const CacheKey& key, const std::string& expanded) {
    std::lock_guard lock(mutex_);
    entries_.insert_or_assign(key, expanded);
    if (!path_) return;
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    std::ofstream out(*path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to cache " + path_->string());
    io::ordered_json rec;
    rec["backend"] = key.backend;
    rec["caption"] = key.caption;
    rec["max_new_tokens"] = key.max_new_tokens;
    rec["seed"] = key.seed;
    rec["expanded"] = expanded;
    out << rec.dump() << '\n';
    out.flush();
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mutex_;
  std::map<CacheKey, std::string> entries_;
};

// ---- expansion ----

struct ExpansionRequest {
  std::string caption;
  int max_new_tokens = kDefaultMaxNewTokens;
  std::uint64_t seed = 0;
};

struct ExpansionResult {
  std::string original;
  std::string expanded;
  std::string backend_name;
  bool cached = false;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
};

/// Keeps the first `max_tokens` tokenizer pieces of `text`, cutting at the
/// end of the last kept piece.
inline std::string truncate_to_pieces(const std::string& text, int max_tokens) {
  const auto pieces = tokenizer::split_pieces(text);
  if (pieces.size() <= static_cast<std::size_t>(max_tokens)) return std::string(corpus::detail::trim(text));
  return std::string(corpus::detail::trim(text.substr(0, pieces[static_cast<std::size_t>(max_tokens) - 1].end)));
}

inline std::string apply_template(std::string_view tmpl, std::string_view caption) {
  std::string out(tmpl);
  const std::string_view slot = "{caption}";
  auto pos = out.find(slot);
  if (pos == std::string::npos) return out + "\n" + std::string(caption);
  out.replace(pos, slot.size(), caption);
  return out;
}

class CaptionExpander {
 public:
  CaptionExpander(CompletionBackend& backend, ExpansionCache& cache, RetryPolicy retry = {},
                  std::string prompt_template = kDefaultPromptTemplate)
      : backend_(backend), cache_(cache), retry_(retry), template_(std::move(prompt_template)) {
    if (retry_.max_attempts < 1) throw std::invalid_argument("retry policy needs at least one attempt");
  }

  /// expanded = original + " " + generated text cut to max_new_tokens pieces.
  ExpansionResult expand(const ExpansionRequest& req) {
    if (corpus::detail::trim(req.caption).empty()) throw EmptyInput("caption is empty");
    if (req.max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
    const CacheKey key{backend_.name(), req.caption, req.max_new_tokens, req.seed};
    if (auto hit = cache_.find(key)) return {req.caption, *hit, key.backend, true};

    const CompletionRequest creq{apply_template(template_, req.caption), req.caption, req.max_new_tokens, req.seed};
    std::string generated;
    auto backoff = retry_.initial_backoff;
    for (int attempt = 1;; ++attempt) {
      ++requests_;
      try {
        generated = backend_.complete(creq);
        break;
      } catch (const TransientBackendError& e) {
        if (attempt >= retry_.max_attempts) {
          throw BackendUnavailable(backend_.name() + " failed after " + std::to_string(attempt) +
                                   " attempts: " + e.what());
        }
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
    const auto added = truncate_to_pieces(generated, req.max_new_tokens);
    if (added.empty()) throw EmptyResponse(backend_.name() + " returned no text for caption: " + req.caption);
    ExpansionResult result{req.caption, std::string(corpus::detail::trim(req.caption)) + " " + added,
                           key.backend, false};
    cache_.put(key, result.expanded);
    return result;
  }

  /// Expands every request with up to `concurrency` in flight. Results follow
  /// input order. The first failure stops new work and is rethrown after
  /// in-flight requests finish; successes stay cached.
  std::vector<ExpansionResult> expand_all(const std::vector<ExpansionRequest>& requests, int concurrency = 4) {
    std::vector<std::optional<ExpansionResult>> slots(requests.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&] {
      for (;;) {
        if (failed.load()) return;
        const auto k = next.fetch_add(1);
        if (k >= requests.size()) return;
        try {
          slots[k] = expand(requests[k]);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
        }
      }
    };
    const auto n_threads = static_cast<std::size_t>(std::clamp(concurrency, 1, 64));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < std::min(n_threads, requests.size()); ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);

    std::vector<ExpansionResult> results;
    results.reserve(slots.size());
    for (auto& s : slots) results.push_back(std::move(*s));
    return results;
  }

  /// Backend attempts made so far (cache hits make none).
  std::size_t request_count() const { return requests_.load(); }

 private:
  CompletionBackend& backend_;
  ExpansionCache& cache_;
  RetryPolicy retry_;
  std::string template_;
  std::atomic<std::size_t> requests_{0};
};

/// One-shot form of CaptionExpander::expand over an in-memory cache.
inline ExpansionResult expand_caption(const ExpansionRequest& req, CompletionBackend& backend,
                                      ExpansionCache& cache, RetryPolicy retry = {}) {
  CaptionExpander expander(backend, cache, retry);
  return expander.expand(req);
}

// ---- caption files ----

struct CaptionRecord {
  std::string image_id;
  std::string caption;
};

/// JSONL {"image_id": ..., "caption": ...}. Records from an expanded-captions
/// file are accepted too; their "expanded" text is used when `prefer_expanded`.
inline std::vector<CaptionRecord> read_captions(const std::filesystem::path& path, bool prefer_expanded = false) {
  std::vector<CaptionRecord> out;
  for (const auto& rec : io::read_jsonl(path)) {
    CaptionRecord c{io::field<std::string>(rec, "image_id"), {}};
    if (prefer_expanded && rec.contains("expanded")) {
      c.caption = io::field<std::string>(rec, "expanded");
    } else if (rec.contains("caption")) {
      c.caption = io::field<std::string>(rec, "caption");
    } else {
      c.caption = io::field<std::string>(rec, "original");
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::string expanded_to_jsonl(const std::vector<CaptionRecord>& inputs,
                                     const std::vector<ExpansionResult>& results) {
  std::string out;
  for (std::size_t k = 0; k < results.size(); ++k) {
    io::ordered_json rec;
    rec["image_id"] = inputs[k].image_id;
    rec["original"] = results[k].original;
    rec["expanded"] = results[k].expanded;
    out += rec.dump() + "\n";
  }
  return out;
}

}  // namespace capalign::llm
