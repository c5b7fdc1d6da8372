#pragma once

// One function per pipeline stage. Each returns the process exit code:
//   0 success, 1 I/O or input-format failure, 2 empty or unusable input,
//   3 completion backend failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "capalign/config.hpp"
#include "capalign/corpus.hpp"
#include "capalign/error.hpp"
#include "capalign/http_backend.hpp"
#include "capalign/io.hpp"
#include "capalign/llm_align.hpp"
#include "capalign/tokenizer.hpp"
#include "capalign/two_tower.hpp"
#include "capalign/zeroshot_eval.hpp"

namespace capalign::pipeline {

enum ExitCode : int { kOk = 0, kIoFailure = 1, kEmptyInput = 2, kBackendFailure = 3 };

inline int run_guarded(std::ostream& err, const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const EmptyCorpus& e) {
    err << "error: " << e.what() << "\n";
    return kEmptyInput;
  } catch (const EmptyInput& e) {
    err << "error: " << e.what() << "\n";
    return kEmptyInput;
  } catch (const PadCollision& e) {
    err << "error: " << e.what() << "\n";
    return kEmptyInput;
  } catch (const DatasetTooSmall& e) {
    err << "error: " << e.what() << "\n";
    return kEmptyInput;
  } catch (const BackendUnavailable& e) {
    err << "error: " << e.what() << "\n";
    return kBackendFailure;
  } catch (const EmptyResponse& e) {
    err << "error: " << e.what() << "\n";
    return kBackendFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kIoFailure;
  }
}

inline void require_file(const fs::path& path, const char* key) {
  if (path.empty()) throw IoError(std::string("config: ") + key + " is not set");
  if (!fs::exists(path)) throw IoError(std::string(key) + ": no such file " + path.string());
}

namespace detail {

inline void print_table(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& rows,
                        const std::string& left, const std::string& right) {
  std::size_t width = left.size();
  for (const auto& r : rows) width = std::max(width, r.first.size());
  auto line = [&](const std::string& a, const std::string& b) {
    out << a << std::string(width - a.size() + 2, ' ') << b << "\n";
  };
  line(left, right);
  for (const auto& r : rows) line(r.first, r.second);
}

inline std::vector<std::string> caption_texts(const std::vector<llm::CaptionRecord>& records) {
  std::vector<std::string> texts;
  texts.reserve(records.size());
  for (const auto& r : records) texts.push_back(r.caption);
  return texts;
}

inline std::map<std::string, std::vector<double>> read_features(const fs::path& path) {
  std::map<std::string, std::vector<double>> features;
  std::size_t dim = 0;
  for (const auto& rec : io::read_jsonl(path)) {
    auto id = io::field<std::string>(rec, "image_id");
    auto f = io::field<std::vector<double>>(rec, "features");
    if (f.empty()) throw ParseError("image " + id + " has an empty feature vector");
    if (dim == 0) dim = f.size();
    if (f.size() != dim) throw ParseError("image " + id + " feature dimension differs from the first record");
    if (!features.emplace(id, std::move(f)).second) throw ParseError("duplicate image_id " + id + " in features");
  }
  return features;
}

}  // namespace detail

inline int cmd_extract_pairs(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    require_file(cfg.paths.spans, "paths.spans");
    if (!cfg.paths.exclusions.empty()) require_file(cfg.paths.exclusions, "paths.exclusions");
    const auto spans = corpus::read_spans(cfg.paths.spans);
    const auto exclusions =
        cfg.paths.exclusions.empty() ? std::vector<corpus::PageExclusionRule>{} : corpus::read_exclusions(cfg.paths.exclusions);
    const auto pairs = corpus::extract_pairs(spans, exclusions);
    const auto stats = corpus::corpus_stats(pairs);

    io::write_file(cfg.pairs_path(), corpus::pairs_to_jsonl(pairs));
    io::write_file(cfg.paths.output_dir / "corpus_stats.csv", corpus::stats_to_csv(stats));

    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& [doc, n] : stats.rows) rows.emplace_back(doc, std::to_string(n));
    rows.emplace_back("Total", std::to_string(stats.total));
    detail::print_table(out, rows, "Document", "Number of pairs");
  });
}

inline int cmd_token_stats(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    require_file(cfg.paths.vocab, "paths.vocab");
    require_file(cfg.paths.captions, "paths.captions");
    const auto vocab = tokenizer::Vocabulary::load(cfg.paths.vocab);
    const auto captions = detail::caption_texts(llm::read_captions(cfg.paths.captions));
    const auto stats = tokenizer::length_stats(captions, vocab, cfg.context_length);
    io::write_file(cfg.paths.output_dir / "token_stats.csv", tokenizer::stats_to_csv(stats));

    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& [name, value] : tokenizer::stats_rows(stats)) rows.emplace_back(name, io::format_fixed(value, 3));
    detail::print_table(out, rows, "Statistic", "Value");
  });
}

/// Constructs the backend named by expand.backend. This is the only place the
/// API credential is read.
inline std::unique_ptr<llm::CompletionBackend> make_backend(const ExpandSettings& settings) {
  if (settings.backend == "mock") return std::make_unique<llm::MockBackend>();
  return std::make_unique<llm::HttpBackend>(settings.backend, std::chrono::milliseconds(settings.timeout_ms));
}

inline int cmd_expand(const PipelineConfig& cfg, std::ostream& out, std::ostream& err,
                      std::size_t* backend_requests = nullptr) {
  return run_guarded(err, [&] {
    require_file(cfg.paths.captions, "paths.captions");
    const auto captions = llm::read_captions(cfg.paths.captions);
    auto backend = make_backend(cfg.expand);
    llm::ExpansionCache cache(cfg.cache_path());
    llm::CaptionExpander expander(*backend, cache,
                                  {cfg.expand.retries, std::chrono::milliseconds(cfg.expand.backoff_ms)},
                                  cfg.expand.prompt_template);
    std::vector<llm::ExpansionRequest> requests;
    requests.reserve(captions.size());
    for (const auto& c : captions) requests.push_back({c.caption, cfg.expand.max_new_tokens, cfg.rng_seed});

    std::vector<llm::ExpansionResult> results;
    try {
      results = expander.expand_all(requests, cfg.expand.concurrency);
    } catch (...) {
      if (backend_requests) *backend_requests = expander.request_count();
      throw;
    }
    if (backend_requests) *backend_requests = expander.request_count();
    io::write_file(cfg.expanded_path(), llm::expanded_to_jsonl(captions, results));
    out << "expanded " << results.size() << " captions with " << backend->name() << " ("
        << expander.request_count() << " backend requests)\n";
  });
}

inline int cmd_lm_dataset(const PipelineConfig& cfg, const std::string& format, std::ostream& out,
                          std::ostream& err) {
  return run_guarded(err, [&] {
    if (format != "records" && format != "concat") {
      throw std::invalid_argument("--format must be 'records' or 'concat', got '" + format + "'");
    }
    const auto pairs_path = cfg.pairs_path();
    require_file(pairs_path, "paths.pairs");
    const auto pairs = corpus::read_pairs(pairs_path);
    fs::path target;
    if (format == "records") {
      target = cfg.paths.output_dir / "lm_records.jsonl";
      io::write_file(target, llm::lm_records_to_jsonl(llm::make_lm_records(pairs)));
    } else {
      target = cfg.paths.output_dir / "lm_concat.txt";
      io::write_file(target, llm::concat_records_to_text(llm::make_concat_records(pairs, cfg.pad_literal)));
    }
    out << "wrote " << pairs.size() << " " << format << " lines to " << target.string() << "\n";
  });
}

/// Builds a vocabulary from the captions, any expanded captions, and the
/// concept prompts, and writes it to paths.vocab.
inline int cmd_vocab(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    if (cfg.paths.vocab.empty()) throw IoError("config: paths.vocab is not set");
    std::vector<std::string> texts;
    if (!cfg.paths.captions.empty()) {
      require_file(cfg.paths.captions, "paths.captions");
      texts = detail::caption_texts(llm::read_captions(cfg.paths.captions));
    }
    if (fs::exists(cfg.expanded_path())) {
      for (auto& t : detail::caption_texts(llm::read_captions(cfg.expanded_path(), true))) texts.push_back(std::move(t));
    }
    if (!cfg.paths.annotations.empty()) {
      require_file(cfg.paths.annotations, "paths.annotations");
      std::optional<std::vector<std::string>> sidecar;
      if (!cfg.paths.concepts.empty()) sidecar = zeroshot::read_concept_list(cfg.paths.concepts);
      for (const auto& c : zeroshot::read_annotations(cfg.paths.annotations, sidecar).concepts) {
        texts.push_back(zeroshot::concept_prompt(c));
      }
    }
    if (texts.empty()) throw EmptyInput("no text to build a vocabulary from");
    const auto vocab = tokenizer::build_vocabulary(texts);
    io::write_file(cfg.paths.vocab, vocab.to_text());
    out << "wrote " << vocab.size() << " tokens to " << cfg.paths.vocab.string() << "\n";
  });
}

inline std::vector<two_tower::Sample> load_training_set(const PipelineConfig& cfg, const tokenizer::Vocabulary& vocab) {
  const bool expanded = cfg.train_caption_source == "expanded";
  const auto captions_path = expanded ? cfg.expanded_path() : cfg.paths.captions;
  require_file(captions_path, expanded ? "paths.expanded" : "paths.captions");
  require_file(cfg.paths.features, "paths.features");
  const auto captions = llm::read_captions(captions_path, expanded);
  const auto features = detail::read_features(cfg.paths.features);
  std::vector<two_tower::Sample> samples;
  samples.reserve(captions.size());
  for (const auto& c : captions) {
    auto it = features.find(c.image_id);
    if (it == features.end()) throw ParseError("no features for image_id " + c.image_id);
    samples.push_back({it->second, tokenizer::tokenize(c.caption, vocab, cfg.context_length)});
  }
  return samples;
}

inline int cmd_train(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    require_file(cfg.paths.vocab, "paths.vocab");
    const auto vocab = tokenizer::Vocabulary::load(cfg.paths.vocab);
    const auto samples = load_training_set(cfg, vocab);
    if (samples.empty()) throw EmptyInput("training set is empty");
    auto model = two_tower::initialize(samples.front().image_features.size(), cfg.model.d_tok, cfg.model.d_emb,
                                       vocab.size(), cfg.rng_seed);
    const auto result = two_tower::train(std::move(model), samples, cfg.train);
    two_tower::save_checkpoint(result.model, cfg.checkpoint_path());
    io::write_file(cfg.paths.output_dir / "loss_log.csv", two_tower::loss_log_to_csv(result.log));
    for (const auto& e : result.log) {
      out << "epoch " << e.epoch << "  mean_loss " << io::format_fixed(e.mean_loss, 6) << "  lr "
          << io::format_double(e.lr_at_epoch_start) << "\n";
    }
    out << "checkpoint written to " << cfg.checkpoint_path().string() << "\n";
  });
}

inline int cmd_eval(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    require_file(cfg.checkpoint_path(), "paths.checkpoint");
    require_file(cfg.paths.vocab, "paths.vocab");
    require_file(cfg.paths.annotations, "paths.annotations");
    std::optional<std::vector<std::string>> sidecar;
    if (!cfg.paths.concepts.empty()) {
      require_file(cfg.paths.concepts, "paths.concepts");
      sidecar = zeroshot::read_concept_list(cfg.paths.concepts);
    }
    const auto model = two_tower::load_checkpoint(cfg.checkpoint_path());
    const auto vocab = tokenizer::Vocabulary::load(cfg.paths.vocab);
    if (vocab.size() != model.vocab_size()) {
      throw DimensionMismatch("vocabulary has " + std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                              std::to_string(model.vocab_size()));
    }
    const auto ann = zeroshot::read_annotations(cfg.paths.annotations, sidecar);
    const auto report = zeroshot::evaluate(model, ann, vocab, cfg.context_length);
    io::write_file(cfg.paths.output_dir / "report.csv", zeroshot::report_to_csv(report));

    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& r : report.rows) {
      rows.emplace_back(r.concept_name, std::to_string(r.n_true) + "  " + (r.auc ? io::format_fixed(*r.auc, 3) : "-"));
    }
    rows.emplace_back(zeroshot::kMeanRowLabel, report.mean_auc ? io::format_fixed(*report.mean_auc, 3) : "-");
    detail::print_table(out, rows, "Concept", "# True  AUC");
  });
}

}  // namespace capalign::pipeline
