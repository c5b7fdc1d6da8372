#pragma once

// Pipeline configuration: a flat, line-oriented file of `section.key = value`
// entries. Blank lines and lines starting with '#' are ignored. Relative
// paths resolve against the directory holding the config file.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>

#include "capalign/error.hpp"
#include "capalign/io.hpp"
#include "capalign/llm_align.hpp"
#include "capalign/tokenizer.hpp"
#include "capalign/two_tower.hpp"

namespace capalign {

namespace fs = std::filesystem;

struct PathSettings {
  fs::path spans;
  fs::path exclusions;   // optional
  fs::path vocab;
  fs::path captions;
  fs::path features;
  fs::path annotations;
  fs::path concepts;     // optional sidecar concept list
  fs::path pairs;        // default: <output_dir>/pairs.jsonl
  fs::path expanded;     // default: <output_dir>/expanded.jsonl
  fs::path checkpoint;   // default: <output_dir>/model.ckpt
  fs::path output_dir = "out";
};

struct ExpandSettings {
  std::string backend = "mock";  // "mock" or an http:// endpoint URL
  int max_new_tokens = llm::kDefaultMaxNewTokens;
  int concurrency = 4;
  int retries = 3;
  long backoff_ms = 200;
  long timeout_ms = 60000;
  std::string prompt_template = llm::kDefaultPromptTemplate;
  fs::path cache;  // default: <output_dir>/expand_cache.jsonl
};

struct ModelSettings {
  std::size_t d_tok = 32;
  std::size_t d_emb = 16;
};

struct PipelineConfig {
  PathSettings paths;
  int context_length = tokenizer::kDefaultContextLength;
  ExpandSettings expand;
  std::string pad_literal = llm::kDefaultPadLiteral;
  two_tower::TrainConfig train;
  std::string train_caption_source = "caption";  // or "expanded"
  ModelSettings model;
  std::uint64_t rng_seed = 0;

  fs::path pairs_path() const { return paths.pairs.empty() ? paths.output_dir / "pairs.jsonl" : paths.pairs; }
  fs::path expanded_path() const {
    return paths.expanded.empty() ? paths.output_dir / "expanded.jsonl" : paths.expanded;
  }
  fs::path checkpoint_path() const {
    return paths.checkpoint.empty() ? paths.output_dir / "model.ckpt" : paths.checkpoint;
  }
  fs::path cache_path() const {
    return expand.cache.empty() ? paths.output_dir / "expand_cache.jsonl" : expand.cache;
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) { return std::string(corpus::detail::trim(s)); }

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ParseError("config: " + key + " expects an integer, got '" + value + "'");
  }
  return out;
}

inline double parse_number(const std::string& key, const std::string& value) {
  try {
    return io::parse_double(value);
  } catch (const ParseError&) {
    throw ParseError("config: " + key + " expects a number, got '" + value + "'");
  }
}

}  // namespace config_detail

inline void validate(const PipelineConfig& cfg) {
  if (cfg.context_length < 3) throw ParseError("config: tokenizer.context_length must be >= 3");
  if (cfg.expand.max_new_tokens < 1) throw ParseError("config: expand.max_new_tokens must be >= 1");
  if (cfg.expand.concurrency < 1) throw ParseError("config: expand.concurrency must be >= 1");
  if (cfg.expand.retries < 1) throw ParseError("config: expand.retries must be >= 1");
  if (cfg.pad_literal.empty()) throw ParseError("config: lm.pad_literal must be non-empty");
  if (cfg.train_caption_source != "caption" && cfg.train_caption_source != "expanded") {
    throw ParseError("config: train.caption_source must be 'caption' or 'expanded'");
  }
  if (cfg.model.d_tok < 1 || cfg.model.d_emb < 1) throw ParseError("config: model dimensions must be >= 1");
  try {
    two_tower::validate(cfg.train);
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
}

inline PipelineConfig parse_config(const std::string& text, const fs::path& base_dir = {}) {
  using namespace config_detail;
  PipelineConfig cfg;
  auto path_setter = [&](fs::path& target) {
    return [&target, &base_dir](const std::string&, const std::string& v) {
      fs::path p(v);
      target = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
  };
  auto int_setter = [](auto& target) {
    return [&target](const std::string& k, const std::string& v) {
      target = parse_integer<std::remove_reference_t<decltype(target)>>(k, v);
    };
  };
  auto double_setter = [](double& target) {
    return [&target](const std::string& k, const std::string& v) { target = parse_number(k, v); };
  };
  auto string_setter = [](std::string& target) {
    return [&target](const std::string&, const std::string& v) { target = v; };
  };

  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"paths.spans", path_setter(cfg.paths.spans)},
      {"paths.exclusions", path_setter(cfg.paths.exclusions)},
      {"paths.vocab", path_setter(cfg.paths.vocab)},
      {"paths.captions", path_setter(cfg.paths.captions)},
      {"paths.features", path_setter(cfg.paths.features)},
      {"paths.annotations", path_setter(cfg.paths.annotations)},
      {"paths.concepts", path_setter(cfg.paths.concepts)},
      {"paths.pairs", path_setter(cfg.paths.pairs)},
      {"paths.expanded", path_setter(cfg.paths.expanded)},
      {"paths.checkpoint", path_setter(cfg.paths.checkpoint)},
      {"paths.output_dir", path_setter(cfg.paths.output_dir)},
      {"tokenizer.context_length", int_setter(cfg.context_length)},
      {"expand.backend", string_setter(cfg.expand.backend)},
      {"expand.max_new_tokens", int_setter(cfg.expand.max_new_tokens)},
      {"expand.concurrency", int_setter(cfg.expand.concurrency)},
      {"expand.retries", int_setter(cfg.expand.retries)},
      {"expand.backoff_ms", int_setter(cfg.expand.backoff_ms)},
      {"expand.timeout_ms", int_setter(cfg.expand.timeout_ms)},
      {"expand.prompt_template", string_setter(cfg.expand.prompt_template)},
      {"expand.cache", path_setter(cfg.expand.cache)},
      {"lm.pad_literal", string_setter(cfg.pad_literal)},
      {"train.batch_size", int_setter(cfg.train.batch_size)},
      {"train.learning_rate", double_setter(cfg.train.learning_rate)},
      {"train.adam_beta1", double_setter(cfg.train.adam_beta1)},
      {"train.adam_beta2", double_setter(cfg.train.adam_beta2)},
      {"train.adam_epsilon", double_setter(cfg.train.adam_epsilon)},
      {"train.eta_min", double_setter(cfg.train.scheduler.eta_min)},
      {"train.t0", int_setter(cfg.train.scheduler.t0)},
      {"train.t_mult", int_setter(cfg.train.scheduler.t_mult)},
      {"train.epochs", int_setter(cfg.train.epochs)},
      {"train.caption_source", string_setter(cfg.train_caption_source)},
      {"model.d_tok", int_setter(cfg.model.d_tok)},
      {"model.d_emb", int_setter(cfg.model.d_emb)},
      {"rng_seed", int_setter(cfg.rng_seed)},
  };

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(std::string_view(stripped).substr(0, eq));
    const auto value = trim(std::string_view(stripped).substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ParseError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    it->second(key, value);
  }
  // \n in the template value stands for a line break
  for (std::size_t pos = 0; (pos = cfg.expand.prompt_template.find("\\n", pos)) != std::string::npos;) {
    cfg.expand.prompt_template.replace(pos, 2, "\n");
  }
  cfg.train.rng_seed = cfg.rng_seed;
  validate(cfg);
  return cfg;
}

inline void override_seed(PipelineConfig& cfg, std::uint64_t seed) {
  cfg.rng_seed = seed;
  cfg.train.rng_seed = seed;
}

inline PipelineConfig load_config(const fs::path& path) {
  return parse_config(io::read_file(path), path.parent_path());
}

}  // namespace capalign
