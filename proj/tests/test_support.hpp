#pragma once

// Fixtures and independent oracles shared by the unit and acceptance suites.
// Nothing here calls into the code path it is used to check.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "capalign/io.hpp"
#include "capalign/tokenizer.hpp"
#include "capalign/two_tower.hpp"
#include "capalign/zeroshot_eval.hpp"

namespace capalign::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = fs::temp_directory_path() / ("capalign_" + tag + "_" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

// ---- AUC oracle: direct enumeration of (positive, negative) pairs ----

inline double brute_force_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  double credit = 0.0;
  double pairs = 0.0;
  for (std::size_t p = 0; p < scores.size(); ++p) {
    if (!labels[p]) continue;
    for (std::size_t n = 0; n < scores.size(); ++n) {
      if (labels[n]) continue;
      pairs += 1.0;
      if (scores[p] > scores[n]) credit += 1.0;
      else if (scores[p] == scores[n]) credit += 0.5;
    }
  }
  return credit / pairs;
}

// ---- gradient oracle: central finite differences of the loss ----

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t components = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). With step 1e-5 and an O(1)
/// loss the central difference carries roundoff near 1e-11, so components
/// below about 1e-7 cannot be resolved to 1e-4 relative. The floor of 1e-6
/// judges those components absolutely (1e-10 at tolerance 1e-4), ten times
/// above the oracle's own noise.
inline GradientCheck check_gradients(const two_tower::TwoTowerModel& model, const two_tower::Batch& batch,
                                     const two_tower::TwoTowerModel& analytic, double step = 1e-5,
                                     double floor = 1e-6) {
  GradientCheck out;
  auto probe = model;
  auto params = probe.parameters();
  auto grads = analytic.parameters();
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t k = 0; k < params[b].size(); ++k) {
      const double saved = params[b][k];
      params[b][k] = saved + step;
      const double up = two_tower::contrastive_loss(probe, batch).loss;
      params[b][k] = saved - step;
      const double down = two_tower::contrastive_loss(probe, batch).loss;
      params[b][k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grads[b][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.components;
    }
  }
  return out;
}

/// Random model and batch with small dimensions; log_temperature stays below
/// the clamp so the temperature gradient is live.
struct RandomInstance {
  two_tower::TwoTowerModel model;
  two_tower::Batch batch;
};

inline RandomInstance random_instance(std::mt19937_64& rng, std::size_t d_img, std::size_t d_tok, std::size_t d_emb,
                                      std::size_t n, std::size_t vocab_size = 7, int context_length = 6) {
  RandomInstance inst;
  inst.model = two_tower::initialize(d_img, d_tok, d_emb, vocab_size, rng());
  inst.model.log_temperature = uniform(rng, 0.0, 3.0);
  for (std::size_t i = 0; i < n; ++i) {
    two_tower::Vector x(d_img);
    for (auto& v : x) v = uniform(rng, -1.0, 1.0);
    inst.batch.image_features.push_back(std::move(x));

    tokenizer::TokenSequence seq;
    seq.ids.assign(static_cast<std::size_t>(context_length), tokenizer::Vocabulary::kPadId);
    seq.true_length = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(context_length - 1));
    seq.ids[0] = tokenizer::Vocabulary::kStartId;
    for (int p = 1; p + 1 < seq.true_length; ++p) {
      seq.ids[static_cast<std::size_t>(p)] = static_cast<tokenizer::TokenId>(4 + rng() % (vocab_size - 4));
    }
    seq.ids[static_cast<std::size_t>(seq.true_length - 1)] = tokenizer::Vocabulary::kEndId;
    inst.batch.token_sequences.push_back(std::move(seq));
  }
  return inst;
}

// ---- synthetic separable clusters ----

inline const std::vector<std::string>& cluster_names() {
  static const std::vector<std::string> names = {"plaque", "nodule", "scale", "ulcer"};
  return names;
}

struct ClusterData {
  std::vector<std::vector<double>> centers;
  std::vector<std::string> image_ids;
  std::vector<std::vector<double>> features;
  std::vector<std::size_t> cluster;
  std::vector<std::string> captions;
};

/// `per_cluster` images around each of four random centers in d_img
/// dimensions; captions name their cluster through a few templates.
inline ClusterData make_clusters(std::uint64_t seed, std::size_t per_cluster, std::size_t d_img = 8,
                                 double noise = 0.15, std::uint64_t center_seed = 1234) {
  ClusterData data;
  std::mt19937_64 center_rng(center_seed);
  for (std::size_t c = 0; c < cluster_names().size(); ++c) {
    std::vector<double> center(d_img);
    for (auto& v : center) v = uniform(center_rng, -1.0, 1.0);
    data.centers.push_back(std::move(center));
  }
  static const std::vector<std::string> templates = {"a lesion showing {}", "{} on the skin",
                                                     "close view of {}", "{} seen on the arm"};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < per_cluster; ++k) {
    for (std::size_t c = 0; c < cluster_names().size(); ++c) {
      std::vector<double> x = data.centers[c];
      for (auto& v : x) v += uniform(rng, -noise, noise);
      const auto& tmpl = templates[rng() % templates.size()];
      std::string caption = tmpl;
      caption.replace(caption.find("{}"), 2, cluster_names()[c]);
      data.image_ids.push_back("img_" + std::to_string(seed) + "_" + std::to_string(data.image_ids.size()));
      data.features.push_back(std::move(x));
      data.cluster.push_back(c);
      data.captions.push_back(std::move(caption));
    }
  }
  return data;
}

inline tokenizer::Vocabulary cluster_vocabulary(const ClusterData& data) {
  auto texts = data.captions;
  for (const auto& name : cluster_names()) texts.push_back(zeroshot::concept_prompt(name));
  return tokenizer::build_vocabulary(texts);
}

inline zeroshot::ConceptAnnotations cluster_annotations(const ClusterData& data) {
  zeroshot::ConceptAnnotations ann;
  ann.concepts = cluster_names();
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    std::vector<std::uint8_t> labels(ann.concepts.size(), 0);
    labels[data.cluster[i]] = 1;
    ann.images.push_back({data.image_ids[i], data.features[i], labels});
  }
  return ann;
}

// ---- file writers for pipeline fixtures ----

inline std::string captions_jsonl(const ClusterData& data) {
  std::string out;
  for (std::size_t i = 0; i < data.captions.size(); ++i) {
    io::ordered_json rec;
    rec["image_id"] = data.image_ids[i];
    rec["caption"] = data.captions[i];
    out += rec.dump() + "\n";
  }
  return out;
}

inline std::string features_jsonl(const ClusterData& data) {
  std::string out;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    io::ordered_json rec;
    rec["image_id"] = data.image_ids[i];
    rec["features"] = data.features[i];
    out += rec.dump() + "\n";
  }
  return out;
}

inline std::string annotations_jsonl(const zeroshot::ConceptAnnotations& ann) {
  io::ordered_json header;
  header["concepts"] = ann.concepts;
  std::string out = header.dump() + "\n";
  for (const auto& img : ann.images) {
    io::ordered_json rec;
    rec["image_id"] = img.image_id;
    rec["features"] = img.features;
    std::vector<int> labels(img.labels.begin(), img.labels.end());
    rec["labels"] = labels;
    out += rec.dump() + "\n";
  }
  return out;
}

/// Span records for one document: `sentences` single-font sentences spread
/// over pages, `n_spans` sentences per span.
inline std::string single_font_spans(const std::string& doc_id, int sentences, int per_page = 3) {
  std::string out;
  for (int s = 0; s < sentences; ++s) {
    io::ordered_json rec;
    rec["doc_id"] = doc_id;
    rec["page"] = 1 + s / per_page;
    rec["span_index"] = s % per_page;
    rec["text"] = "Sentence number " + std::to_string(s + 1) + " of " + doc_id + ".";
    rec["font_name"] = "Serif";
    rec["font_size"] = 10.0;
    out += rec.dump() + "\n";
  }
  return out;
}

}  // namespace capalign::testing
