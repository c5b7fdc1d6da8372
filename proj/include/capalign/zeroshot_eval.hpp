#pragma once

// Zero-shot concept classification: "This is {concept}" prompts scored by
// cosine similarity against image embeddings, per-concept ROC AUC, and a
// per-concept report with positive counts and the mean AUC.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "capalign/error.hpp"
#include "capalign/io.hpp"
#include "capalign/tokenizer.hpp"
#include "capalign/two_tower.hpp"

namespace capalign::zeroshot {

using two_tower::Matrix;
using two_tower::TwoTowerModel;

struct AnnotatedImage {
  std::string image_id;
  std::vector<double> features;
  std::vector<std::uint8_t> labels;  // one 0/1 entry per concept
};

struct ConceptAnnotations {
  std::vector<std::string> concepts;
  std::vector<AnnotatedImage> images;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

struct ConceptRow {
  std::string concept_name;
  std::size_t n_true = 0;
  std::optional<double> auc;  // absent when the concept has no positives or no negatives
};

struct ConceptEvalReport {
  std::vector<ConceptRow> rows;
  std::optional<double> mean_auc;  // absent when no concept is evaluable
};

inline std::string concept_prompt(const std::string& concept_name) {
  if (concept_name.empty()) throw EmptyConcept();
  return "This is " + concept_name;
}

/// Throws ParseError on inconsistent label lengths or duplicate image ids.
inline void validate(const ConceptAnnotations& ann) {
  std::set<std::string> ids;
  for (const auto& img : ann.images) {
    if (img.labels.size() != ann.concepts.size()) {
      throw ParseError("image " + img.image_id + " has " + std::to_string(img.labels.size()) + " labels, expected " +
                       std::to_string(ann.concepts.size()));
    }
    if (!ids.insert(img.image_id).second) throw ParseError("duplicate image_id " + img.image_id);
  }
}

/// scores(i, c): cosine similarity of image i and the prompt for concept c.
inline Matrix score_images(const TwoTowerModel& model, const ConceptAnnotations& ann,
                           const tokenizer::Vocabulary& vocab, int context_length = tokenizer::kDefaultContextLength) {
  std::vector<two_tower::Vector> text;
  text.reserve(ann.concepts.size());
  for (const auto& c : ann.concepts) {
    text.push_back(two_tower::embed_text(model, tokenizer::tokenize(concept_prompt(c), vocab, context_length)));
  }
  Matrix scores(ann.images.size(), ann.concepts.size());
  for (std::size_t i = 0; i < ann.images.size(); ++i) {
    const auto img = two_tower::embed_image(model, ann.images[i].features);
    for (std::size_t c = 0; c < text.size(); ++c) {
      scores(i, c) = std::clamp(two_tower::detail::dot(img, text[c]), -1.0, 1.0);
    }
  }
  return scores;
}

/// Tie-aware ROC AUC (Mann-Whitney with half credit for ties) plus the ROC
/// curve from a threshold sweep over distinct scores.
inline RocCurve roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ShapeMismatch("scores and labels differ in length");
  std::uint64_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::uint64_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DegenerateLabels();

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0});
  // Twice the Mann-Whitney U, kept integral so the result is independent of input order.
  std::uint64_t twice_u = 0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    std::uint64_t pos = 0, neg = 0;
    std::size_t end = k;
    while (end < order.size() && scores[order[end]] == scores[order[k]]) {
      (labels[order[end]] ? pos : neg) += 1;
      ++end;
    }
    // positives in this group beat every negative below it and tie with neg in it
    twice_u += pos * (2 * (n_neg - fp - neg) + neg);
    tp += pos;
    fp += neg;
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                            static_cast<double>(tp) / static_cast<double>(n_pos)});
    k = end;
  }
  curve.auc = static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
  return curve;
}

inline double trapezoid_area(const std::vector<RocPoint>& points) {
  double area = 0.0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    area += (points[k].fpr - points[k - 1].fpr) * (points[k].tpr + points[k - 1].tpr) * 0.5;
  }
  return area;
}

inline ConceptEvalReport evaluate(const TwoTowerModel& model, const ConceptAnnotations& ann,
                                  const tokenizer::Vocabulary& vocab,
                                  int context_length = tokenizer::kDefaultContextLength) {
  validate(ann);
  const auto scores = score_images(model, ann, vocab, context_length);
  ConceptEvalReport report;
  double sum = 0.0;
  std::size_t evaluable = 0;
  for (std::size_t c = 0; c < ann.concepts.size(); ++c) {
    std::vector<double> column(ann.images.size());
    std::vector<std::uint8_t> labels(ann.images.size());
    ConceptRow row{ann.concepts[c], 0, std::nullopt};
    for (std::size_t i = 0; i < ann.images.size(); ++i) {
      column[i] = scores(i, c);
      labels[i] = ann.images[i].labels[c];
      row.n_true += labels[i] ? 1 : 0;
    }
    try {
      row.auc = roc_auc(column, labels).auc;
      sum += *row.auc;
      ++evaluable;
    } catch (const DegenerateLabels&) {
    }
    report.rows.push_back(std::move(row));
  }
  if (evaluable > 0) report.mean_auc = sum / static_cast<double>(evaluable);
  return report;
}

inline constexpr const char* kMeanRowLabel = "Mean AUC";

/// concept,n_true,auc rows in concept order, then a mean row with an empty
/// n_true cell. Absent AUCs are empty cells.
inline std::string report_to_csv(const ConceptEvalReport& report) {
  std::string out = "concept,n_true,auc\n";
  for (const auto& row : report.rows) {
    out += io::csv_escape(row.concept_name) + "," + std::to_string(row.n_true) + ",";
    if (row.auc) out += io::format_fixed(*row.auc, 6);
    out += "\n";
  }
  out += std::string(kMeanRowLabel) + ",,";
  if (report.mean_auc) out += io::format_fixed(*report.mean_auc, 6);
  out += "\n";
  return out;
}

// ---- annotations file ----
// JSONL. The first record may be a header {"concepts": [...]}; every other
// record is {"image_id": "...", "features": [...], "labels": [0, 1, ...]}.
// A concept list passed in explicitly (sidecar file) takes the header's place.

inline std::vector<std::string> read_concept_list(const std::filesystem::path& path) {
  std::vector<std::string> concepts;
  for (const auto& line : io::read_lines(path)) {
    if (!io::is_blank(line)) concepts.push_back(line);
  }
  return concepts;
}

inline ConceptAnnotations read_annotations(const std::filesystem::path& path,
                                           std::optional<std::vector<std::string>> concepts = std::nullopt) {
  ConceptAnnotations ann;
  bool have_concepts = concepts.has_value();
  if (concepts) ann.concepts = std::move(*concepts);
  for (const auto& rec : io::read_jsonl(path)) {
    if (rec.contains("concepts")) {
      if (!ann.images.empty()) throw ParseError("concept header must precede image records");
      if (!have_concepts) ann.concepts = io::field<std::vector<std::string>>(rec, "concepts");
      have_concepts = true;
      continue;
    }
    AnnotatedImage img{io::field<std::string>(rec, "image_id"), io::field<std::vector<double>>(rec, "features"), {}};
    for (const auto& l : io::field<io::json>(rec, "labels")) {
      if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1)) {
        throw ParseError("labels must be 0 or 1 for image " + img.image_id);
      }
      img.labels.push_back(static_cast<std::uint8_t>(l.get<int>()));
    }
    ann.images.push_back(std::move(img));
  }
  if (!have_concepts) throw ParseError("annotations carry no concept list");
  for (const auto& c : ann.concepts) {
    if (c.empty()) throw EmptyConcept();
  }
  validate(ann);
  return ann;
}

}  // namespace capalign::zeroshot
