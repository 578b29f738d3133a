#pragma once

// Knowledge-based judgment over part response maps: per-category label maps,
// maximal connected components, linkage detection and weighted rule scores.

#include <map>
#include <optional>
#include <vector>

#include "rock/catalog.hpp"
#include "rock/tensor.hpp"

namespace rock {

/// (K+1)×H×W per-pixel distribution over background (channel 0) and parts.
class ResponseMap {
 public:
  ResponseMap() = default;

  /// Wraps probabilities; every pixel's channel sum must be 1 within `tolerance`.
  static ResponseMap from_probabilities(Tensor probabilities, double tolerance = 1e-5);
  /// Channel-wise softmax of a (K+1)×H×W logit tensor.
  static ResponseMap from_logits(const Tensor& logits);

  int channels() const noexcept { return static_cast<int>(data_.dim(0)); }
  int height() const noexcept { return static_cast<int>(data_.dim(1)); }
  int width() const noexcept { return static_cast<int>(data_.dim(2)); }

  double operator()(int k, int i, int j) const { return data_.at(k, i, j); }
  double background(int i, int j) const { return data_.at(0, i, j); }
  const Tensor& tensor() const noexcept { return data_; }

 private:
  explicit ResponseMap(Tensor t) : data_(std::move(t)) {}
  Tensor data_;
};

Tensor softmax_channels(const Tensor& logits);

struct PartLabelMap {
  int category = 0;
  LabelGrid labels;
};

struct MatchedRule {
  LinkageRule rule;
  double confidence = 0.0;
};

/// Per-rule evidence for one category: whether it matched and the union of
/// the two MCC masks.
struct RuleEvidence {
  LinkageRule rule;
  bool matched = false;
  Mask mask;
};

struct CategoryScore {
  double score = 0.0;
  std::vector<MatchedRule> matched;
};

struct ScoreReport {
  std::vector<double> scores;
  std::vector<std::vector<MatchedRule>> matched;
  int prediction = 0;
  std::vector<int> evaluated_categories;
  bool no_evidence = true;
};

struct JudgmentOptions {
  /// Categories scored after foreground ranking; nullopt scores all of them.
  std::optional<int> top_k;
  /// Background channel is divided by this before the label-map comparison.
  double bg_scale = 1.0;
};

void require_channels(const ResponseMap& response, const PartCatalog& catalog);

PartLabelMap compute_label_map(const ResponseMap& response, const PartCatalog& catalog, int category,
                               double bg_scale = 1.0);

/// Largest 4-connected component of {label == value}; ties go to the component
/// containing the row-major-first pixel. Empty mask when the label is absent.
Mask largest_component(const LabelGrid& labels, int value);

std::map<int, Mask> extract_mccs(const PartLabelMap& label_map, const PartCatalog& catalog);

/// True iff both masks are non-empty and some pixel of one is 4-adjacent to
/// some pixel of the other.
bool detect_linkage(const Mask& first, const Mask& second);

RealGrid max_response(const ResponseMap& response, const PartCatalog& catalog, int category);

double rule_confidence(const RealGrid& max_resp, const Mask& rule_mask);

std::vector<RuleEvidence> match_rules(const PartLabelMap& label_map, const PartCatalog& catalog,
                                      const LinkageRuleSet& rules);

CategoryScore score_category(const ResponseMap& response, const PartCatalog& catalog, const LinkageRuleSet& rules,
                             int category, double bg_scale = 1.0);

std::vector<int> foreground_rank(const ResponseMap& response, const PartCatalog& catalog, double bg_scale = 1.0);

ScoreReport classify(const ResponseMap& response, const PartCatalog& catalog, const LinkageRuleSet& rules,
                     const JudgmentOptions& options = {});

/// Smallest index attaining the maximum over `candidates`.
int argmax_over(const std::vector<double>& scores, const std::vector<int>& candidates);

// Ablated scorers.

/// Knowledge-free score: per category, the summed softmax confidence of its
/// part channels. With `exclude_background`, pixels whose overall argmax is the
/// background channel are skipped.
std::vector<double> confidence_sum_scores(const ResponseMap& response, const PartCatalog& catalog,
                                          bool exclude_background);

/// Prediction with the same tie-breaking as classify.
int predict_from_scores(const std::vector<double>& scores);

}  // namespace rock
