#pragma once

// Robustness evaluation grid: (models × attacks × ε) → accuracy table.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rock/attack.hpp"
#include "rock/catalog.hpp"
#include "rock/judgment.hpp"
#include "rock/model.hpp"
#include "rock/sample.hpp"

namespace rock {

enum class ModelKind { rock, row, ablation_woK, ablation_woW, ablation_woP };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct EvalConfig {
  std::vector<ModelKind> models{ModelKind::rock, ModelKind::row};
  /// Empty means benign accuracy only.
  std::vector<AttackVariant> attacks;
  std::vector<double> epsilons{8.0};
  int steps = 40;
  /// Step size in /255 units; defaults to ε/8.
  std::optional<double> alpha;
  double momentum = 1.0;
  double sigma = 0.001;
  int n_samples = 128;
  /// Adds a worst-case row per part-based model: the minimum accuracy over
  /// the five adaptive variants.
  bool worst_case = false;
  JudgmentOptions judgment;
  /// Images used for white-box attacks and benign accuracy (0 = all).
  std::size_t max_images = 0;
  /// Images used for query-based attacks (0 = all).
  std::size_t max_query_images = 0;
  std::uint64_t seed = 0;
};

EvalConfig parse_eval_config(const nlohmann::json& doc);

struct EvalRow {
  std::string model;
  /// "none" for benign, a variant name, or "worst-case".
  std::string attack;
  double epsilon = 0.0;
  /// Scoring option, e.g. "all-pixels" / "foreground" for the knowledge-free ablation.
  std::string option;
  int correct = 0;
  int total = 0;
  bool lowest_of_adaptive = false;

  double accuracy() const { return total > 0 ? 100.0 * correct / total : 0.0; }
};

struct EvalReport {
  std::vector<EvalRow> rows;
  nlohmann::json metadata = nlohmann::json::object();

  /// First row matching (model, attack, ε, option); nullptr when absent.
  const EvalRow* find(const std::string& model, const std::string& attack, double epsilon,
                      const std::string& option = "") const;
};

struct EvalModels {
  PartCatalog catalog;
  LinkageRuleSet rules;
  const SegModel* segmenter = nullptr;
  const RowModel* baseline = nullptr;
  /// Object-level segmenter (C+1 channels) for the part-free ablation.
  const SegModel* object_segmenter = nullptr;
};

/// Evaluates `samples`; `target_pool` supplies other images' part labels for
/// the targeted variant (defaults to `samples`).
EvalReport run_eval(const EvalModels& models, std::span<const Sample> samples, const EvalConfig& cfg,
                    std::span<const Sample> target_pool = {});

nlohmann::json to_json(const EvalReport& report);
/// Aligned-column text rendering; accuracies to one decimal.
std::string to_table(const EvalReport& report);

/// Predicted category under ROCK's judgment, or -1 when there is no evidence.
int rock_predict(const SegModel& segmenter, const PartCatalog& catalog, const LinkageRuleSet& rules,
                 const JudgmentOptions& options, const Tensor& x);

/// S_true - max_{c != true} S_c under ROCK's judgment.
double rock_margin(const SegModel& segmenter, const PartCatalog& catalog, const LinkageRuleSet& rules,
                   const JudgmentOptions& options, const Tensor& x, int true_category);

}  // namespace rock
