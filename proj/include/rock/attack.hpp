#pragma once

// l-infinity attacks. Budgets (epsilon, alpha) are given in 1/255 pixel units
// and converted once on entry; images live in [0,1].

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rock/catalog.hpp"
#include "rock/judgment.hpp"
#include "rock/oracle.hpp"
#include "rock/tensor.hpp"

namespace rock {

enum class AttackVariant { untargeted, targeted, background, random, importance, pgd_ce, fgsm, mim, spsa, nes };

std::string to_string(AttackVariant v);
AttackVariant parse_variant(const std::string& name);
bool is_adaptive(AttackVariant v);

/// The five white-box attacks aimed at the part segmenter.
inline constexpr AttackVariant kAdaptiveVariants[] = {AttackVariant::untargeted, AttackVariant::targeted,
                                                      AttackVariant::background, AttackVariant::random,
                                                      AttackVariant::importance};

struct AttackConfig {
  AttackVariant variant = AttackVariant::untargeted;
  double epsilon = 8.0;
  double alpha = 1.0;
  int steps = 40;
  std::uint64_t seed = 0;
  double momentum = 1.0;
  double sigma = 0.001;
  int n_samples = 128;
  std::optional<std::string> target_label_source;
  bool random_start = false;
  /// Background divisor used by the importance surrogate's label maps.
  double bg_scale = 1.0;
};

void validate(const AttackConfig& cfg);
AttackConfig parse_attack_config(const nlohmann::json& doc);
nlohmann::json to_json(const AttackConfig& cfg);

struct AdversarialResult {
  Tensor x_adv;
  std::int64_t queries = 0;
  std::vector<double> per_step_loss;
};

/// Clamp x - x0 into [-eps/255, eps/255], then the result into [0,1].
Tensor pgd_project(const Tensor& x0, const Tensor& x, double epsilon);

/// Adversarial part labels for the modified-DAG family. Untargeted yields
/// nullopt; targeted returns `target_labels`; background is all zeros; random
/// draws each pixel uniformly from {0..K} minus its ground-truth label.
std::optional<LabelGrid> make_adv_labels(AttackVariant variant, const LabelGrid& gt_labels, int num_parts,
                                         std::uint64_t seed, const std::optional<LabelGrid>& target_labels = {});
std::optional<LabelGrid> make_adv_labels(AttackVariant variant, const LabelGrid& gt_labels, const PartCatalog& catalog,
                                         std::uint64_t seed, const std::optional<LabelGrid>& target_labels = {});

/// Weight map of the DAG objective: +1 on the adversarial channel and -1 on
/// the ground-truth channel at every pixel (only -1 when adv is absent).
Tensor dag_weight_map(const LabelGrid& gt_labels, const LabelGrid* adv_labels, int channels);

AdversarialResult modified_dag(const Tensor& x, const GradientOracle& oracle, const LabelGrid& gt_labels,
                               const std::optional<LabelGrid>& adv_labels, const AttackConfig& cfg);

/// Differentiable stand-in for the category score with masks and match
/// indicators frozen: Σ_r N_r·match_r·Σ V·M_r / Σ_r N_r.
struct ImportanceSurrogate {
  double value = 0.0;
  /// ∂value/∂logits, (K+1)×H×W.
  Tensor logit_weights;
};

ImportanceSurrogate importance_surrogate(const Tensor& logits, const PartCatalog& catalog, const LinkageRuleSet& rules,
                                         int category, double bg_scale = 1.0);

AdversarialResult importance_attack(const Tensor& x, const GradientOracle& oracle, const PartCatalog& catalog,
                                    const LinkageRuleSet& rules, int true_category, const AttackConfig& cfg);

AdversarialResult fgsm(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg);
AdversarialResult pgd_ce(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg);
AdversarialResult mim(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg);

/// Black-box objective to be minimised, e.g. S_true - max_{c != true} S_c.
using ScoreFn = std::function<double(const Tensor&)>;

struct GradientEstimate {
  Tensor gradient;
  std::int64_t queries = 0;
  /// Mean of all 2n probe values; tracks the objective near x without an
  /// extra query.
  double mean_score = 0.0;
};

/// Antithetic finite-difference estimate (1/2n)·Σ [f(x+σΔ) - f(x-σΔ)]/σ·Δ with
/// Δ Rademacher (SPSA) or standard Gaussian (NES), drawn from `stream_seed`.
GradientEstimate estimate_gradient(const ScoreFn& score, const Tensor& x, AttackVariant variant, double sigma,
                                   int n_samples, std::uint64_t stream_seed);

AdversarialResult spsa_attack(const Tensor& x, const ScoreFn& score, const AttackConfig& cfg);
AdversarialResult nes_attack(const Tensor& x, const ScoreFn& score, const AttackConfig& cfg);

/// Per-run summary written next to adversarial tensors.
struct AttackReport {
  AttackConfig config;
  std::int64_t queries = 0;
  double final_score = 0.0;
  bool success = false;
};

nlohmann::json to_json(const AttackReport& report);

/// Throws InvalidArgument unless ‖x_adv - x‖∞ ≤ eps/255 + 1e-9 and x_adv ∈ [0,1].
void check_budget(const Tensor& x, const Tensor& x_adv, double epsilon);

}  // namespace rock
