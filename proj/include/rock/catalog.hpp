#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "rock/tensor.hpp"

namespace rock {

/// Categories and their disjoint part sets over global part ids 1..K.
/// Id 0 is reserved for background.
struct PartCatalog {
  std::vector<std::string> category_names;
  /// part_sets[c] is the sorted list of global part ids owned by category c.
  std::vector<std::vector<int>> part_sets;
  /// part_names[k - 1] names global part k.
  std::vector<std::string> part_names;
  int num_parts = 0;

  int num_categories() const noexcept { return static_cast<int>(part_sets.size()); }
  /// Category owning a part id, or -1 for background / unknown ids.
  int category_of(int part) const;
  bool owns(int category, int part) const;
  int part_id(const std::string& name) const;

  friend bool operator==(const PartCatalog&, const PartCatalog&) = default;
};

/// Builds a catalog with generated part names ("c0p1", ...); sizes[c] = K_c.
PartCatalog make_catalog(const std::vector<int>& parts_per_category);

void validate_catalog(const PartCatalog& catalog);

/// Stable 64-bit digest of the catalog structure, hex encoded.
std::string catalog_hash(const PartCatalog& catalog);

/// Unordered part pair {a, b}, stored with a < b, plus its occurrence count N_r.
struct LinkageRule {
  int a = 0;
  int b = 0;
  std::int64_t weight = 0;

  friend bool operator==(const LinkageRule&, const LinkageRule&) = default;
};

struct LinkageRuleSet {
  /// rules[c] sorted by (a, b).
  std::vector<std::vector<LinkageRule>> rules;

  std::int64_t total_weight(int category) const;
  friend bool operator==(const LinkageRuleSet&, const LinkageRuleSet&) = default;
};

LinkageRule make_rule(int p1, int p2, std::int64_t weight = 0);

/// Checks rule membership and pair uniqueness; sorts each category's rules.
void normalize_ruleset(const PartCatalog& catalog, LinkageRuleSet& rules);

/// Copy with every weight set to `weight`.
LinkageRuleSet with_uniform_weights(const LinkageRuleSet& rules, std::int64_t weight = 1);

struct GroundTruthLabels {
  int category = 0;
  LabelGrid part_labels;
};

void check_labels(const PartCatalog& catalog, const GroundTruthLabels& labels);

/// Counts, per rule, the training images of the rule's category in which the
/// two parts' MCCs on the ground-truth grid are linked.
LinkageRuleSet estimate_rule_weights(const PartCatalog& catalog, const LinkageRuleSet& skeleton,
                                     std::span<const GroundTruthLabels> training);

/// Rule-config JSON: {categories: [{name, parts: [..]}], rules: [{category, a, b, weight}]}.
struct RuleConfig {
  PartCatalog catalog;
  LinkageRuleSet rules;
};

RuleConfig parse_ruleset(const nlohmann::json& doc);
nlohmann::json ruleset_to_json(const PartCatalog& catalog, const LinkageRuleSet& rules);

RuleConfig load_ruleset(const std::filesystem::path& path);
void save_ruleset(const PartCatalog& catalog, const LinkageRuleSet& rules, const std::filesystem::path& path);

}  // namespace rock
