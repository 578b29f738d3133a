#include "rock/catalog.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "rock/judgment.hpp"
#include "rock/util.hpp"

namespace rock {

using nlohmann::json;

int PartCatalog::category_of(int part) const {
  for (int c = 0; c < num_categories(); ++c) {
    if (std::binary_search(part_sets[c].begin(), part_sets[c].end(), part)) return c;
  }
  return -1;
}

bool PartCatalog::owns(int category, int part) const {
  if (category < 0 || category >= num_categories()) return false;
  const auto& s = part_sets[category];
  return std::binary_search(s.begin(), s.end(), part);
}

int PartCatalog::part_id(const std::string& name) const {
  auto it = std::find(part_names.begin(), part_names.end(), name);
  return it == part_names.end() ? -1 : static_cast<int>(it - part_names.begin()) + 1;
}

PartCatalog make_catalog(const std::vector<int>& parts_per_category) {
  PartCatalog cat;
  int next = 1;
  for (std::size_t c = 0; c < parts_per_category.size(); ++c) {
    cat.category_names.push_back("c" + std::to_string(c));
    std::vector<int> set;
    for (int p = 0; p < parts_per_category[c]; ++p) {
      set.push_back(next);
      cat.part_names.push_back("c" + std::to_string(c) + "p" + std::to_string(p + 1));
      ++next;
    }
    cat.part_sets.push_back(std::move(set));
  }
  cat.num_parts = next - 1;
  return cat;
}

void validate_catalog(const PartCatalog& catalog) {
  const int C = catalog.num_categories();
  if (C <= 0) fail(ErrorKind::InvalidCatalog, "catalog has no categories");
  if (static_cast<int>(catalog.category_names.size()) != C) {
    fail(ErrorKind::InvalidCatalog, "category_names and part_sets differ in length");
  }
  std::set<std::string> names(catalog.category_names.begin(), catalog.category_names.end());
  if (static_cast<int>(names.size()) != C) fail(ErrorKind::InvalidCatalog, "duplicate category name");
  if (catalog.num_parts <= 0) fail(ErrorKind::InvalidCatalog, "num_parts must be positive");

  std::vector<int> owner(static_cast<std::size_t>(catalog.num_parts) + 1, -1);
  for (int c = 0; c < C; ++c) {
    const auto& s = catalog.part_sets[c];
    if (s.empty()) fail(ErrorKind::EmptyPartSet, "category '" + catalog.category_names[c] + "' has no parts");
    if (!std::is_sorted(s.begin(), s.end())) {
      fail(ErrorKind::InvalidCatalog, "part set of '" + catalog.category_names[c] + "' is not sorted");
    }
    for (int p : s) {
      if (p <= 0 || p > catalog.num_parts) {
        fail(ErrorKind::GapInPartIds, "part id " + std::to_string(p) + " outside 1.." + std::to_string(catalog.num_parts));
      }
      if (owner[p] != -1) {
        fail(ErrorKind::OverlappingPartSets, "part id " + std::to_string(p) + " appears in '" +
                                                 catalog.category_names[owner[p]] + "' and '" +
                                                 catalog.category_names[c] + "'");
      }
      owner[p] = c;
    }
  }
  for (int p = 1; p <= catalog.num_parts; ++p) {
    if (owner[p] == -1) fail(ErrorKind::GapInPartIds, "part id " + std::to_string(p) + " belongs to no category");
  }
  if (!catalog.part_names.empty() && static_cast<int>(catalog.part_names.size()) != catalog.num_parts) {
    fail(ErrorKind::InvalidCatalog, "part_names must have num_parts entries");
  }
}

std::string catalog_hash(const PartCatalog& catalog) {
  std::ostringstream canon;
  for (int c = 0; c < catalog.num_categories(); ++c) {
    canon << catalog.category_names[c] << ':';
    for (int p : catalog.part_sets[c]) {
      canon << p << '=' << (catalog.part_names.empty() ? std::string() : catalog.part_names[p - 1]) << ',';
    }
    canon << ';';
  }
  std::ostringstream hex;
  hex << std::hex;
  hex.width(16);
  hex.fill('0');
  hex << fnv1a(canon.str());
  return hex.str();
}

std::int64_t LinkageRuleSet::total_weight(int category) const {
  std::int64_t total = 0;
  for (const auto& r : rules.at(category)) total += r.weight;
  return total;
}

LinkageRule make_rule(int p1, int p2, std::int64_t weight) {
  return LinkageRule{std::min(p1, p2), std::max(p1, p2), weight};
}

void normalize_ruleset(const PartCatalog& catalog, LinkageRuleSet& rules) {
  if (static_cast<int>(rules.rules.size()) != catalog.num_categories()) {
    fail(ErrorKind::InvalidCatalog, "rule set covers " + std::to_string(rules.rules.size()) + " categories, catalog has " +
                                        std::to_string(catalog.num_categories()));
  }
  for (int c = 0; c < catalog.num_categories(); ++c) {
    auto& list = rules.rules[c];
    for (auto& r : list) {
      r = make_rule(r.a, r.b, r.weight);
      if (r.a == r.b) fail(ErrorKind::InvalidCatalog, "rule links part " + std::to_string(r.a) + " to itself");
      if (!catalog.owns(c, r.a) || !catalog.owns(c, r.b)) {
        fail(ErrorKind::InvalidCatalog, "rule {" + std::to_string(r.a) + "," + std::to_string(r.b) +
                                            "} uses parts outside category '" + catalog.category_names[c] + "'");
      }
      if (r.weight < 0) fail(ErrorKind::InvalidCatalog, "negative rule weight");
    }
    std::sort(list.begin(), list.end(), [](const auto& x, const auto& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
    auto dup = std::adjacent_find(list.begin(), list.end(),
                                  [](const auto& x, const auto& y) { return x.a == y.a && x.b == y.b; });
    if (dup != list.end()) {
      fail(ErrorKind::InvalidCatalog, "duplicate rule {" + std::to_string(dup->a) + "," + std::to_string(dup->b) + "}");
    }
  }
}

LinkageRuleSet with_uniform_weights(const LinkageRuleSet& rules, std::int64_t weight) {
  LinkageRuleSet out = rules;
  for (auto& list : out.rules)
    for (auto& r : list) r.weight = weight;
  return out;
}

void check_labels(const PartCatalog& catalog, const GroundTruthLabels& labels) {
  if (labels.category < 0 || labels.category >= catalog.num_categories()) {
    fail(ErrorKind::LabelCategoryMismatch, "category index " + std::to_string(labels.category) + " out of range");
  }
  for (int v : labels.part_labels.storage()) {
    if (v != 0 && !catalog.owns(labels.category, v)) {
      fail(ErrorKind::LabelCategoryMismatch, "part id " + std::to_string(v) + " is not a part of '" +
                                                 catalog.category_names[labels.category] + "'");
    }
  }
}

LinkageRuleSet estimate_rule_weights(const PartCatalog& catalog, const LinkageRuleSet& skeleton,
                                     std::span<const GroundTruthLabels> training) {
  LinkageRuleSet out = skeleton;
  normalize_ruleset(catalog, out);
  for (auto& list : out.rules)
    for (auto& r : list) r.weight = 0;
  for (const auto& item : training) check_labels(catalog, item);

  // Per-image 0/1 occurrence flags, reduced by integer sums in index order.
  std::vector<std::vector<std::uint8_t>> linked(training.size());
  parallel_for(training.size(), [&](std::size_t n) {
    const auto& item = training[n];
    const PartLabelMap map{item.category, item.part_labels};
    for (const auto& ev : match_rules(map, catalog, out)) linked[n].push_back(ev.matched ? 1 : 0);
  });
  for (std::size_t n = 0; n < training.size(); ++n) {
    auto& list = out.rules[training[n].category];
    for (std::size_t r = 0; r < list.size(); ++r) list[r].weight += linked[n][r];
  }
  return out;
}

namespace {

[[noreturn]] void parse_fail(const std::string& where, const std::string& what) {
  fail(ErrorKind::ParseError, where + ": " + what);
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) parse_fail(where, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      parse_fail(where, "unknown key '" + key + "'");
    }
  }
}

const json& field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) parse_fail(where, std::string("missing key '") + key + "'");
  return *it;
}

std::string string_field(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_string()) parse_fail(where + "." + key, "expected a string");
  return v.get<std::string>();
}

}  // namespace

RuleConfig parse_ruleset(const json& doc) {
  reject_unknown_keys(doc, {"categories", "rules"}, "$");
  const auto& cats = field(doc, "categories", "$");
  if (!cats.is_array()) parse_fail("$.categories", "expected an array");

  RuleConfig cfg;
  auto& catalog = cfg.catalog;
  int next = 1;
  for (std::size_t c = 0; c < cats.size(); ++c) {
    const std::string where = "$.categories[" + std::to_string(c) + "]";
    reject_unknown_keys(cats[c], {"name", "parts"}, where);
    catalog.category_names.push_back(string_field(cats[c], "name", where));
    const auto& parts = field(cats[c], "parts", where);
    if (!parts.is_array()) parse_fail(where + ".parts", "expected an array");
    std::vector<int> set;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!parts[p].is_string()) parse_fail(where + ".parts[" + std::to_string(p) + "]", "expected a string");
      const auto name = parts[p].get<std::string>();
      const int existing = catalog.part_id(name);
      if (existing > 0) {
        // Same part name in two categories means the same id twice.
        set.push_back(existing);
        continue;
      }
      catalog.part_names.push_back(name);
      set.push_back(next++);
    }
    std::sort(set.begin(), set.end());
    catalog.part_sets.push_back(std::move(set));
  }
  catalog.num_parts = next - 1;
  validate_catalog(catalog);

  cfg.rules.rules.assign(catalog.num_categories(), {});
  const auto& rules = field(doc, "rules", "$");
  if (!rules.is_array()) parse_fail("$.rules", "expected an array");
  for (std::size_t i = 0; i < rules.size(); ++i) {
    const std::string where = "$.rules[" + std::to_string(i) + "]";
    reject_unknown_keys(rules[i], {"category", "a", "b", "weight"}, where);
    const auto cname = string_field(rules[i], "category", where);
    auto cit = std::find(catalog.category_names.begin(), catalog.category_names.end(), cname);
    if (cit == catalog.category_names.end()) parse_fail(where + ".category", "unknown category '" + cname + "'");
    const int c = static_cast<int>(cit - catalog.category_names.begin());
    int ids[2];
    const char* keys[2] = {"a", "b"};
    for (int k = 0; k < 2; ++k) {
      const auto pname = string_field(rules[i], keys[k], where);
      ids[k] = catalog.part_id(pname);
      if (ids[k] < 0) parse_fail(where + "." + keys[k], "unknown part '" + pname + "'");
      if (!catalog.owns(c, ids[k])) parse_fail(where + "." + keys[k], "part '" + pname + "' is not a part of '" + cname + "'");
    }
    if (ids[0] == ids[1]) parse_fail(where, "rule links a part to itself");
    const auto& w = field(rules[i], "weight", where);
    if (!w.is_number_integer() || w.get<std::int64_t>() < 0) parse_fail(where + ".weight", "expected an integer >= 0");
    const LinkageRule rule = make_rule(ids[0], ids[1], w.get<std::int64_t>());
    auto& list = cfg.rules.rules[c];
    if (std::any_of(list.begin(), list.end(), [&](const auto& r) { return r.a == rule.a && r.b == rule.b; })) {
      parse_fail(where, "duplicate rule in category '" + cname + "'");
    }
    list.push_back(rule);
  }
  normalize_ruleset(catalog, cfg.rules);
  return cfg;
}

json ruleset_to_json(const PartCatalog& catalog, const LinkageRuleSet& rules) {
  json doc;
  doc["categories"] = json::array();
  for (int c = 0; c < catalog.num_categories(); ++c) {
    json parts = json::array();
    for (int p : catalog.part_sets[c]) parts.push_back(catalog.part_names.at(p - 1));
    doc["categories"].push_back({{"name", catalog.category_names[c]}, {"parts", parts}});
  }
  LinkageRuleSet sorted = rules;
  normalize_ruleset(catalog, sorted);
  doc["rules"] = json::array();
  for (int c = 0; c < catalog.num_categories(); ++c) {
    for (const auto& r : sorted.rules[c]) {
      doc["rules"].push_back({{"category", catalog.category_names[c]},
                              {"a", catalog.part_names.at(r.a - 1)},
                              {"b", catalog.part_names.at(r.b - 1)},
                              {"weight", r.weight}});
    }
  }
  return doc;
}

RuleConfig load_ruleset(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::IoError, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::ParseError, path.string() + ": " + e.what());
  }
  return parse_ruleset(doc);
}

void save_ruleset(const PartCatalog& catalog, const LinkageRuleSet& rules, const std::filesystem::path& path) {
  const auto doc = ruleset_to_json(catalog, rules);
  std::ofstream f(path);
  if (!f) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
  f << doc.dump(2) << '\n';
}

}  // namespace rock
