#include <filesystem>
#include <random>

#include "doctest.h"
#include "rock/catalog.hpp"
#include "support.hpp"

using namespace rock;
using nlohmann::json;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::InvalidArgument;
}

PartCatalog catalog(std::vector<std::vector<int>> sets, int K) {
  PartCatalog c;
  for (std::size_t i = 0; i < sets.size(); ++i) c.category_names.push_back("c" + std::to_string(i));
  c.part_sets = std::move(sets);
  c.num_parts = K;
  for (int k = 1; k <= K; ++k) c.part_names.push_back("p" + std::to_string(k));
  return c;
}

}  // namespace

TEST_CASE("catalog validation") {
  CHECK_NOTHROW(validate_catalog(catalog({{1, 2}, {3}}, 3)));
  CHECK(kind_of([] { validate_catalog(catalog({{1, 2}, {2, 3}}, 3)); }) == ErrorKind::OverlappingPartSets);
  CHECK(kind_of([] { validate_catalog(catalog({{1, 3}}, 3)); }) == ErrorKind::GapInPartIds);
  CHECK(kind_of([] { validate_catalog(catalog({{1, 2}, {}}, 2)); }) == ErrorKind::EmptyPartSet);
  CHECK(kind_of([] { validate_catalog(catalog({{0, 1}}, 1)); }) == ErrorKind::GapInPartIds);
  CHECK(kind_of([] { validate_catalog(catalog({{2, 1}}, 2)); }) == ErrorKind::InvalidCatalog);

  const PartCatalog made = make_catalog({2, 3});
  CHECK(made.part_sets == std::vector<std::vector<int>>{{1, 2}, {3, 4, 5}});
  CHECK(made.category_of(4) == 1);
  CHECK(made.category_of(0) == -1);
  CHECK(made.part_id(made.part_names[2]) == 3);
  CHECK(catalog_hash(made) == catalog_hash(make_catalog({2, 3})));
  CHECK(catalog_hash(made) != catalog_hash(make_catalog({3, 2})));
}

TEST_CASE("rule sets") {
  const PartCatalog cat = make_catalog({3, 2});
  CHECK(make_rule(3, 1, 4) == LinkageRule{1, 3, 4});

  LinkageRuleSet rs{{{make_rule(2, 3), make_rule(1, 2)}, {make_rule(4, 5)}}};
  normalize_ruleset(cat, rs);
  CHECK(rs.rules[0][0] == make_rule(1, 2));

  LinkageRuleSet foreign{{{make_rule(1, 4)}, {}}};
  CHECK_THROWS_AS(normalize_ruleset(cat, foreign), Error);
  LinkageRuleSet dup{{{make_rule(1, 2), make_rule(2, 1)}, {}}};
  CHECK_THROWS_AS(normalize_ruleset(cat, dup), Error);

  CHECK(kind_of([&] { check_labels(cat, {0, testing::to_labels({{1, 4}})}); }) == ErrorKind::LabelCategoryMismatch);
  CHECK_NOTHROW(check_labels(cat, {1, testing::to_labels({{0, 4, 5}})}));
}

TEST_CASE("rule weight estimation") {
  const PartCatalog cat = make_catalog({3, 2});
  LinkageRuleSet skeleton{{{make_rule(1, 2), make_rule(2, 3), make_rule(1, 3)}, {make_rule(4, 5)}}};
  normalize_ruleset(cat, skeleton);

  SUBCASE("empty training set") {
    const auto w = estimate_rule_weights(cat, skeleton, {});
    for (const auto& list : w.rules)
      for (const auto& r : list) CHECK(r.weight == 0);
  }
  SUBCASE("one image with a single linked pair") {
    // Head (1) touches torso (2); part 3 sits apart.
    const oracle::Grid g = {{0, 0, 0, 0, 0, 0}, {0, 1, 1, 0, 0, 0}, {0, 1, 2, 2, 0, 0},
                            {0, 0, 2, 2, 0, 3}, {0, 0, 0, 0, 0, 3}, {0, 0, 0, 0, 0, 0}};
    std::vector<GroundTruthLabels> gt{{0, testing::to_labels(g)}};
    const auto w = estimate_rule_weights(cat, skeleton, gt);
    CHECK(w.rules[0][0] == make_rule(1, 2, 1));
    CHECK(w.rules[0][1].weight == 0);
    CHECK(w.rules[0][2].weight == 0);
    CHECK(w.rules[1][0].weight == 0);
  }
  SUBCASE("counts per image, not per contact") {
    const oracle::Grid linked = {{1, 2, 1, 2}};
    const oracle::Grid apart = {{1, 0, 2, 0}};
    std::vector<GroundTruthLabels> gt;
    for (int n = 0; n < 7; ++n) gt.push_back({0, testing::to_labels(linked)});
    for (int n = 0; n < 3; ++n) gt.push_back({0, testing::to_labels(apart)});
    const auto w = estimate_rule_weights(cat, skeleton, gt);
    CHECK(w.rules[0][0].weight == 7);
  }
  SUBCASE("matches the counting oracle on random grids") {
    std::mt19937_64 rng(31);
    std::vector<GroundTruthLabels> gt;
    std::vector<std::pair<int, oracle::Grid>> images;
    for (int n = 0; n < 200; ++n) {
      const int c = n % 2;
      auto g = oracle::random_grid(rng, 6, 6, 3);
      for (auto& row : g)
        for (auto& v : row)
          if (c == 1 && v) v = v == 3 ? 0 : v + 3;
      gt.push_back({c, testing::to_labels(g)});
      images.push_back({c, g});
    }
    const auto w = estimate_rule_weights(cat, skeleton, gt);
    const auto ref = oracle::count_rules(testing::to_oracle_rules(skeleton), images);
    for (std::size_t c = 0; c < ref.size(); ++c)
      for (std::size_t r = 0; r < ref[c].size(); ++r) CHECK(w.rules[c][r].weight == ref[c][r]);

    // Training order does not matter.
    std::shuffle(gt.begin(), gt.end(), rng);
    CHECK(estimate_rule_weights(cat, skeleton, gt) == w);

    // Normalised weights sum to one per category.
    for (int c = 0; c < 2; ++c) {
      const double total = static_cast<double>(w.total_weight(c));
      if (total <= 0) continue;
      double sum = 0;
      for (const auto& r : w.rules[c]) sum += r.weight / total;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("labels from the wrong category are rejected") {
    std::vector<GroundTruthLabels> gt{{1, testing::to_labels({{1, 2}})}};
    CHECK_THROWS_AS(estimate_rule_weights(cat, skeleton, gt), Error);
  }
}

TEST_CASE("rule config files") {
  const json doc = json::parse(R"({
    "categories": [{"name": "bird", "parts": ["torso", "head", "wing"]},
                   {"name": "fish", "parts": ["body", "fin"]}],
    "rules": [{"category": "bird", "a": "torso", "b": "head", "weight": 4},
              {"category": "bird", "a": "wing", "b": "torso", "weight": 2},
              {"category": "fish", "a": "fin", "b": "body", "weight": 0}]
  })");
  const auto cfg = parse_ruleset(doc);
  CHECK(cfg.catalog.num_parts == 5);
  CHECK(cfg.catalog.part_id("fin") == 5);
  CHECK(cfg.rules.rules[0] == std::vector<LinkageRule>{make_rule(1, 2, 4), make_rule(1, 3, 2)});

  const auto path = std::filesystem::temp_directory_path() / "rock_rules_roundtrip.json";
  save_ruleset(cfg.catalog, cfg.rules, path);
  const auto back = load_ruleset(path);
  CHECK(back.catalog == cfg.catalog);
  CHECK(back.rules == cfg.rules);
  std::filesystem::remove(path);

  auto bad = doc;
  bad["rules"][0]["b"] = "p99";
  CHECK(kind_of([&] { parse_ruleset(bad); }) == ErrorKind::ParseError);

  bad = doc;
  bad["rules"].push_back({{"category", "bird"}, {"a", "head"}, {"b", "torso"}, {"weight", 1}});
  CHECK(kind_of([&] { parse_ruleset(bad); }) == ErrorKind::ParseError);

  bad = doc;
  bad["extra"] = 1;
  try {
    parse_ruleset(bad);
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ParseError);
    CHECK(std::string(e.what()).find("extra") != std::string::npos);
  }

  bad = doc;
  bad["rules"][1]["weight"] = -1;
  CHECK(kind_of([&] { parse_ruleset(bad); }) == ErrorKind::ParseError);

  bad = doc;
  bad["categories"][1]["parts"][0] = "torso";
  CHECK(kind_of([&] { parse_ruleset(bad); }) == ErrorKind::OverlappingPartSets);

  CHECK(kind_of([] { load_ruleset("/nonexistent/rules.json"); }) == ErrorKind::IoError);
}

TEST_CASE("round trip over random rule sets") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const PartCatalog cat = make_catalog(testing::random_sizes(rng, 3, 7));
    auto rs = testing::random_rules(rng, cat);
    normalize_ruleset(cat, rs);
    const auto back = parse_ruleset(ruleset_to_json(cat, rs));
    CHECK(back.catalog == cat);
    CHECK(back.rules == rs);
  }
}
