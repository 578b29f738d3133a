#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "rock/datagen.hpp"
#include "rock/judgment.hpp"
#include "rock/rten.hpp"

using namespace rock;

namespace {

// Linked part pairs recovered from a ground-truth grid.
std::set<std::pair<int, int>> linked_pairs(const Sample& s, const PartCatalog& catalog) {
  const auto mccs = extract_mccs({s.category, s.parts}, catalog);
  std::set<std::pair<int, int>> out;
  for (auto a = mccs.begin(); a != mccs.end(); ++a)
    for (auto b = std::next(a); b != mccs.end(); ++b)
      if (detect_linkage(a->second, b->second)) out.insert({a->first, b->first});
  return out;
}

DatasetSpec small_spec() {
  DatasetSpec spec = default_spec();
  spec.train_per_category = 5;
  spec.val_per_category = 2;
  spec.seed = 3;
  return spec;
}

}  // namespace

TEST_CASE("default benchmark") {
  const DatasetSpec spec = default_spec();
  const Dataset data = generate(spec);
  CHECK(data.train.size() == 2000);
  CHECK(data.val.size() == 400);
  CHECK(data.catalog.num_parts == 14);
  CHECK(data.catalog.num_categories() == 4);
  CHECK_NOTHROW(validate_catalog(data.catalog));

  std::set<std::uint64_t> ids;
  for (const auto* split : {&data.train, &data.val}) {
    for (const auto& s : *split) {
      REQUIRE(ids.insert(s.id).second);
      REQUIRE_NOTHROW(check_labels(data.catalog, {s.category, s.parts}));
      for (double v : s.image.values()) REQUIRE((v >= 0.0 && v <= 1.0));
      std::set<std::pair<int, int>> declared;
      for (const auto& r : data.skeleton.rules[s.category]) declared.insert({r.a, r.b});
      REQUIRE(linked_pairs(s, data.catalog) == declared);
    }
  }

  const auto w = estimate_rule_weights(data.catalog, data.skeleton, ground_truth(data.train));
  for (const auto& list : w.rules)
    for (const auto& r : list) CHECK(r.weight > 0);

  // Tower and gate are built from the same primitive but differ in topology.
  const auto& tower = spec.categories[2];
  const auto& gate = spec.categories[3];
  CHECK(tower.parts.size() == gate.parts.size());
  for (std::size_t p = 0; p < tower.parts.size(); ++p) CHECK(gate.parts[p].shape == Shape::rectangle);
  CHECK(tower.adjacency != gate.adjacency);
}

TEST_CASE("determinism") {
  const DatasetSpec spec = small_spec();
  const Dataset a = generate(spec);
  const Dataset b = generate(spec);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(spec_hash(spec) == spec_hash(small_spec()));

  DatasetSpec other = spec;
  other.seed = 4;
  CHECK(generate(other).train != a.train);
  CHECK(spec_hash(other) != spec_hash(spec));

  const Sample s = generate_sample(spec, a.catalog, a.skeleton, a.train[3].id, a.train[3].category);
  CHECK(s == a.train[3]);
}

TEST_CASE("noise-free samples differ only by placement") {
  DatasetSpec spec = small_spec();
  spec.noise = 0;
  spec.texture_jitter = 0;
  const Dataset data = generate(spec);
  for (const auto& s : data.train) {
    const auto& layout = spec.categories[s.category];
    const int first = data.catalog.part_sets[s.category].front();
    const std::size_t N = s.parts.size();
    for (std::size_t t = 0; t < N; ++t) {
      for (int c = 0; c < 3; ++c) {
        const int l = s.parts[t];
        const double expect = l == 0 ? spec.background_level : layout.parts[l - first].color[c];
        REQUIRE(s.image[c * N + t] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("spec validation and files") {
  DatasetSpec spec = small_spec();
  CHECK(parse_dataset_spec(to_json(spec)).categories.size() == 4);
  CHECK(spec_hash(parse_dataset_spec(to_json(spec))) == spec_hash(spec));

  DatasetSpec broken = spec;
  broken.categories[0].adjacency = {{0, 1}};
  CHECK_THROWS_AS(validate(broken), Error);

  auto bad = to_json(spec);
  bad["colour"] = 1;
  CHECK_THROWS_AS(parse_dataset_spec(bad), Error);

  DatasetSpec impossible = spec;
  impossible.max_retries = 3;
  impossible.categories[3].parts[2].box = {0.0, 0.0, 1.0, 0.05};
  impossible.placement_jitter = 0.0;
  const auto [cat, skel] = catalog_from_spec(impossible);
  try {
    generate_sample(impossible, cat, skel, 0, 3);
    FAIL("expected UnsatisfiableLayout");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnsatisfiableLayout);
  }

  namespace fs = std::filesystem;
  const Dataset data = generate(spec);
  const fs::path dir = fs::temp_directory_path() / "rock_dataset_test";
  fs::remove_all(dir);
  save_dataset(dir, data, spec);
  CHECK(fs::exists(dir / "rules.json"));
  CHECK(fs::exists(dir / "train" / ("img_" + std::to_string(data.train[0].id) + ".rten")));
  const Dataset back = load_dataset(dir);
  CHECK(back.catalog == data.catalog);
  CHECK(back.skeleton == data.skeleton);
  CHECK(back.train.size() == data.train.size());
  for (std::size_t n = 0; n < back.train.size(); ++n) {
    CHECK(back.train[n].parts == data.train[n].parts);
    CHECK(back.train[n].category == data.train[n].category);
    CHECK(linf_distance(back.train[n].image, data.train[n].image) < 1e-7);
  }
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), Error);
}

TEST_CASE("coarsening") {
  LabelGrid g(4, 4, 0);
  g(0, 0) = 2;
  g(1, 1) = 3;
  g(0, 1) = 3;
  g(3, 3) = 1;
  const LabelGrid c = coarsen_labels(g, 2);
  CHECK(c.height() == 2);
  CHECK(c(0, 0) == 3);
  CHECK(c(0, 1) == 0);
  CHECK(c(1, 1) == 1);
  g(1, 1) = 2;
  CHECK(coarsen_labels(g, 2)(0, 0) == 2);
  CHECK_THROWS_AS(coarsen_labels(g, 0), Error);
}

TEST_CASE("tensor files") {
  Tensor t({2, 3, 4});
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = 0.25 * static_cast<double>(k) - 1.5;
  const std::string bytes = rten::encode(t);
  CHECK(bytes.substr(0, 4) == "RTEN");
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 4);
  CHECK(rten::decode(bytes) == t);

  auto kind = [](const std::string& b) {
    try {
      rten::decode(b);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::InvalidArgument;
  };
  CHECK(kind("XTEN" + bytes.substr(4)) == ErrorKind::FormatError);
  CHECK(kind(bytes.substr(0, bytes.size() - 1)) == ErrorKind::FormatError);
  CHECK(kind(bytes + "x") == ErrorKind::FormatError);
  std::string v2 = bytes;
  v2[4] = 2;
  CHECK(kind(v2) == ErrorKind::FormatError);

  const auto path = std::filesystem::temp_directory_path() / "rock_tensor_test.rten";
  rten::write(path, t);
  CHECK(rten::read(path) == t);
  std::filesystem::remove(path);
  try {
    rten::read(path);
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IoError);
  }

  const LabelGrid g = to_label_grid(rten::decode(rten::encode(to_tensor(LabelGrid(2, 2, 7)))));
  CHECK(g(1, 1) == 7);
  CHECK_THROWS_AS(to_label_grid(Tensor({2, 2}, 0.5)), Error);
}
