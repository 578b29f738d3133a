#pragma once

// Synthetic "geometric creature" datasets: each category is a set of coloured
// primitive parts with a declared touching graph, which doubles as the
// category's linkage-rule skeleton.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rock/catalog.hpp"
#include "rock/sample.hpp"

namespace rock {

enum class Shape { rectangle, ellipse, bar };

struct PartLayout {
  std::string name;
  Shape shape = Shape::rectangle;
  /// x0, y0, x1, y1 in the unit object frame.
  std::array<double, 4> box{};
  std::array<double, 3> color{};
};

struct CategoryLayout {
  std::string name;
  /// Rasterised in order; later parts paint over earlier ones.
  std::vector<PartLayout> parts;
  /// Pairs of local part indices that must touch; every other pair must not.
  std::vector<std::pair<int, int>> adjacency;
};

struct DatasetSpec {
  int height = 32;
  int width = 32;
  int channels = 3;
  std::vector<CategoryLayout> categories;
  int train_per_category = 500;
  int val_per_category = 100;
  /// Gaussian pixel noise σ.
  double noise = 0.05;
  /// Per-sample uniform offset of each part colour and of the background shade.
  double texture_jitter = 0.05;
  /// Per-edge jitter of part boxes, in object-frame units.
  double placement_jitter = 0.04;
  double min_object_size = 18.0;
  double max_object_size = 26.0;
  double background_level = 0.5;
  int max_retries = 200;
  std::uint64_t seed = 0;
};

void validate(const DatasetSpec& spec);
nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec parse_dataset_spec(const nlohmann::json& doc);
std::string spec_hash(const DatasetSpec& spec);

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  PartCatalog catalog;
  /// Declared adjacencies with zero weights.
  LinkageRuleSet skeleton;
};

/// Catalog and zero-weight rule skeleton implied by the layouts.
std::pair<PartCatalog, LinkageRuleSet> catalog_from_spec(const DatasetSpec& spec);

Dataset generate(const DatasetSpec& spec);

/// Renders one sample; throws UnsatisfiableLayout when max_retries placements
/// all fail the topology check.
Sample generate_sample(const DatasetSpec& spec, const PartCatalog& catalog, const LinkageRuleSet& skeleton,
                       std::uint64_t id, int category);

/// Four categories: bird and fish share a star topology; tower (a chain) and
/// gate (an arch) are built from the same rectangle primitives but differ in
/// topology.
DatasetSpec default_spec();

/// Max-pools one-hot labels over factor×factor blocks; a block takes its most
/// frequent part label (smallest id on ties) and is background only if no part
/// pixel falls inside it.
LabelGrid coarsen_labels(const LabelGrid& labels, int factor);

std::vector<GroundTruthLabels> ground_truth(std::span<const Sample> samples);

/// Layout: <dir>/manifest.json, <dir>/rules.json, <dir>/<split>/img_<id>.rten and gt_<id>.rten.
void save_dataset(const std::filesystem::path& dir, const Dataset& data, const DatasetSpec& spec);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace rock
