#include "rock/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "rock/judgment.hpp"
#include "rock/rten.hpp"
#include "rock/util.hpp"

namespace rock {

using nlohmann::json;

namespace {

const char* shape_name(Shape s) {
  switch (s) {
    case Shape::rectangle: return "rectangle";
    case Shape::ellipse: return "ellipse";
    case Shape::bar: return "bar";
  }
  return "?";
}

Shape parse_shape(const std::string& s) {
  if (s == "rectangle") return Shape::rectangle;
  if (s == "ellipse") return Shape::ellipse;
  if (s == "bar") return Shape::bar;
  fail(ErrorKind::ParseError, "unknown shape '" + s + "'");
}

bool graph_connected(int n, const std::vector<std::pair<int, int>>& edges) {
  std::vector<int> parent(n);
  for (int i = 0; i < n; ++i) parent[i] = i;
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  int groups = n;
  for (auto [a, b] : edges) {
    const int ra = find(a), rb = find(b);
    if (ra != rb) {
      parent[ra] = rb;
      --groups;
    }
  }
  return groups == 1;
}

}  // namespace

void validate(const DatasetSpec& spec) {
  if (spec.height <= 0 || spec.width <= 0) fail(ErrorKind::InvalidArgument, "image size must be positive");
  if (spec.channels != 3) fail(ErrorKind::InvalidArgument, "images have 3 channels");
  if (spec.categories.size() < 2) fail(ErrorKind::InvalidArgument, "need at least two categories");
  if (spec.train_per_category < 0 || spec.val_per_category < 0) fail(ErrorKind::InvalidArgument, "negative split size");
  if (spec.noise < 0 || spec.texture_jitter < 0 || spec.placement_jitter < 0) {
    fail(ErrorKind::InvalidArgument, "noise and jitter must be >= 0");
  }
  if (!(spec.min_object_size > 0) || spec.max_object_size < spec.min_object_size ||
      spec.max_object_size > std::min(spec.height, spec.width)) {
    fail(ErrorKind::InvalidArgument, "object size range must fit in the image");
  }
  if (spec.max_retries <= 0) fail(ErrorKind::InvalidArgument, "max_retries must be positive");
  for (const auto& cat : spec.categories) {
    const int n = static_cast<int>(cat.parts.size());
    if (n < 2) fail(ErrorKind::InvalidArgument, "category '" + cat.name + "' needs at least two parts");
    std::set<std::pair<int, int>> seen;
    for (auto [a, b] : cat.adjacency) {
      if (a < 0 || b < 0 || a >= n || b >= n || a == b) {
        fail(ErrorKind::InvalidArgument, "bad adjacency in category '" + cat.name + "'");
      }
      if (!seen.insert({std::min(a, b), std::max(a, b)}).second) {
        fail(ErrorKind::InvalidArgument, "duplicate adjacency in category '" + cat.name + "'");
      }
    }
    if (!graph_connected(n, cat.adjacency)) {
      fail(ErrorKind::InvalidArgument, "adjacency graph of '" + cat.name + "' is not connected");
    }
  }
}

json to_json(const DatasetSpec& spec) {
  json cats = json::array();
  for (const auto& c : spec.categories) {
    json parts = json::array();
    for (const auto& p : c.parts) {
      parts.push_back({{"name", p.name}, {"shape", shape_name(p.shape)}, {"box", p.box}, {"color", p.color}});
    }
    json adj = json::array();
    for (auto [a, b] : c.adjacency) adj.push_back({a, b});
    cats.push_back({{"name", c.name}, {"parts", parts}, {"adjacency", adj}});
  }
  return json{{"height", spec.height},
              {"width", spec.width},
              {"channels", spec.channels},
              {"categories", cats},
              {"train_per_category", spec.train_per_category},
              {"val_per_category", spec.val_per_category},
              {"noise", spec.noise},
              {"texture_jitter", spec.texture_jitter},
              {"placement_jitter", spec.placement_jitter},
              {"min_object_size", spec.min_object_size},
              {"max_object_size", spec.max_object_size},
              {"background_level", spec.background_level},
              {"max_retries", spec.max_retries},
              {"seed", spec.seed}};
}

DatasetSpec parse_dataset_spec(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::ParseError, "dataset spec must be a JSON object");
  DatasetSpec spec = default_spec();
  try {
    for (const auto& [key, v] : doc.items()) {
      if (key == "height") spec.height = v.get<int>();
      else if (key == "width") spec.width = v.get<int>();
      else if (key == "channels") spec.channels = v.get<int>();
      else if (key == "train_per_category") spec.train_per_category = v.get<int>();
      else if (key == "val_per_category") spec.val_per_category = v.get<int>();
      else if (key == "noise") spec.noise = v.get<double>();
      else if (key == "texture_jitter") spec.texture_jitter = v.get<double>();
      else if (key == "placement_jitter") spec.placement_jitter = v.get<double>();
      else if (key == "min_object_size") spec.min_object_size = v.get<double>();
      else if (key == "max_object_size") spec.max_object_size = v.get<double>();
      else if (key == "background_level") spec.background_level = v.get<double>();
      else if (key == "max_retries") spec.max_retries = v.get<int>();
      else if (key == "seed") spec.seed = v.get<std::uint64_t>();
      else if (key == "categories") {
        spec.categories.clear();
        for (const auto& c : v) {
          CategoryLayout cat;
          cat.name = c.at("name").get<std::string>();
          for (const auto& p : c.at("parts")) {
            cat.parts.push_back({p.at("name").get<std::string>(), parse_shape(p.at("shape").get<std::string>()),
                                 p.at("box").get<std::array<double, 4>>(), p.at("color").get<std::array<double, 3>>()});
          }
          for (const auto& e : c.at("adjacency")) cat.adjacency.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
          spec.categories.push_back(std::move(cat));
        }
      } else {
        fail(ErrorKind::ParseError, "unknown dataset spec key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("dataset spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

std::string spec_hash(const DatasetSpec& spec) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(spec).dump())));
  return buf;
}

std::pair<PartCatalog, LinkageRuleSet> catalog_from_spec(const DatasetSpec& spec) {
  PartCatalog catalog;
  LinkageRuleSet rules;
  int next = 1;
  for (const auto& cat : spec.categories) {
    catalog.category_names.push_back(cat.name);
    std::vector<int> ids;
    for (const auto& p : cat.parts) {
      catalog.part_names.push_back(cat.name + "/" + p.name);
      ids.push_back(next++);
    }
    std::vector<LinkageRule> list;
    for (auto [a, b] : cat.adjacency) list.push_back(make_rule(ids[a], ids[b]));
    catalog.part_sets.push_back(ids);
    rules.rules.push_back(std::move(list));
  }
  catalog.num_parts = next - 1;
  validate_catalog(catalog);
  normalize_ruleset(catalog, rules);
  return {catalog, rules};
}

namespace {

/// Renders the GT grid for one placement draw.
LabelGrid place_parts(const DatasetSpec& spec, const CategoryLayout& layout, const std::vector<int>& ids,
                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double size = spec.min_object_size + (spec.max_object_size - spec.min_object_size) * unit(rng);
  const double ox = (spec.width - size) * unit(rng);
  const double oy = (spec.height - size) * unit(rng);
  std::uniform_real_distribution<double> jitter(-spec.placement_jitter, spec.placement_jitter);

  LabelGrid grid(spec.height, spec.width, 0);
  for (std::size_t p = 0; p < layout.parts.size(); ++p) {
    const auto& part = layout.parts[p];
    std::array<double, 4> b = part.box;
    for (auto& v : b) v += jitter(rng);
    const double x0 = ox + b[0] * size, y0 = oy + b[1] * size;
    const double x1 = ox + b[2] * size, y1 = oy + b[3] * size;
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    const double rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
    for (int i = 0; i < spec.height; ++i) {
      for (int j = 0; j < spec.width; ++j) {
        const double px = j + 0.5, py = i + 0.5;
        bool inside = false;
        if (part.shape == Shape::ellipse) {
          if (rx > 0 && ry > 0) {
            const double u = (px - cx) / rx, v = (py - cy) / ry;
            inside = u * u + v * v <= 1.0;
          }
        } else {
          inside = px >= x0 && px < x1 && py >= y0 && py < y1;
        }
        if (inside) grid(i, j) = ids[p];
      }
    }
  }
  return grid;
}

bool topology_holds(const PartCatalog& catalog, const LinkageRuleSet& skeleton, int category, const LabelGrid& grid) {
  const PartLabelMap map{category, grid};
  const auto mccs = extract_mccs(map, catalog);
  for (const auto& [_, m] : mccs)
    if (is_empty(m)) return false;
  const auto& parts = catalog.part_sets[category];
  const auto& rules = skeleton.rules[category];
  for (std::size_t a = 0; a < parts.size(); ++a) {
    for (std::size_t b = a + 1; b < parts.size(); ++b) {
      const bool declared = std::any_of(rules.begin(), rules.end(),
                                        [&](const auto& r) { return r.a == parts[a] && r.b == parts[b]; });
      if (detect_linkage(mccs.at(parts[a]), mccs.at(parts[b])) != declared) return false;
    }
  }
  return true;
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, const PartCatalog& catalog, const LinkageRuleSet& skeleton,
                       std::uint64_t id, int category) {
  const auto& layout = spec.categories.at(category);
  std::mt19937_64 rng(derive_seed(spec.seed, id));
  const auto& ids = catalog.part_sets[category];

  LabelGrid grid;
  bool placed = false;
  for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
    grid = place_parts(spec, layout, ids, rng);
    placed = topology_holds(catalog, skeleton, category, grid);
  }
  if (!placed) {
    fail(ErrorKind::UnsatisfiableLayout, "category '" + layout.name + "' sample " + std::to_string(id) + ": " +
                                             std::to_string(spec.max_retries) + " placements failed the topology check");
  }

  std::uniform_real_distribution<double> jitter(-spec.texture_jitter, spec.texture_jitter);
  std::array<double, 3> background{};
  const double shade = jitter(rng);
  for (auto& v : background) v = spec.background_level + shade;
  std::vector<std::array<double, 3>> colors;
  for (const auto& part : layout.parts) {
    std::array<double, 3> c = part.color;
    for (auto& v : c) v += jitter(rng);
    colors.push_back(c);
  }

  Sample s;
  s.id = id;
  s.category = category;
  s.parts = grid;
  s.image = Tensor({3, static_cast<std::size_t>(spec.height), static_cast<std::size_t>(spec.width)});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < spec.height; ++i) {
      for (int j = 0; j < spec.width; ++j) {
        const int label = grid(i, j);
        double v = label == 0 ? background[ch] : colors[label - ids.front()][ch];
        if (spec.noise > 0) v += spec.noise * noise(rng);
        s.image.at(ch, i, j) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return s;
}

Dataset generate(const DatasetSpec& spec) {
  validate(spec);
  auto [catalog, skeleton] = catalog_from_spec(spec);
  Dataset data{{}, {}, catalog, skeleton};
  const int C = static_cast<int>(spec.categories.size());
  const std::size_t n_train = static_cast<std::size_t>(spec.train_per_category) * C;
  const std::size_t n_val = static_cast<std::size_t>(spec.val_per_category) * C;
  data.train.resize(n_train);
  data.val.resize(n_val);
  parallel_for(n_train + n_val, [&](std::size_t n) {
    const int category = static_cast<int>(n % C);
    auto s = generate_sample(spec, data.catalog, data.skeleton, n, category);
    if (n < n_train) data.train[n] = std::move(s);
    else data.val[n - n_train] = std::move(s);
  });
  return data;
}

DatasetSpec default_spec() {
  DatasetSpec spec;
  const auto R = Shape::rectangle;
  const auto E = Shape::ellipse;
  const auto B = Shape::bar;
  spec.categories = {
      {"bird",
       {{"torso", E, {0.20, 0.30, 0.85, 0.80}, {0.85, 0.20, 0.20}},
        {"head", E, {0.00, 0.10, 0.36, 0.46}, {0.95, 0.75, 0.10}},
        {"wing", R, {0.45, 0.05, 0.75, 0.40}, {0.55, 0.10, 0.10}},
        {"tail", B, {0.78, 0.50, 1.00, 0.62}, {0.95, 0.45, 0.10}}},
       {{0, 1}, {0, 2}, {0, 3}}},
      {"fish",
       {{"body", R, {0.25, 0.30, 0.75, 0.70}, {0.15, 0.35, 0.90}},
        {"head", E, {0.00, 0.28, 0.33, 0.72}, {0.10, 0.80, 0.85}},
        {"fin", B, {0.35, 0.10, 0.60, 0.34}, {0.10, 0.15, 0.50}},
        {"tailfin", E, {0.70, 0.20, 1.00, 0.80}, {0.50, 0.30, 0.95}}},
       {{0, 1}, {0, 2}, {0, 3}}},
      {"tower",
       {{"base", R, {0.15, 0.70, 0.85, 1.00}, {0.15, 0.65, 0.20}},
        {"middle", R, {0.30, 0.38, 0.70, 0.72}, {0.55, 0.85, 0.20}},
        {"top", E, {0.35, 0.00, 0.65, 0.40}, {0.05, 0.40, 0.10}}},
       {{0, 1}, {1, 2}}},
      {"gate",
       {{"left", R, {0.10, 0.25, 0.30, 1.00}, {0.85, 0.25, 0.75}},
        {"right", R, {0.70, 0.25, 0.90, 1.00}, {0.60, 0.10, 0.50}},
        {"lintel", R, {0.00, 0.00, 1.00, 0.28}, {0.95, 0.60, 0.85}}},
       {{0, 2}, {1, 2}}},
  };
  return spec;
}

LabelGrid coarsen_labels(const LabelGrid& labels, int factor) {
  if (factor <= 0) fail(ErrorKind::InvalidArgument, "coarsening factor must be positive");
  const int H = (labels.height() + factor - 1) / factor;
  const int W = (labels.width() + factor - 1) / factor;
  LabelGrid out(H, W, 0);
  for (int bi = 0; bi < H; ++bi) {
    for (int bj = 0; bj < W; ++bj) {
      std::map<int, int> counts;
      for (int i = bi * factor; i < std::min(labels.height(), (bi + 1) * factor); ++i)
        for (int j = bj * factor; j < std::min(labels.width(), (bj + 1) * factor); ++j)
          if (labels(i, j) != 0) ++counts[labels(i, j)];
      int best = 0, best_n = 0;
      for (auto [label, n] : counts) {
        if (n > best_n) {
          best = label;
          best_n = n;
        }
      }
      out(bi, bj) = best;
    }
  }
  return out;
}

std::vector<GroundTruthLabels> ground_truth(std::span<const Sample> samples) {
  std::vector<GroundTruthLabels> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.category, s.parts});
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data, const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  std::error_code ec;
  json splits = json::object();
  for (const auto& [name, samples] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}}) {
    fs::create_directories(dir / name, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + (dir / name).string());
    json items = json::array();
    for (const auto& s : *samples) {
      const auto id = std::to_string(s.id);
      rten::write(dir / name / ("img_" + id + ".rten"), s.image);
      rten::write(dir / name / ("gt_" + id + ".rten"), to_tensor(s.parts));
      items.push_back({{"id", s.id}, {"category", s.category}});
    }
    splits[name] = items;
  }
  save_ruleset(data.catalog, data.skeleton, dir / "rules.json");
  json manifest{{"spec_hash", spec_hash(spec)}, {"spec", to_json(spec)}, {"rules", "rules.json"}, {"splits", splits}};
  std::ofstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::IoError, "cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::IoError, "no manifest.json in " + dir.string());
  Dataset data;
  try {
    const json manifest = json::parse(f);
    auto rc = load_ruleset(dir / manifest.at("rules").get<std::string>());
    data.catalog = std::move(rc.catalog);
    data.skeleton = std::move(rc.rules);
    for (const auto& [name, target] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}}) {
      for (const auto& item : manifest.at("splits").at(name)) {
        Sample s;
        s.id = item.at("id").get<std::uint64_t>();
        s.category = item.at("category").get<int>();
        const auto id = std::to_string(s.id);
        s.image = rten::read(dir / name / ("img_" + id + ".rten"));
        s.parts = to_label_grid(rten::read(dir / name / ("gt_" + id + ".rten")));
        check_labels(data.catalog, {s.category, s.parts});
        target->push_back(std::move(s));
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, (dir / "manifest.json").string() + ": " + e.what());
  }
  return data;
}

}  // namespace rock
