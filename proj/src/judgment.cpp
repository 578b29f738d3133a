#include "rock/judgment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rock {

Tensor softmax_channels(const Tensor& logits) {
  if (logits.rank() != 3) fail(ErrorKind::ShapeMismatch, "logits must be rank 3, got " + shape_string(logits.shape()));
  const std::size_t K1 = logits.dim(0);
  const std::size_t N = logits.dim(1) * logits.dim(2);
  Tensor out(logits.shape());
  const double* in = logits.storage().data();
  double* o = out.storage().data();
  for (std::size_t t = 0; t < N; ++t) {
    double mx = in[t];
    for (std::size_t k = 1; k < K1; ++k) mx = std::max(mx, in[k * N + t]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K1; ++k) {
      const double e = std::exp(in[k * N + t] - mx);
      o[k * N + t] = e;
      sum += e;
    }
    for (std::size_t k = 0; k < K1; ++k) o[k * N + t] /= sum;
  }
  return out;
}

ResponseMap ResponseMap::from_probabilities(Tensor probabilities, double tolerance) {
  if (probabilities.rank() != 3 || probabilities.dim(0) < 2) {
    fail(ErrorKind::ShapeMismatch, "response map must be (K+1,H,W) with K >= 1, got " + shape_string(probabilities.shape()));
  }
  const std::size_t K1 = probabilities.dim(0);
  const std::size_t N = probabilities.dim(1) * probabilities.dim(2);
  for (std::size_t t = 0; t < N; ++t) {
    double sum = 0.0;
    for (std::size_t k = 0; k < K1; ++k) {
      const double v = probabilities[k * N + t];
      if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::InvalidArgument, "response value outside [0,1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tolerance) {
      fail(ErrorKind::InvalidArgument, "pixel " + std::to_string(t) + " channel sum " + std::to_string(sum) + " != 1");
    }
  }
  return ResponseMap(std::move(probabilities));
}

ResponseMap ResponseMap::from_logits(const Tensor& logits) { return ResponseMap(softmax_channels(logits)); }

void require_channels(const ResponseMap& response, const PartCatalog& catalog) {
  if (response.channels() != catalog.num_parts + 1) {
    fail(ErrorKind::ChannelMismatch, "response map has " + std::to_string(response.channels()) +
                                         " channels, catalog needs " + std::to_string(catalog.num_parts + 1));
  }
}

PartLabelMap compute_label_map(const ResponseMap& response, const PartCatalog& catalog, int category,
                               double bg_scale) {
  const auto& parts = catalog.part_sets.at(category);
  const int H = response.height(), W = response.width();
  PartLabelMap out{category, LabelGrid(H, W, 0)};
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double total = 0.0;
      int best = parts.front();
      double best_v = response(best, i, j);
      for (int k : parts) {
        const double v = response(k, i, j);
        total += v;
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out.labels(i, j) = response.background(i, j) / bg_scale >= total ? 0 : best;
    }
  }
  return out;
}

Mask largest_component(const LabelGrid& labels, int value) {
  const int H = labels.height(), W = labels.width();
  Grid<int> comp(H, W, -1);
  std::vector<int> stack;
  int best_id = -1;
  std::size_t best_size = 0;
  int next_id = 0;
  for (int s = 0; s < H * W; ++s) {
    if (labels[s] != value || comp[s] != -1) continue;
    const int id = next_id++;
    std::size_t size = 0;
    stack.assign(1, s);
    comp[s] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int i = p / W, j = p % W;
      const int nbr[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= H || n[1] < 0 || n[1] >= W) continue;
        const int q = n[0] * W + n[1];
        if (labels[q] == value && comp[q] == -1) {
          comp[q] = id;
          stack.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_id = id;
    }
  }
  Mask m(H, W, 0);
  if (best_id >= 0) {
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = comp[k] == best_id ? 1 : 0;
  }
  return m;
}

std::map<int, Mask> extract_mccs(const PartLabelMap& label_map, const PartCatalog& catalog) {
  std::map<int, Mask> out;
  for (int p : catalog.part_sets.at(label_map.category)) out.emplace(p, largest_component(label_map.labels, p));
  return out;
}

bool detect_linkage(const Mask& first, const Mask& second) {
  if (!first.same_shape(second)) fail(ErrorKind::ShapeMismatch, "detect_linkage: masks differ in shape");
  if (is_empty(first) || is_empty(second)) return false;
  const int H = first.height(), W = first.width();
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      if (!first(i, j)) continue;
      if ((i > 0 && second(i - 1, j)) || (i + 1 < H && second(i + 1, j)) || (j > 0 && second(i, j - 1)) ||
          (j + 1 < W && second(i, j + 1))) {
        return true;
      }
    }
  }
  return false;
}

RealGrid max_response(const ResponseMap& response, const PartCatalog& catalog, int category) {
  const auto& parts = catalog.part_sets.at(category);
  RealGrid v(response.height(), response.width(), 0.0);
  for (int i = 0; i < v.height(); ++i) {
    for (int j = 0; j < v.width(); ++j) {
      double m = response(parts.front(), i, j);
      for (int k : parts) m = std::max(m, response(k, i, j));
      v(i, j) = m;
    }
  }
  return v;
}

double rule_confidence(const RealGrid& max_resp, const Mask& rule_mask) {
  if (max_resp.height() != rule_mask.height() || max_resp.width() != rule_mask.width()) {
    fail(ErrorKind::ShapeMismatch, "rule_confidence: grid and mask differ in shape");
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < rule_mask.size(); ++k) {
    if (rule_mask[k]) sum += max_resp[k];
  }
  return sum;
}

std::vector<RuleEvidence> match_rules(const PartLabelMap& label_map, const PartCatalog& catalog,
                                      const LinkageRuleSet& rules) {
  const auto mccs = extract_mccs(label_map, catalog);
  std::vector<RuleEvidence> out;
  for (const auto& rule : rules.rules.at(label_map.category)) {
    const Mask& ma = mccs.at(rule.a);
    const Mask& mb = mccs.at(rule.b);
    RuleEvidence ev{rule, detect_linkage(ma, mb), Mask(ma.height(), ma.width(), 0)};
    for (std::size_t k = 0; k < ma.size(); ++k) ev.mask[k] = (ma[k] || mb[k]) ? 1 : 0;
    out.push_back(std::move(ev));
  }
  return out;
}

namespace {

CategoryScore score_from_label_map(const ResponseMap& response, const PartCatalog& catalog,
                                   const LinkageRuleSet& rules, const PartLabelMap& label_map) {
  CategoryScore out;
  const int c = label_map.category;
  const std::int64_t total = rules.rules.at(c).empty() ? 0 : rules.total_weight(c);
  if (total == 0) return out;
  const auto evidence = match_rules(label_map, catalog, rules);
  const RealGrid v = max_response(response, catalog, c);
  double weighted = 0.0;
  for (const auto& ev : evidence) {
    if (!ev.matched) continue;
    const double p = rule_confidence(v, ev.mask);
    out.matched.push_back({ev.rule, p});
    weighted += static_cast<double>(ev.rule.weight) * p;
  }
  out.score = weighted / static_cast<double>(total);
  return out;
}

std::vector<int> rank_by_foreground(const std::vector<PartLabelMap>& maps) {
  std::vector<std::size_t> fg(maps.size());
  for (std::size_t c = 0; c < maps.size(); ++c) {
    const auto& s = maps[c].labels.storage();
    fg[c] = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](int v) { return v != 0; }));
  }
  std::vector<int> order(maps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return fg[a] > fg[b]; });
  return order;
}

}  // namespace

CategoryScore score_category(const ResponseMap& response, const PartCatalog& catalog, const LinkageRuleSet& rules,
                             int category, double bg_scale) {
  return score_from_label_map(response, catalog, rules, compute_label_map(response, catalog, category, bg_scale));
}

std::vector<int> foreground_rank(const ResponseMap& response, const PartCatalog& catalog, double bg_scale) {
  std::vector<PartLabelMap> maps;
  for (int c = 0; c < catalog.num_categories(); ++c) maps.push_back(compute_label_map(response, catalog, c, bg_scale));
  return rank_by_foreground(maps);
}

int argmax_over(const std::vector<double>& scores, const std::vector<int>& candidates) {
  int best = -1;
  for (int c : candidates) {
    if (best < 0 || scores[c] > scores[best] || (scores[c] == scores[best] && c < best)) best = c;
  }
  return best;
}

ScoreReport classify(const ResponseMap& response, const PartCatalog& catalog, const LinkageRuleSet& rules,
                     const JudgmentOptions& options) {
  require_channels(response, catalog);
  const int C = catalog.num_categories();
  if (static_cast<int>(rules.rules.size()) != C) fail(ErrorKind::InvalidArgument, "rule set does not match catalog");
  if (options.top_k && *options.top_k <= 0) fail(ErrorKind::InvalidArgument, "top_k must be positive");
  if (!(options.bg_scale > 0.0)) fail(ErrorKind::InvalidArgument, "bg_scale must be positive");

  std::vector<PartLabelMap> maps;
  maps.reserve(C);
  for (int c = 0; c < C; ++c) maps.push_back(compute_label_map(response, catalog, c, options.bg_scale));

  ScoreReport report;
  report.scores.assign(C, 0.0);
  report.matched.assign(C, {});
  if (options.top_k && *options.top_k < C) {
    const auto order = rank_by_foreground(maps);
    report.evaluated_categories.assign(order.begin(), order.begin() + *options.top_k);
    std::sort(report.evaluated_categories.begin(), report.evaluated_categories.end());
  } else {
    report.evaluated_categories.resize(C);
    std::iota(report.evaluated_categories.begin(), report.evaluated_categories.end(), 0);
  }
  for (int c : report.evaluated_categories) {
    auto s = score_from_label_map(response, catalog, rules, maps[c]);
    report.scores[c] = s.score;
    report.matched[c] = std::move(s.matched);
  }
  report.prediction = argmax_over(report.scores, report.evaluated_categories);
  report.no_evidence = std::all_of(report.evaluated_categories.begin(), report.evaluated_categories.end(),
                                   [&](int c) { return report.scores[c] == 0.0; });
  return report;
}

std::vector<double> confidence_sum_scores(const ResponseMap& response, const PartCatalog& catalog,
                                          bool exclude_background) {
  require_channels(response, catalog);
  const int H = response.height(), W = response.width();
  std::vector<double> scores(catalog.num_categories(), 0.0);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      if (exclude_background) {
        bool background_wins = true;
        for (int k = 1; k < response.channels(); ++k) {
          if (response(k, i, j) > response.background(i, j)) {
            background_wins = false;
            break;
          }
        }
        if (background_wins) continue;
      }
      for (int c = 0; c < catalog.num_categories(); ++c) {
        for (int k : catalog.part_sets[c]) scores[c] += response(k, i, j);
      }
    }
  }
  return scores;
}

int predict_from_scores(const std::vector<double>& scores) {
  std::vector<int> all(scores.size());
  std::iota(all.begin(), all.end(), 0);
  return argmax_over(scores, all);
}

}  // namespace rock
