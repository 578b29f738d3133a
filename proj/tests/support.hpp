#pragma once

#include <random>
#include <vector>

#include "oracles.hpp"
#include "rock/catalog.hpp"
#include "rock/judgment.hpp"
#include "rock/tensor.hpp"

namespace testing {

inline rock::Tensor to_tensor(const oracle::Cube& R) {
  const std::size_t K1 = R.size(), H = R[0].size(), W = R[0][0].size();
  rock::Tensor t({K1, H, W});
  for (std::size_t k = 0; k < K1; ++k)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) t.at(k, i, j) = R[k][i][j];
  return t;
}

inline rock::LabelGrid to_labels(const oracle::Grid& g) {
  rock::LabelGrid out(static_cast<int>(g.size()), static_cast<int>(g[0].size()));
  for (int i = 0; i < out.height(); ++i)
    for (int j = 0; j < out.width(); ++j) out(i, j) = g[i][j];
  return out;
}

inline oracle::Grid from_mask(const rock::Mask& m) {
  oracle::Grid g(m.height(), std::vector<int>(m.width()));
  for (int i = 0; i < m.height(); ++i)
    for (int j = 0; j < m.width(); ++j) g[i][j] = m(i, j);
  return g;
}

inline rock::Mask to_mask(const oracle::Grid& g) {
  rock::Mask m(static_cast<int>(g.size()), static_cast<int>(g[0].size()));
  for (int i = 0; i < m.height(); ++i)
    for (int j = 0; j < m.width(); ++j) m(i, j) = g[i][j] ? 1 : 0;
  return m;
}

// Random split of K parts into C non-empty consecutive blocks.
inline std::vector<int> random_sizes(std::mt19937_64& rng, int C, int K) {
  std::vector<int> sizes(C, 1);
  std::uniform_int_distribution<int> pick(0, C - 1);
  for (int extra = K - C; extra > 0; --extra) ++sizes[pick(rng)];
  return sizes;
}

// Every part pair of each category becomes a rule with probability 0.7 and a
// random count in [0, 5].
inline rock::LinkageRuleSet random_rules(std::mt19937_64& rng, const rock::PartCatalog& catalog) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> n(0, 5);
  rock::LinkageRuleSet rs;
  rs.rules.resize(catalog.num_categories());
  for (int c = 0; c < catalog.num_categories(); ++c) {
    const auto& parts = catalog.part_sets[c];
    for (std::size_t x = 0; x < parts.size(); ++x)
      for (std::size_t y = x + 1; y < parts.size(); ++y)
        if (u(rng) < 0.7) rs.rules[c].push_back(rock::make_rule(parts[x], parts[y], n(rng)));
  }
  return rs;
}

inline std::vector<std::vector<oracle::Rule>> to_oracle_rules(const rock::LinkageRuleSet& rs) {
  std::vector<std::vector<oracle::Rule>> out(rs.rules.size());
  for (std::size_t c = 0; c < rs.rules.size(); ++c)
    for (const auto& r : rs.rules[c]) out[c].push_back({r.a, r.b, r.weight});
  return out;
}

}  // namespace testing
