#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "rock/attack.hpp"
#include "rock/datagen.hpp"
#include "rock/model.hpp"

using namespace rock;

namespace {

// F_k(x, t) = Σ_c W[k][c]·x[c, t]: a per-pixel linear segmenter.
class LinearSegmenter final : public GradientOracle {
 public:
  explicit LinearSegmenter(std::vector<std::vector<double>> w) : w_(std::move(w)) {}
  int output_channels() const override { return static_cast<int>(w_.size()); }
  Tensor logits(const Tensor& x) const override {
    const std::size_t N = x.dim(1) * x.dim(2);
    Tensor out({w_.size(), x.dim(1), x.dim(2)});
    for (std::size_t k = 0; k < w_.size(); ++k)
      for (std::size_t c = 0; c < x.dim(0); ++c)
        for (std::size_t t = 0; t < N; ++t) out[k * N + t] += w_[k][c] * x[c * N + t];
    return out;
  }
  Tensor input_gradient(const Tensor& x, const Tensor& weights, Tensor* logits_out) const override {
    if (logits_out) *logits_out = logits(x);
    const std::size_t N = x.dim(1) * x.dim(2);
    Tensor g(x.shape());
    for (std::size_t k = 0; k < w_.size(); ++k)
      for (std::size_t c = 0; c < x.dim(0); ++c)
        for (std::size_t t = 0; t < N; ++t) g[c * N + t] += w_[k][c] * weights[k * N + t];
    return g;
  }

 private:
  std::vector<std::vector<double>> w_;
};

// Two-class linear classifier z = (⟨a, x⟩, 0).
class LinearClassifier final : public ClassifierOracle {
 public:
  explicit LinearClassifier(Tensor a) : a_(std::move(a)) {}
  std::vector<double> logits(const Tensor& x) const override {
    double s = 0;
    for (std::size_t k = 0; k < x.size(); ++k) s += a_[k] * x[k];
    return {s, 0.0};
  }
  Tensor loss_gradient(const Tensor& x, int label, double* loss_out) const override {
    const auto z = logits(x);
    if (loss_out) *loss_out = cross_entropy(z, label);
    const auto dz = cross_entropy_gradient(z, label);
    Tensor g(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) g[k] = dz[0] * a_[k];
    return g;
  }

 private:
  Tensor a_;
};

Tensor random_image(std::mt19937_64& rng, std::size_t H, std::size_t W) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({3, H, W});
  for (auto& v : x.values()) v = u(rng);
  return x;
}

LabelGrid random_labels(std::mt19937_64& rng, int H, int W, int K) {
  std::uniform_int_distribution<int> d(0, K);
  LabelGrid g(H, W);
  for (auto& v : g.storage()) v = d(rng);
  return g;
}

AttackConfig config(AttackVariant v, double eps, int steps, double alpha = 1.0) {
  AttackConfig c;
  c.variant = v;
  c.epsilon = eps;
  c.steps = steps;
  c.alpha = alpha;
  c.n_samples = 4;
  return c;
}

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) ab += a[k] * b[k], aa += a[k] * a[k], bb += b[k] * b[k];
  return ab / std::sqrt(aa * bb);
}

// Two categories of two touching rectangles each, small enough to train in a
// fraction of a second.
DatasetSpec pair_spec() {
  DatasetSpec spec;
  spec.height = spec.width = 16;
  spec.min_object_size = 10;
  spec.max_object_size = 13;
  spec.train_per_category = 40;
  spec.val_per_category = 20;
  spec.categories = {{"pair",
                      {{"left", Shape::rectangle, {0.0, 0.1, 0.5, 0.9}, {0.85, 0.25, 0.2}},
                       {"right", Shape::rectangle, {0.5, 0.1, 1.0, 0.9}, {0.2, 0.35, 0.85}}},
                      {{0, 1}}},
                     {"stack",
                      {{"lower", Shape::rectangle, {0.1, 0.5, 0.9, 1.0}, {0.25, 0.8, 0.3}},
                       {"upper", Shape::rectangle, {0.1, 0.0, 0.9, 0.5}, {0.9, 0.85, 0.2}}},
                      {{0, 1}}}};
  return spec;
}

}  // namespace

TEST_CASE("projection") {
  Tensor x0({1, 1, 3}, 0.5);
  x0[2] = 0.999;
  Tensor x = x0;
  x[0] = 0.9;
  x[1] = 0.5 + 2 * 8 / 255.0;
  x[2] = 0.999 + 8 / 255.0;
  CHECK(pgd_project(x0, x, 0.0) == x0);
  const Tensor p = pgd_project(x0, x, 8.0);
  CHECK(p[0] == doctest::Approx(0.5 + 8 / 255.0));
  CHECK(p[1] == doctest::Approx(0.5 + 8 / 255.0));
  CHECK(p[2] == 1.0);
  CHECK_NOTHROW(check_budget(x0, p, 8.0));
  CHECK_THROWS_AS(check_budget(x0, x, 8.0), Error);
}

TEST_CASE("modified DAG") {
  std::mt19937_64 rng(4);
  const LinearSegmenter oracle({{0.5, -1.0, 2.0}, {1.5, 0.25, -0.5}, {-2.0, 1.0, 1.0}});
  const Tensor x = random_image(rng, 4, 4);
  const LabelGrid gt = random_labels(rng, 4, 4, 2);
  const LabelGrid adv = random_labels(rng, 4, 4, 2);

  CHECK(modified_dag(x, oracle, gt, adv, config(AttackVariant::targeted, 8, 0)).x_adv == x);
  CHECK(modified_dag(x, oracle, gt, adv, config(AttackVariant::targeted, 0, 40)).x_adv == x);
  CHECK(modified_dag(x, oracle, gt, gt, config(AttackVariant::targeted, 8, 10)).x_adv == x);

  SUBCASE("one step on a single pixel") {
    Tensor px({3, 1, 1});
    px[0] = 0.2, px[1] = 0.5, px[2] = 0.999;
    const LabelGrid l(1, 1, 0), la(1, 1, 2);
    const auto r = modified_dag(px, oracle, l, la, config(AttackVariant::targeted, 8, 1, 2.0));
    const std::vector<double> w0{0.5, -1.0, 2.0}, w2{-2.0, 1.0, 1.0};
    for (int c = 0; c < 3; ++c) {
      const double d = w2[c] - w0[c];
      const double expect = std::clamp(px[c] + 2.0 / 255.0 * ((d > 0) - (d < 0)), 0.0, 1.0);
      CHECK(r.x_adv[c] == doctest::Approx(expect).epsilon(1e-15));
    }
    CHECK(r.queries == 1);
  }
  SUBCASE("untargeted uses only the ground-truth term") {
    const Tensor w = dag_weight_map(gt, nullptr, 3);
    double total = 0;
    for (double v : w.values()) total += v;
    CHECK(total == -16.0);
    const auto r = modified_dag(x, oracle, gt, std::nullopt, config(AttackVariant::untargeted, 8, 5));
    CHECK(r.per_step_loss.size() == 5);
    CHECK(r.per_step_loss.back() >= r.per_step_loss.front());
  }
  SUBCASE("errors") {
    try {
      modified_dag(x, oracle, gt, std::nullopt, config(AttackVariant::targeted, 8, 3));
      FAIL("expected MissingAdversarialLabels");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MissingAdversarialLabels);
    }
    CHECK_THROWS_AS(modified_dag(x, oracle, LabelGrid(3, 3), std::nullopt, config(AttackVariant::untargeted, 8, 1)),
                    Error);
    CHECK_THROWS_AS(modified_dag(x, oracle, gt, adv, config(AttackVariant::targeted, 8, 1, 0.0)), Error);
  }
}

TEST_CASE("adversarial label sets") {
  std::mt19937_64 rng(10);
  const LabelGrid gt = random_labels(rng, 5, 5, 6);

  CHECK_FALSE(make_adv_labels(AttackVariant::untargeted, gt, 6, 1).has_value());
  const auto bg = make_adv_labels(AttackVariant::background, gt, 6, 1);
  CHECK(std::all_of(bg->storage().begin(), bg->storage().end(), [](int v) { return v == 0; }));
  try {
    make_adv_labels(AttackVariant::targeted, gt, 6, 1);
    FAIL("expected TargetLabelsRequired");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TargetLabelsRequired);
  }
  const LabelGrid other = random_labels(rng, 5, 5, 6);
  CHECK(*make_adv_labels(AttackVariant::targeted, gt, 6, 1, other) == other);

  const auto r1 = make_adv_labels(AttackVariant::random, gt, 6, 99);
  const auto r2 = make_adv_labels(AttackVariant::random, gt, 6, 99);
  CHECK(*r1 == *r2);
  CHECK(*r1 != *make_adv_labels(AttackVariant::random, gt, 6, 100));

  // 10^4 pixels sharing one ground-truth label; the other six values must be
  // hit uniformly.
  const LabelGrid flat(100, 100, 3);
  const auto r = make_adv_labels(AttackVariant::random, flat, 6, 2024);
  std::map<int, int> hist;
  for (int v : r->storage()) ++hist[v];
  CHECK(hist.count(3) == 0);
  CHECK(hist.size() == 6);
  const double expected = 1e4 / 6, sd = std::sqrt(1e4 * (1.0 / 6) * (5.0 / 6));
  double chi2 = 0;
  for (auto [v, n] : hist) {
    CHECK(std::abs(n - expected) <= 3 * sd);
    chi2 += (n - expected) * (n - expected) / expected;
  }
  CHECK(chi2 < 20.52);  // df = 5, p = 0.001

  for (int trial = 0; trial < 20; ++trial) {
    const LabelGrid g = random_labels(rng, 8, 8, 4);
    const auto a = make_adv_labels(AttackVariant::random, g, 4, trial);
    for (std::size_t k = 0; k < g.size(); ++k) REQUIRE((*a)[k] != g[k]);
  }
}

TEST_CASE("classifier attacks") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor a({3, 4, 4});
  for (auto& v : a.values()) v = n(rng);
  const LinearClassifier oracle(a);
  const Tensor x = random_image(rng, 4, 4);

  CHECK(fgsm(x, oracle, 0, config(AttackVariant::fgsm, 0, 1)).x_adv == x);

  const auto one = pgd_ce(x, oracle, 0, config(AttackVariant::pgd_ce, 8, 1));
  CHECK(cross_entropy(oracle.logits(one.x_adv), 0) > cross_entropy(oracle.logits(x), 0));

  auto mcfg = config(AttackVariant::mim, 8, 40);
  mcfg.momentum = 0.0;
  const auto m0 = mim(x, oracle, 0, mcfg);
  const auto p0 = pgd_ce(x, oracle, 0, config(AttackVariant::pgd_ce, 8, 40));
  CHECK(m0.x_adv == p0.x_adv);
  CHECK(m0.per_step_loss == p0.per_step_loss);

  mcfg.momentum = 1.0;
  CHECK(mim(x, oracle, 0, mcfg).x_adv == mim(x, oracle, 0, mcfg).x_adv);

  auto rs = config(AttackVariant::pgd_ce, 8, 3);
  rs.random_start = true;
  rs.seed = 5;
  const auto s1 = pgd_ce(x, oracle, 0, rs);
  CHECK(s1.x_adv == pgd_ce(x, oracle, 0, rs).x_adv);
  CHECK_NOTHROW(check_budget(x, s1.x_adv, 8));
}

TEST_CASE("gradient estimation") {
  std::mt19937_64 rng(100);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor g({100});
  for (auto& v : g.values()) v = n(rng);
  const ScoreFn linear = [&](const Tensor& x) {
    double s = 0;
    for (std::size_t k = 0; k < x.size(); ++k) s += g[k] * x[k];
    return s;
  };
  const Tensor x({100}, 0.5);

  SUBCASE("constant objective") {
    const ScoreFn flat = [](const Tensor&) { return 3.0; };
    const auto est = estimate_gradient(flat, x, AttackVariant::spsa, 0.001, 16, 1);
    for (double v : est.gradient.values()) CHECK(v == 0.0);
    auto cfg = config(AttackVariant::spsa, 8, 5);
    CHECK(spsa_attack(x, flat, cfg).x_adv == x);
  }
  SUBCASE("linear objective") {
    // For a linear f the antithetic estimate is (1/n)·Σ⟨g,Δ⟩Δ, so its error
    // energy is (d-1)/n·‖g‖² (Rademacher) or (d+1)/n·‖g‖² (Gaussian).
    for (auto variant : {AttackVariant::spsa, AttackVariant::nes}) {
      const double spread = variant == AttackVariant::spsa ? 99.0 : 101.0;
      double mean_cos = 0;
      for (std::uint64_t seed = 0; seed < 20; ++seed)
        mean_cos += cosine(estimate_gradient(linear, x, variant, 0.001, 128, seed).gradient, g) / 20;
      CHECK(mean_cos == doctest::Approx(1.0 / std::sqrt(1.0 + spread / 128)).epsilon(0.05));
      CHECK(cosine(estimate_gradient(linear, x, variant, 0.001, 1024, 7).gradient, g) > 0.9);

      Tensor avg({100});
      for (std::uint64_t seed = 0; seed < 4000; ++seed) {
        const auto e = estimate_gradient(linear, x, variant, 0.001, 1, seed);
        for (std::size_t k = 0; k < 100; ++k) avg[k] += e.gradient[k] / 4000;
      }
      CHECK(cosine(avg, g) > 0.97);
    }
  }
  SUBCASE("query accounting and descent") {
    auto cfg = config(AttackVariant::spsa, 8, 40);
    cfg.n_samples = 128;
    cfg.seed = 3;
    const auto r = spsa_attack(x, linear, cfg);
    CHECK(r.queries == 10240);
    CHECK(r.per_step_loss.size() == 40);
    CHECK(linear(r.x_adv) < linear(x));
    CHECK_NOTHROW(check_budget(x, r.x_adv, 8));
    CHECK(r.x_adv == spsa_attack(x, linear, cfg).x_adv);
    cfg.variant = AttackVariant::nes;
    CHECK(nes_attack(x, linear, cfg).queries == 10240);
  }
  CHECK_THROWS_AS(estimate_gradient(linear, x, AttackVariant::fgsm, 0.001, 4, 1), Error);
}

TEST_CASE("importance attack") {
  const DatasetSpec spec = pair_spec();
  const Dataset data = generate(spec);
  const auto rules = estimate_rule_weights(data.catalog, data.skeleton, ground_truth(data.train));
  TrainConfig tc;
  tc.epochs = 15;
  tc.batch_size = 8;
  tc.learning_rate = 0.05;
  const auto seg = train_segmenter(init_seg_model({3, 6, 6}, 5, 1), data.train, tc).model;
  const SegModelOracle oracle(seg);

  int steps = 0, non_increasing = 0, started_matched = 0;
  for (int s = 0; s < 20; ++s) {
    const auto& sample = data.val[2 * s];
    const auto r = importance_attack(sample.image, oracle, data.catalog, rules, 0,
                                     config(AttackVariant::importance, 8, 10));
    CHECK_NOTHROW(check_budget(sample.image, r.x_adv, 8));
    if (r.per_step_loss.front() > 0) ++started_matched;
    for (std::size_t m = 1; m < r.per_step_loss.size(); ++m, ++steps)
      if (r.per_step_loss[m] <= r.per_step_loss[m - 1]) ++non_increasing;
  }
  CHECK(started_matched >= 15);
  CHECK(non_increasing >= 0.8 * steps);

  const auto& x = data.val[0].image;
  CHECK(importance_attack(x, oracle, data.catalog, rules, 0, config(AttackVariant::importance, 8, 0)).x_adv == x);
  const auto unobserved = with_uniform_weights(rules, 0);
  const auto flat = importance_attack(x, oracle, data.catalog, unobserved, 0, config(AttackVariant::importance, 8, 5));
  CHECK(flat.x_adv == x);
  for (double v : flat.per_step_loss) CHECK(v == 0.0);

  // Surrogate gradient against finite differences on the logits.
  const Tensor logits = oracle.logits(x);
  const auto sur = importance_surrogate(logits, data.catalog, rules, 0);
  REQUIRE(sur.value > 0);
  for (std::size_t k = 0; k < logits.size(); k += 7) {
    Tensor zp = logits, zm = logits;
    zp[k] += 1e-5;
    zm[k] -= 1e-5;
    const auto sp = importance_surrogate(zp, data.catalog, rules, 0);
    const auto sm = importance_surrogate(zm, data.catalog, rules, 0);
    const double fd = (sp.value - sm.value) / 2e-5;
    CHECK(std::abs(sur.logit_weights[k] - fd) <= 1e-4 * std::abs(fd) + 1e-8);
  }
}

TEST_CASE("budget invariants over the attack grid") {
  std::mt19937_64 rng(55);
  const SegModel seg = init_seg_model({3, 4, 4}, 4, 3);
  const RowModel row = init_row_model({3, 4, 4}, 2, 4);
  const SegModelOracle so(seg);
  const RowModelOracle ro(row);
  const PartCatalog cat = make_catalog({2, 1});
  LinkageRuleSet rules{{{make_rule(1, 2, 3)}, {}}};
  const Tensor x = random_image(rng, 6, 6);
  const LabelGrid gt = random_labels(rng, 6, 6, 3);
  const LabelGrid other = random_labels(rng, 6, 6, 3);
  const ScoreFn score = [&](const Tensor& in) { return row_forward(row, in)[0]; };

  for (auto v : {AttackVariant::untargeted, AttackVariant::targeted, AttackVariant::background, AttackVariant::random,
                 AttackVariant::importance, AttackVariant::pgd_ce, AttackVariant::fgsm, AttackVariant::mim,
                 AttackVariant::spsa, AttackVariant::nes}) {
    for (double eps : {0.0, 1.0, 8.0, 16.0}) {
      for (int steps : {0, 1, 4}) {
        auto cfg = config(v, eps, steps, eps > 0 ? eps / 4 : 1.0);
        cfg.seed = 9;
        Tensor out;
        switch (v) {
          case AttackVariant::importance:
            out = importance_attack(x, so, cat, rules, 0, cfg).x_adv;
            break;
          case AttackVariant::pgd_ce:
            out = pgd_ce(x, ro, 1, cfg).x_adv;
            break;
          case AttackVariant::fgsm:
            out = fgsm(x, ro, 1, cfg).x_adv;
            break;
          case AttackVariant::mim:
            out = mim(x, ro, 1, cfg).x_adv;
            break;
          case AttackVariant::spsa:
            out = spsa_attack(x, score, cfg).x_adv;
            break;
          case AttackVariant::nes:
            out = nes_attack(x, score, cfg).x_adv;
            break;
          default:
            out = modified_dag(x, so, gt, make_adv_labels(v, gt, 3, 1, other), cfg).x_adv;
        }
        INFO(to_string(v) << " eps " << eps << " steps " << steps);
        CHECK(linf_distance(out, x) <= eps / 255 + 1e-9);
        CHECK(std::all_of(out.values().begin(), out.values().end(), [](double u) { return u >= 0 && u <= 1; }));
        if (eps == 0 || (steps == 0 && v != AttackVariant::fgsm)) CHECK(out == x);
      }
    }
  }
}

TEST_CASE("attack configs") {
  const auto cfg = parse_attack_config(nlohmann::json{{"variant", "mim"}, {"epsilon", 4}, {"momentum", 0.5}});
  CHECK(cfg.variant == AttackVariant::mim);
  CHECK(cfg.epsilon == 4);
  CHECK(parse_attack_config(to_json(cfg)).momentum == 0.5);
  CHECK_THROWS_AS(parse_attack_config(nlohmann::json{{"epsilonn", 4}}), Error);
  CHECK_THROWS_AS(parse_attack_config(nlohmann::json{{"sigma", 0}}), Error);
  CHECK_THROWS_AS(parse_variant("dag"), Error);
  for (auto v : kAdaptiveVariants) {
    CHECK(is_adaptive(v));
    CHECK(parse_variant(to_string(v)) == v);
  }
  AttackReport rep{cfg, 12, -0.5, true};
  CHECK(to_json(rep).at("queries") == 12);
}
