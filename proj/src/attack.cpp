#include "rock/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rock/util.hpp"

namespace rock {

using nlohmann::json;

namespace {

constexpr double kPixelScale = 255.0;

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_image_grid(const Tensor& x, const LabelGrid& grid, const char* what) {
  if (x.rank() != 3 || static_cast<int>(x.dim(1)) != grid.height() || static_cast<int>(x.dim(2)) != grid.width()) {
    fail(ErrorKind::ShapeMismatch, std::string(what) + " grid does not match image " + shape_string(x.shape()));
  }
}

/// x + step·sgn(direction), projected back into the ball around x0.
Tensor signed_step(const Tensor& x0, const Tensor& x, const Tensor& direction, double step, double epsilon) {
  Tensor moved = x;
  for (std::size_t k = 0; k < moved.size(); ++k) moved[k] += step * sgn(direction[k]);
  return pgd_project(x0, moved, epsilon);
}

}  // namespace

std::string to_string(AttackVariant v) {
  switch (v) {
    case AttackVariant::untargeted: return "untargeted";
    case AttackVariant::targeted: return "targeted";
    case AttackVariant::background: return "background";
    case AttackVariant::random: return "random";
    case AttackVariant::importance: return "importance";
    case AttackVariant::pgd_ce: return "pgd_ce";
    case AttackVariant::fgsm: return "fgsm";
    case AttackVariant::mim: return "mim";
    case AttackVariant::spsa: return "spsa";
    case AttackVariant::nes: return "nes";
  }
  return "?";
}

AttackVariant parse_variant(const std::string& name) {
  for (auto v : {AttackVariant::untargeted, AttackVariant::targeted, AttackVariant::background, AttackVariant::random,
                 AttackVariant::importance, AttackVariant::pgd_ce, AttackVariant::fgsm, AttackVariant::mim,
                 AttackVariant::spsa, AttackVariant::nes}) {
    if (to_string(v) == name) return v;
  }
  fail(ErrorKind::InvalidArgument, "unknown attack variant '" + name + "'");
}

bool is_adaptive(AttackVariant v) {
  return std::find(std::begin(kAdaptiveVariants), std::end(kAdaptiveVariants), v) != std::end(kAdaptiveVariants);
}

void validate(const AttackConfig& cfg) {
  if (!(cfg.epsilon >= 0.0)) fail(ErrorKind::InvalidArgument, "epsilon must be >= 0");
  if (cfg.steps < 0) fail(ErrorKind::InvalidArgument, "steps must be >= 0");
  if (cfg.steps > 0 && !(cfg.alpha > 0.0)) fail(ErrorKind::InvalidArgument, "alpha must be > 0 when steps > 0");
  if (!(cfg.momentum >= 0.0)) fail(ErrorKind::InvalidArgument, "momentum must be >= 0");
  if (!(cfg.sigma > 0.0)) fail(ErrorKind::InvalidArgument, "sigma must be > 0");
  if (cfg.n_samples <= 0) fail(ErrorKind::InvalidArgument, "n_samples must be > 0");
  if (!(cfg.bg_scale > 0.0)) fail(ErrorKind::InvalidArgument, "bg_scale must be > 0");
}

AttackConfig parse_attack_config(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::ParseError, "attack config must be a JSON object");
  AttackConfig cfg;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "variant") cfg.variant = parse_variant(value.get<std::string>());
      else if (key == "epsilon") cfg.epsilon = value.get<double>();
      else if (key == "alpha") cfg.alpha = value.get<double>();
      else if (key == "steps") cfg.steps = value.get<int>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "momentum") cfg.momentum = value.get<double>();
      else if (key == "sigma") cfg.sigma = value.get<double>();
      else if (key == "n_samples") cfg.n_samples = value.get<int>();
      else if (key == "target_label_source") {
        if (!value.is_null()) cfg.target_label_source = value.get<std::string>();
      } else if (key == "random_start") cfg.random_start = value.get<bool>();
      else if (key == "bg_scale") cfg.bg_scale = value.get<double>();
      else fail(ErrorKind::ParseError, "unknown attack config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("attack config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

json to_json(const AttackConfig& cfg) {
  json j{{"variant", to_string(cfg.variant)}, {"epsilon", cfg.epsilon},     {"alpha", cfg.alpha},
         {"steps", cfg.steps},                {"seed", cfg.seed},           {"momentum", cfg.momentum},
         {"sigma", cfg.sigma},                {"n_samples", cfg.n_samples}, {"random_start", cfg.random_start},
         {"bg_scale", cfg.bg_scale}};
  j["target_label_source"] = cfg.target_label_source ? json(*cfg.target_label_source) : json(nullptr);
  return j;
}

Tensor pgd_project(const Tensor& x0, const Tensor& x, double epsilon) {
  require_same_shape(x0, x, "pgd_project");
  const double e = epsilon / kPixelScale;
  Tensor out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double r = std::clamp(x[k] - x0[k], -e, e);
    out[k] = std::clamp(x0[k] + r, 0.0, 1.0);
  }
  return out;
}

std::optional<LabelGrid> make_adv_labels(AttackVariant variant, const LabelGrid& gt_labels, int num_parts,
                                         std::uint64_t seed, const std::optional<LabelGrid>& target_labels) {
  switch (variant) {
    case AttackVariant::untargeted:
      return std::nullopt;
    case AttackVariant::targeted:
      if (!target_labels) fail(ErrorKind::TargetLabelsRequired, "targeted variant needs another image's part labels");
      if (!target_labels->same_shape(gt_labels)) fail(ErrorKind::ShapeMismatch, "target labels differ in shape");
      return *target_labels;
    case AttackVariant::background:
      return LabelGrid(gt_labels.height(), gt_labels.width(), 0);
    case AttackVariant::random: {
      if (num_parts < 1) fail(ErrorKind::InvalidArgument, "random labels need at least one part");
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<int> pick(0, num_parts - 1);
      LabelGrid out(gt_labels.height(), gt_labels.width(), 0);
      for (std::size_t k = 0; k < out.size(); ++k) {
        const int gt = gt_labels[k];
        if (gt < 0 || gt > num_parts) fail(ErrorKind::LabelOutOfRange, "ground-truth label outside 0..K");
        const int u = pick(rng);
        out[k] = u >= gt ? u + 1 : u;
      }
      return out;
    }
    default:
      fail(ErrorKind::InvalidArgument, "variant '" + to_string(variant) + "' has no adversarial label set");
  }
}

std::optional<LabelGrid> make_adv_labels(AttackVariant variant, const LabelGrid& gt_labels, const PartCatalog& catalog,
                                         std::uint64_t seed, const std::optional<LabelGrid>& target_labels) {
  return make_adv_labels(variant, gt_labels, catalog.num_parts, seed, target_labels);
}

Tensor dag_weight_map(const LabelGrid& gt_labels, const LabelGrid* adv_labels, int channels) {
  const std::size_t N = gt_labels.size();
  Tensor w({static_cast<std::size_t>(channels), static_cast<std::size_t>(gt_labels.height()),
            static_cast<std::size_t>(gt_labels.width())});
  for (std::size_t t = 0; t < N; ++t) {
    const int l = gt_labels[t];
    if (l < 0 || l >= channels) fail(ErrorKind::LabelOutOfRange, "ground-truth label outside 0..K");
    w[l * N + t] -= 1.0;
    if (adv_labels) {
      const int la = (*adv_labels)[t];
      if (la < 0 || la >= channels) fail(ErrorKind::LabelOutOfRange, "adversarial label outside 0..K");
      w[la * N + t] += 1.0;
    }
  }
  return w;
}

AdversarialResult modified_dag(const Tensor& x, const GradientOracle& oracle, const LabelGrid& gt_labels,
                               const std::optional<LabelGrid>& adv_labels, const AttackConfig& cfg) {
  validate(cfg);
  require_image_grid(x, gt_labels, "ground-truth");
  const bool untargeted = cfg.variant == AttackVariant::untargeted;
  if (!untargeted && !adv_labels) fail(ErrorKind::MissingAdversarialLabels, "variant needs adversarial labels");
  if (!untargeted) require_image_grid(x, *adv_labels, "adversarial");

  AdversarialResult result{x, 0, {}};
  if (cfg.steps == 0) return result;
  const Tensor weights = dag_weight_map(gt_labels, untargeted ? nullptr : &*adv_labels, oracle.output_channels());

  const double step = cfg.alpha / kPixelScale;
  Tensor logits;
  for (int m = 0; m < cfg.steps; ++m) {
    const Tensor grad = oracle.input_gradient(result.x_adv, weights, &logits);
    ++result.queries;
    double objective = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) objective += weights[k] * logits[k];
    result.per_step_loss.push_back(objective);
    result.x_adv = signed_step(x, result.x_adv, grad, step, cfg.epsilon);
  }
  return result;
}

ImportanceSurrogate importance_surrogate(const Tensor& logits, const PartCatalog& catalog, const LinkageRuleSet& rules,
                                         int category, double bg_scale) {
  const ResponseMap response = ResponseMap::from_logits(logits);
  require_channels(response, catalog);
  ImportanceSurrogate out{0.0, Tensor(logits.shape())};
  const std::int64_t total = rules.rules.at(category).empty() ? 0 : rules.total_weight(category);
  if (total == 0) return out;

  const auto label_map = compute_label_map(response, catalog, category, bg_scale);
  const auto evidence = match_rules(label_map, catalog, rules);
  const int H = response.height(), W = response.width();
  const std::size_t N = static_cast<std::size_t>(H) * W;

  std::vector<double> coef(N, 0.0);
  bool any = false;
  for (const auto& ev : evidence) {
    if (!ev.matched || ev.rule.weight == 0) continue;
    any = true;
    const double w = static_cast<double>(ev.rule.weight) / static_cast<double>(total);
    for (std::size_t t = 0; t < N; ++t)
      if (ev.mask[t]) coef[t] += w;
  }
  if (!any) return out;

  const auto& parts = catalog.part_sets[category];
  const std::size_t K1 = static_cast<std::size_t>(response.channels());
  const Tensor& R = response.tensor();
  for (std::size_t t = 0; t < N; ++t) {
    if (coef[t] == 0.0) continue;
    int arg = parts.front();
    for (int k : parts)
      if (R[k * N + t] > R[arg * N + t]) arg = k;
    const double ra = R[arg * N + t];
    out.value += coef[t] * ra;
    // d softmax_a / d z_j = R_a (δ_aj - R_j)
    for (std::size_t j = 0; j < K1; ++j) {
      out.logit_weights[j * N + t] = coef[t] * ra * ((static_cast<int>(j) == arg ? 1.0 : 0.0) - R[j * N + t]);
    }
  }
  return out;
}

AdversarialResult importance_attack(const Tensor& x, const GradientOracle& oracle, const PartCatalog& catalog,
                                    const LinkageRuleSet& rules, int true_category, const AttackConfig& cfg) {
  validate(cfg);
  if (true_category < 0 || true_category >= catalog.num_categories()) {
    fail(ErrorKind::InvalidArgument, "true category out of range");
  }
  AdversarialResult result{x, 0, {}};
  const double step = cfg.alpha / kPixelScale;
  for (int m = 0; m < cfg.steps; ++m) {
    const Tensor logits = oracle.logits(result.x_adv);
    ++result.queries;
    const auto surrogate = importance_surrogate(logits, catalog, rules, true_category, cfg.bg_scale);
    result.per_step_loss.push_back(surrogate.value);
    const bool flat = std::all_of(surrogate.logit_weights.values().begin(), surrogate.logit_weights.values().end(),
                                  [](double v) { return v == 0.0; });
    if (flat) continue;
    const Tensor grad = oracle.input_gradient(result.x_adv, surrogate.logit_weights);
    ++result.queries;
    result.x_adv = signed_step(x, result.x_adv, grad, -step, cfg.epsilon);
  }
  return result;
}

AdversarialResult fgsm(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg) {
  validate(cfg);
  double loss = 0.0;
  const Tensor grad = oracle.loss_gradient(x, true_label, &loss);
  AdversarialResult result{signed_step(x, x, grad, cfg.epsilon / kPixelScale, cfg.epsilon), 1, {loss}};
  return result;
}

namespace {

AdversarialResult iterative_ce(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg,
                               bool use_momentum) {
  validate(cfg);
  AdversarialResult result{x, 0, {}};
  if (cfg.random_start && cfg.epsilon > 0.0) {
    std::mt19937_64 rng(cfg.seed);
    const double e = cfg.epsilon / kPixelScale;
    std::uniform_real_distribution<double> u(-e, e);
    Tensor start = x;
    for (auto& v : start.values()) v += u(rng);
    result.x_adv = pgd_project(x, start, cfg.epsilon);
  }
  const double step = cfg.alpha / kPixelScale;
  Tensor velocity(x.shape());
  for (int m = 0; m < cfg.steps; ++m) {
    double loss = 0.0;
    const Tensor grad = oracle.loss_gradient(result.x_adv, true_label, &loss);
    ++result.queries;
    result.per_step_loss.push_back(loss);
    if (!use_momentum) {
      result.x_adv = signed_step(x, result.x_adv, grad, step, cfg.epsilon);
      continue;
    }
    double l1 = 0.0;
    for (double g : grad.values()) l1 += std::abs(g);
    for (std::size_t k = 0; k < velocity.size(); ++k) {
      velocity[k] = cfg.momentum * velocity[k] + (l1 > 0.0 ? grad[k] / l1 : 0.0);
    }
    result.x_adv = signed_step(x, result.x_adv, velocity, step, cfg.epsilon);
  }
  return result;
}

}  // namespace

AdversarialResult pgd_ce(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg) {
  return iterative_ce(x, oracle, true_label, cfg, false);
}

AdversarialResult mim(const Tensor& x, const ClassifierOracle& oracle, int true_label, const AttackConfig& cfg) {
  return iterative_ce(x, oracle, true_label, cfg, true);
}

GradientEstimate estimate_gradient(const ScoreFn& score, const Tensor& x, AttackVariant variant, double sigma,
                                   int n_samples, std::uint64_t stream_seed) {
  if (variant != AttackVariant::spsa && variant != AttackVariant::nes) {
    fail(ErrorKind::InvalidArgument, "gradient estimation needs the spsa or nes variant");
  }
  std::mt19937_64 rng(stream_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  GradientEstimate est{Tensor(x.shape()), 0};
  Tensor delta(x.shape());
  Tensor probe(x.shape());
  for (int s = 0; s < n_samples; ++s) {
    if (variant == AttackVariant::spsa) {
      for (auto& d : delta.values()) d = (rng() >> 63) ? 1.0 : -1.0;
    } else {
      for (auto& d : delta.values()) d = gauss(rng);
    }
    for (std::size_t k = 0; k < x.size(); ++k) probe[k] = x[k] + sigma * delta[k];
    const double plus = score(probe);
    for (std::size_t k = 0; k < x.size(); ++k) probe[k] = x[k] - sigma * delta[k];
    const double minus = score(probe);
    est.queries += 2;
    est.mean_score += (plus + minus) / (2.0 * n_samples);
    const double diff = plus - minus;
    if (diff == 0.0) continue;
    for (std::size_t k = 0; k < x.size(); ++k) est.gradient[k] += diff * delta[k];
  }
  const double scale = 1.0 / (2.0 * n_samples * sigma);
  for (auto& g : est.gradient.values()) g *= scale;
  return est;
}

namespace {

AdversarialResult estimated_descent(const Tensor& x, const ScoreFn& score, const AttackConfig& cfg,
                                    AttackVariant variant) {
  validate(cfg);
  AdversarialResult result{x, 0, {}};
  const double step = cfg.alpha / kPixelScale;
  for (int m = 0; m < cfg.steps; ++m) {
    const auto est = estimate_gradient(score, result.x_adv, variant, cfg.sigma, cfg.n_samples,
                                       derive_seed(cfg.seed, static_cast<std::uint64_t>(m)));
    result.queries += est.queries;
    result.per_step_loss.push_back(est.mean_score);
    result.x_adv = signed_step(x, result.x_adv, est.gradient, -step, cfg.epsilon);
  }
  return result;
}

}  // namespace

AdversarialResult spsa_attack(const Tensor& x, const ScoreFn& score, const AttackConfig& cfg) {
  return estimated_descent(x, score, cfg, AttackVariant::spsa);
}

AdversarialResult nes_attack(const Tensor& x, const ScoreFn& score, const AttackConfig& cfg) {
  return estimated_descent(x, score, cfg, AttackVariant::nes);
}

json to_json(const AttackReport& report) {
  return json{{"variant", to_string(report.config.variant)},
              {"epsilon", report.config.epsilon},
              {"alpha", report.config.alpha},
              {"steps", report.config.steps},
              {"seed", report.config.seed},
              {"queries", report.queries},
              {"final_score", report.final_score},
              {"success", report.success}};
}

void check_budget(const Tensor& x, const Tensor& x_adv, double epsilon) {
  require_same_shape(x, x_adv, "check_budget");
  const double bound = epsilon / kPixelScale + 1e-9;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (!(std::abs(x_adv[k] - x[k]) <= bound)) {
      fail(ErrorKind::InvalidArgument, "perturbation exceeds the epsilon ball at element " + std::to_string(k));
    }
    if (!(x_adv[k] >= 0.0 && x_adv[k] <= 1.0)) {
      fail(ErrorKind::InvalidArgument, "adversarial value outside [0,1] at element " + std::to_string(k));
    }
  }
}

}  // namespace rock
