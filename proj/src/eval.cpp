#include "rock/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "rock/util.hpp"

namespace rock {

using nlohmann::json;

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::rock: return "rock";
    case ModelKind::row: return "row";
    case ModelKind::ablation_woK: return "ablation-woK";
    case ModelKind::ablation_woW: return "ablation-woW";
    case ModelKind::ablation_woP: return "ablation-woP";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  for (auto k : {ModelKind::rock, ModelKind::row, ModelKind::ablation_woK, ModelKind::ablation_woW,
                 ModelKind::ablation_woP}) {
    if (to_string(k) == name) return k;
  }
  fail(ErrorKind::InvalidArgument, "unknown model '" + name + "'");
}

EvalConfig parse_eval_config(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::ParseError, "eval config must be a JSON object");
  EvalConfig cfg;
  try {
    for (const auto& [key, v] : doc.items()) {
      if (key == "models") {
        cfg.models.clear();
        for (const auto& m : v) cfg.models.push_back(parse_model_kind(m.get<std::string>()));
      } else if (key == "attacks") {
        cfg.attacks.clear();
        for (const auto& a : v) cfg.attacks.push_back(parse_variant(a.get<std::string>()));
      } else if (key == "epsilons") cfg.epsilons = v.get<std::vector<double>>();
      else if (key == "steps") cfg.steps = v.get<int>();
      else if (key == "alpha") {
        if (!v.is_null()) cfg.alpha = v.get<double>();
      } else if (key == "momentum") cfg.momentum = v.get<double>();
      else if (key == "sigma") cfg.sigma = v.get<double>();
      else if (key == "n_samples") cfg.n_samples = v.get<int>();
      else if (key == "worst_case") cfg.worst_case = v.get<bool>();
      else if (key == "top_k") {
        if (!v.is_null()) cfg.judgment.top_k = v.get<int>();
      } else if (key == "bg_scale") cfg.judgment.bg_scale = v.get<double>();
      else if (key == "max_images") cfg.max_images = v.get<std::size_t>();
      else if (key == "max_query_images") cfg.max_query_images = v.get<std::size_t>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else fail(ErrorKind::ParseError, "unknown eval config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("eval config: ") + e.what());
  }
  return cfg;
}

const EvalRow* EvalReport::find(const std::string& model, const std::string& attack, double epsilon,
                                const std::string& option) const {
  for (const auto& r : rows) {
    if (r.model == model && r.attack == attack && r.epsilon == epsilon && r.option == option) return &r;
  }
  return nullptr;
}

int rock_predict(const SegModel& segmenter, const PartCatalog& catalog, const LinkageRuleSet& rules,
                 const JudgmentOptions& options, const Tensor& x) {
  const auto report = classify(ResponseMap::from_logits(forward(segmenter, x)), catalog, rules, options);
  return report.no_evidence ? -1 : report.prediction;
}

namespace {

double margin_of(const std::vector<double>& scores, int true_category) {
  double other = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < static_cast<int>(scores.size()); ++c)
    if (c != true_category) other = std::max(other, scores[c]);
  return scores.at(true_category) - other;
}

}  // namespace

double rock_margin(const SegModel& segmenter, const PartCatalog& catalog, const LinkageRuleSet& rules,
                   const JudgmentOptions& options, const Tensor& x, int true_category) {
  const auto report = classify(ResponseMap::from_logits(forward(segmenter, x)), catalog, rules, options);
  return margin_of(report.scores, true_category);
}

namespace {

/// A model as seen by the evaluator: scores for an image, and how a
/// prediction is read off them.
struct Judge {
  std::string name;
  std::string option;
  /// Which white-box source its adaptive examples come from: "parts", "object" or "" (none).
  std::string adaptive_source;
  std::function<std::vector<double>(const Tensor&)> scores;
  /// True for ROCK-style judges whose all-zero score vector means "no evidence".
  bool zero_is_abstain = false;

  int predict(const Tensor& x) const {
    const auto s = scores(x);
    if (zero_is_abstain && std::all_of(s.begin(), s.end(), [](double v) { return v == 0.0; })) return -1;
    return predict_from_scores(s);
  }
};

std::vector<Judge> build_judges(const EvalModels& m, const EvalConfig& cfg) {
  std::vector<Judge> judges;
  const auto opts = cfg.judgment;
  for (auto kind : cfg.models) {
    switch (kind) {
      case ModelKind::rock:
      case ModelKind::ablation_woW: {
        if (!m.segmenter) fail(ErrorKind::InvalidArgument, "part segmenter required for " + to_string(kind));
        const auto rules = kind == ModelKind::rock ? m.rules : with_uniform_weights(m.rules);
        const SegModel* seg = m.segmenter;
        const PartCatalog* cat = &m.catalog;
        judges.push_back({to_string(kind), "", "parts",
                          [seg, cat, rules, opts](const Tensor& x) {
                            return classify(ResponseMap::from_logits(forward(*seg, x)), *cat, rules, opts).scores;
                          },
                          true});
        break;
      }
      case ModelKind::ablation_woK: {
        if (!m.segmenter) fail(ErrorKind::InvalidArgument, "part segmenter required for ablation-woK");
        for (bool fg : {false, true}) {
          const SegModel* seg = m.segmenter;
          const PartCatalog* cat = &m.catalog;
          judges.push_back({to_string(kind), fg ? "foreground" : "all-pixels", "parts",
                            [seg, cat, fg](const Tensor& x) {
                              return confidence_sum_scores(ResponseMap::from_logits(forward(*seg, x)), *cat, fg);
                            },
                            false});
        }
        break;
      }
      case ModelKind::ablation_woP: {
        if (!m.object_segmenter) fail(ErrorKind::InvalidArgument, "object segmenter required for ablation-woP");
        const SegModel* seg = m.object_segmenter;
        auto cat = std::make_shared<PartCatalog>(object_catalog(m.catalog));
        judges.push_back({to_string(kind), "", "object",
                          [seg, cat](const Tensor& x) {
                            return confidence_sum_scores(ResponseMap::from_logits(forward(*seg, x)), *cat, false);
                          },
                          false});
        break;
      }
      case ModelKind::row: {
        if (!m.baseline) fail(ErrorKind::InvalidArgument, "baseline model required for row");
        const RowModel* row = m.baseline;
        judges.push_back({"row", "", "", [row](const Tensor& x) { return row_forward(*row, x); }, false});
        break;
      }
    }
  }
  return judges;
}

AttackConfig attack_config(const EvalConfig& cfg, AttackVariant v, double eps, std::uint64_t seed) {
  AttackConfig a;
  a.variant = v;
  a.epsilon = eps;
  a.alpha = cfg.alpha ? *cfg.alpha : eps / 8.0;
  a.steps = cfg.steps;
  a.seed = seed;
  a.momentum = cfg.momentum;
  a.sigma = cfg.sigma;
  a.n_samples = cfg.n_samples;
  a.bg_scale = cfg.judgment.bg_scale;
  if (a.steps > 0 && !(a.alpha > 0.0)) a.alpha = 1.0;  // ε = 0: step size is irrelevant
  return a;
}

/// Target grid for the targeted variant: the part labels of a pool image of
/// another category, chosen by seed.
LabelGrid pick_target(const Sample& s, std::span<const Sample> pool, std::uint64_t seed) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].category != s.category && pool[i].parts.same_shape(s.parts)) candidates.push_back(i);
  if (candidates.empty()) fail(ErrorKind::TargetLabelsRequired, "no image of another category to target");
  return pool[candidates[mix64(seed) % candidates.size()]].parts;
}

}  // namespace

EvalReport run_eval(const EvalModels& models, std::span<const Sample> samples, const EvalConfig& cfg,
                    std::span<const Sample> target_pool) {
  const auto started = std::chrono::steady_clock::now();
  if (samples.empty()) fail(ErrorKind::EmptyDataset, "no evaluation images");
  if (target_pool.empty()) target_pool = samples;
  const auto judges = build_judges(models, cfg);

  std::vector<AttackVariant> attacks = cfg.attacks;
  if (cfg.worst_case) {
    for (auto v : kAdaptiveVariants)
      if (std::find(attacks.begin(), attacks.end(), v) == attacks.end()) attacks.push_back(v);
  }

  const std::size_t n_white = cfg.max_images ? std::min(cfg.max_images, samples.size()) : samples.size();
  const std::size_t n_query = cfg.max_query_images ? std::min(cfg.max_query_images, samples.size()) : samples.size();
  const auto white = samples.first(n_white);
  const auto query = samples.first(n_query);
  const PartCatalog obj_catalog = object_catalog(models.catalog);
  const std::uint64_t attack_root = derive_seed(cfg.seed, "attack");

  EvalReport report;
  auto add_row = [&](const Judge& j, const std::string& attack, double eps, const std::vector<int>& hits) {
    EvalRow row{j.name, attack, eps, j.option, 0, static_cast<int>(hits.size()), false};
    for (int h : hits) row.correct += h;
    report.rows.push_back(row);
  };

  // Benign.
  for (const auto& j : judges) {
    std::vector<int> hits(white.size());
    parallel_for(white.size(), [&](std::size_t n) { hits[n] = j.predict(white[n].image) == white[n].category; });
    add_row(j, "none", 0.0, hits);
  }

  for (double eps : cfg.epsilons) {
    for (auto variant : attacks) {
      const std::uint64_t vseed = derive_seed(attack_root, to_string(variant));
      const bool query_based = variant == AttackVariant::spsa || variant == AttackVariant::nes;
      const bool transfer = variant == AttackVariant::pgd_ce || variant == AttackVariant::fgsm || variant == AttackVariant::mim;
      const auto images = query_based ? query : white;

      if (is_adaptive(variant)) {
        // One set of adversarial examples per white-box source, shared by all
        // judges built on that source.
        std::map<std::string, std::vector<Tensor>> adv;
        for (const auto& j : judges) {
          if (j.adaptive_source.empty() || adv.count(j.adaptive_source)) continue;
          if (j.adaptive_source == "object" && variant == AttackVariant::importance) continue;
          const bool object = j.adaptive_source == "object";
          const SegModel& seg = object ? *models.object_segmenter : *models.segmenter;
          const PartCatalog& cat = object ? obj_catalog : models.catalog;
          auto& out = adv[j.adaptive_source];
          out.resize(images.size());
          parallel_for(images.size(), [&](std::size_t n) {
            const Sample& s = images[n];
            const auto seed = derive_seed(vseed, s.id);
            const AttackConfig acfg = attack_config(cfg, variant, eps, seed);
            const SegModelOracle oracle(seg);
            if (variant == AttackVariant::importance) {
              out[n] = importance_attack(s.image, oracle, cat, models.rules, s.category, acfg).x_adv;
              return;
            }
            LabelGrid gt = s.parts;
            std::optional<LabelGrid> target;
            if (variant == AttackVariant::targeted) target = pick_target(s, target_pool, seed);
            if (object) {
              for (auto& v : gt.storage()) v = v ? s.category + 1 : 0;
              if (target) {
                // Object-level target: the other image's silhouette, labelled with its category.
                for (const auto& p : target_pool) {
                  if (p.parts == *target) {
                    for (auto& v : target->storage()) v = v ? p.category + 1 : 0;
                    break;
                  }
                }
              }
            }
            const auto adv_labels = make_adv_labels(variant, gt, cat, seed, target);
            out[n] = modified_dag(s.image, oracle, gt, adv_labels, acfg).x_adv;
          });
        }
        for (const auto& j : judges) {
          auto it = adv.find(j.adaptive_source);
          if (it == adv.end()) continue;
          std::vector<int> hits(images.size());
          parallel_for(images.size(),
                       [&](std::size_t n) { hits[n] = j.predict(it->second[n]) == images[n].category; });
          add_row(j, to_string(variant), eps, hits);
        }
      } else if (transfer) {
        if (!models.baseline) fail(ErrorKind::InvalidArgument, to_string(variant) + " needs the baseline model");
        std::vector<Tensor> adv(images.size());
        parallel_for(images.size(), [&](std::size_t n) {
          const Sample& s = images[n];
          const AttackConfig acfg = attack_config(cfg, variant, eps, derive_seed(vseed, s.id));
          const RowModelOracle oracle(*models.baseline);
          adv[n] = variant == AttackVariant::fgsm     ? fgsm(s.image, oracle, s.category, acfg).x_adv
                   : variant == AttackVariant::pgd_ce ? pgd_ce(s.image, oracle, s.category, acfg).x_adv
                                                      : mim(s.image, oracle, s.category, acfg).x_adv;
        });
        for (const auto& j : judges) {
          std::vector<int> hits(images.size());
          parallel_for(images.size(), [&](std::size_t n) { hits[n] = j.predict(adv[n]) == images[n].category; });
          add_row(j, to_string(variant), eps, hits);
        }
      } else if (query_based) {
        for (const auto& j : judges) {
          std::vector<int> hits(images.size());
          parallel_for(images.size(), [&](std::size_t n) {
            const Sample& s = images[n];
            AttackConfig acfg = attack_config(cfg, variant, eps, derive_seed(vseed, s.id));
            const ScoreFn score = [&](const Tensor& x) { return margin_of(j.scores(x), s.category); };
            const auto res = variant == AttackVariant::spsa ? spsa_attack(s.image, score, acfg)
                                                            : nes_attack(s.image, score, acfg);
            hits[n] = j.predict(res.x_adv) == s.category;
          });
          add_row(j, to_string(variant), eps, hits);
        }
      }
    }

    if (cfg.worst_case) {
      for (const auto& j : judges) {
        if (j.adaptive_source.empty()) continue;
        EvalRow* lowest = nullptr;
        for (auto v : kAdaptiveVariants) {
          for (auto& r : report.rows) {
            if (r.model == j.name && r.option == j.option && r.epsilon == eps && r.attack == to_string(v)) {
              if (!lowest || r.correct < lowest->correct) lowest = &r;
            }
          }
        }
        if (!lowest) continue;
        lowest->lowest_of_adaptive = true;
        EvalRow worst = *lowest;
        worst.attack = "worst-case";
        report.rows.push_back(worst);
      }
    }
  }

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  report.metadata = json{{"seed", cfg.seed},
                         {"attack_seed", attack_root},
                         {"images", n_white},
                         {"query_images", n_query},
                         {"steps", cfg.steps},
                         {"runtime_seconds", seconds}};
  return report;
}

json to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.1f", r.accuracy());
    rows.push_back({{"model", r.model},
                    {"attack", r.attack},
                    {"epsilon", r.epsilon},
                    {"option", r.option},
                    {"correct", r.correct},
                    {"total", r.total},
                    {"accuracy", std::stod(acc)},
                    {"lowest_of_adaptive", r.lowest_of_adaptive}});
  }
  return json{{"rows", rows}, {"metadata", report.metadata}};
}

std::string to_table(const EvalReport& report) {
  std::vector<std::array<std::string, 6>> cells;
  cells.push_back({"model", "option", "attack", "eps", "acc(%)", "correct/total"});
  for (const auto& r : report.rows) {
    char eps[32], acc[32];
    std::snprintf(eps, sizeof eps, "%g", r.epsilon);
    std::snprintf(acc, sizeof acc, "%.1f%s", r.accuracy(), r.lowest_of_adaptive ? "*" : "");
    cells.push_back({r.model, r.option.empty() ? "-" : r.option, r.attack, eps, acc,
                     std::to_string(r.correct) + "/" + std::to_string(r.total)});
  }
  std::array<std::size_t, 6> width{};
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << row[c] << std::string(width[c] - row[c].size() + (c + 1 < row.size() ? 2 : 0), ' ');
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace rock
