// rock: command-line front end.
//
//   rock gen      --out DIR                       synthetic dataset
//   rock rules    --data DIR --out FILE           rule weights from the train split
//   rock train    --data DIR --arch seg|row|object --out DIR
//   rock classify --rules FILE (--response T | --image T --model DIR)
//   rock attack   --model DIR --image T ... --variant V --out DIR
//   rock eval     --data DIR --rules FILE --seg DIR --row DIR --out DIR
//
// Exit status: 0 success, 1 usage or validation error, 2 I/O or format
// error, 3 internal error.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rock/attack.hpp"
#include "rock/datagen.hpp"
#include "rock/eval.hpp"
#include "rock/judgment.hpp"
#include "rock/model.hpp"
#include "rock/rten.hpp"
#include "rock/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rock;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::string config;
};

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::IoError, "cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) fail(ErrorKind::IoError, "cannot write " + path.string());
  f << doc.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) fail(ErrorKind::IoError, "cannot write " + path.string());
  f << text;
}

void require_out(const Globals& g) {
  if (g.out.empty()) fail(ErrorKind::InvalidArgument, "--out is required");
}

json score_report_json(const ScoreReport& rep, const PartCatalog& catalog) {
  json scores = json::array();
  for (std::size_t c = 0; c < rep.scores.size(); ++c) {
    json matched = json::array();
    for (const auto& m : rep.matched[c]) {
      matched.push_back({{"a", catalog.part_names[m.rule.a - 1]},
                         {"b", catalog.part_names[m.rule.b - 1]},
                         {"weight", m.rule.weight},
                         {"confidence", m.confidence}});
    }
    scores.push_back({{"category", catalog.category_names[c]}, {"score", rep.scores[c]}, {"matched", matched}});
  }
  return json{{"prediction", catalog.category_names[rep.prediction]},
              {"prediction_index", rep.prediction},
              {"no_evidence", rep.no_evidence},
              {"evaluated_categories", rep.evaluated_categories},
              {"scores", scores}};
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::optional<int> train_per_category;
  std::optional<int> val_per_category;
};

void cmd_gen(const Globals& g, const GenArgs& a) {
  require_out(g);
  DatasetSpec spec = g.config.empty() ? default_spec() : parse_dataset_spec(read_json(g.config));
  if (a.train_per_category) spec.train_per_category = *a.train_per_category;
  if (a.val_per_category) spec.val_per_category = *a.val_per_category;
  // Without --seed the spec keeps its own seed, so the default is the reference benchmark.
  if (g.seed_given) spec.seed = derive_seed(g.seed, "data");
  const Dataset data = generate(spec);
  save_dataset(g.out, data, spec);
  std::cout << "wrote " << data.train.size() << " train / " << data.val.size() << " val samples to " << g.out
            << " (spec " << spec_hash(spec) << ")\n";
}

// ---- rules -----------------------------------------------------------------

void cmd_rules(const Globals& g, const std::string& data_dir) {
  require_out(g);
  const Dataset data = load_dataset(data_dir);
  const auto rules = estimate_rule_weights(data.catalog, data.skeleton, ground_truth(data.train));
  save_ruleset(data.catalog, rules, g.out);
  for (int c = 0; c < data.catalog.num_categories(); ++c) {
    std::cout << data.catalog.category_names[c] << ":";
    for (const auto& r : rules.rules[c]) {
      std::cout << ' ' << data.catalog.part_names[r.a - 1] << '-' << data.catalog.part_names[r.b - 1] << '='
                << r.weight;
    }
    std::cout << '\n';
  }
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string arch = "seg";
  int hidden = 8;
  std::optional<int> epochs;
  std::optional<double> learning_rate;
  bool adversarial = false;
};

void cmd_train(const Globals& g, const TrainArgs& a) {
  require_out(g);
  if (a.arch != "seg" && a.arch != "row" && a.arch != "object") {
    fail(ErrorKind::InvalidArgument, "--arch must be seg, row or object");
  }
  if (a.hidden <= 0) fail(ErrorKind::InvalidArgument, "--hidden must be positive");
  TrainConfig cfg = g.config.empty() ? TrainConfig{} : parse_train_config(read_json(g.config));
  if (g.config.empty() && a.arch == "row") cfg.schedule = LrSchedule::multistep;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.learning_rate) cfg.learning_rate = *a.learning_rate;
  if (a.adversarial && !cfg.adversarial) cfg.adversarial = AdvTrainConfig{};
  cfg.seed = derive_seed(g.seed, "train");
  validate(cfg);

  const Dataset data = load_dataset(a.data);
  const TrunkShape shape{3, a.hidden, a.hidden};
  const auto init_seed = derive_seed(g.seed, "init");
  std::vector<EpochMetrics> history;
  const auto started = std::chrono::steady_clock::now();
  if (a.arch == "row") {
    auto r = train_row(init_row_model(shape, data.catalog.num_categories(), init_seed), data.train, cfg, data.val);
    save_checkpoint(g.out, r.model, data.catalog);
    history = std::move(r.history);
  } else if (a.arch == "seg") {
    auto r = train_segmenter(init_seg_model(shape, data.catalog.num_parts + 1, init_seed), data.train, cfg, data.val);
    save_checkpoint(g.out, r.model, data.catalog);
    history = std::move(r.history);
  } else {
    const PartCatalog objects = object_catalog(data.catalog);
    auto r = train_segmenter(init_seg_model(shape, objects.num_parts + 1, init_seed), to_object_labels(data.train),
                             cfg, to_object_labels(data.val));
    save_checkpoint(g.out, r.model, objects);
    history = std::move(r.history);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  json epochs = json::array();
  for (const auto& m : history) {
    json e{{"epoch", m.epoch}, {"loss", m.loss}, {"learning_rate", m.learning_rate}};
    e["val_accuracy"] = m.val_accuracy ? json(*m.val_accuracy) : json(nullptr);
    epochs.push_back(e);
    std::printf("epoch %3d  loss %.5f  lr %.5f", m.epoch, m.loss, m.learning_rate);
    if (m.val_accuracy) std::printf("  val %.4f", *m.val_accuracy);
    std::printf("\n");
  }
  write_json(fs::path(g.out) / "metrics.json",
             json{{"arch", a.arch}, {"config", to_json(cfg)}, {"epochs", epochs}, {"runtime_seconds", seconds}});
}

// ---- classify --------------------------------------------------------------

struct ClassifyArgs {
  std::string rules;
  std::string response;
  std::string image;
  std::string model;
  double bg_scale = 1.0;
  std::optional<int> top_k;
};

void cmd_classify(const Globals& g, const ClassifyArgs& a) {
  const auto rc = load_ruleset(a.rules);
  ResponseMap response;
  if (!a.response.empty()) {
    if (!a.image.empty()) fail(ErrorKind::InvalidArgument, "give either --response or --image, not both");
    response = ResponseMap::from_probabilities(rten::read(a.response));
  } else {
    if (a.image.empty() || a.model.empty()) fail(ErrorKind::InvalidArgument, "need --response, or --image with --model");
    const SegModel model = load_seg_checkpoint(a.model, rc.catalog);
    response = ResponseMap::from_logits(forward(model, rten::read(a.image)));
  }
  const auto report = classify(response, rc.catalog, rc.rules, {a.top_k, a.bg_scale});
  const json doc = score_report_json(report, rc.catalog);
  std::cout << doc.dump(2) << '\n';
  if (!g.out.empty()) write_json(g.out, doc);
}

// ---- attack ----------------------------------------------------------------

struct AttackArgs {
  std::string model;
  std::string rules;
  std::string image;
  std::string labels;
  std::string target_labels;
  std::optional<int> category;
  std::string variant;
  std::optional<double> epsilon;
  std::optional<double> alpha;
  std::optional<int> steps;
};

void cmd_attack(const Globals& g, const AttackArgs& a) {
  require_out(g);
  AttackConfig cfg = g.config.empty() ? AttackConfig{} : parse_attack_config(read_json(g.config));
  if (!a.variant.empty()) cfg.variant = parse_variant(a.variant);
  if (a.epsilon) cfg.epsilon = *a.epsilon;
  if (a.steps) cfg.steps = *a.steps;
  cfg.alpha = a.alpha ? *a.alpha : (a.epsilon ? *a.epsilon / 8.0 : cfg.alpha);
  cfg.seed = derive_seed(g.seed, "attack");
  validate(cfg);

  const Tensor x = rten::read(a.image);
  const std::string arch = checkpoint_arch(a.model);
  AdversarialResult result;
  double final_score = 0.0;
  bool success = false;

  auto need_category = [&] {
    if (!a.category) fail(ErrorKind::InvalidArgument, "--category is required for this attack");
    return *a.category;
  };

  if (arch == "row") {
    // The rule file supplies the catalog the checkpoint was trained against.
    if (a.rules.empty()) fail(ErrorKind::InvalidArgument, "--rules is required to check the checkpoint's catalog");
    const RowModel model = load_row_checkpoint(a.model, load_ruleset(a.rules).catalog);
    const int label = need_category();
    const RowModelOracle oracle(model);
    const ScoreFn margin = [&](const Tensor& in) {
      const auto z = row_forward(model, in);
      double other = -1e300;
      for (int c = 0; c < static_cast<int>(z.size()); ++c)
        if (c != label) other = std::max(other, z[c]);
      return z[label] - other;
    };
    switch (cfg.variant) {
      case AttackVariant::pgd_ce: result = pgd_ce(x, oracle, label, cfg); break;
      case AttackVariant::fgsm: result = fgsm(x, oracle, label, cfg); break;
      case AttackVariant::mim: result = mim(x, oracle, label, cfg); break;
      case AttackVariant::spsa: result = spsa_attack(x, margin, cfg); break;
      case AttackVariant::nes: result = nes_attack(x, margin, cfg); break;
      default: fail(ErrorKind::InvalidArgument, "variant '" + to_string(cfg.variant) + "' needs a part segmenter");
    }
    final_score = margin(result.x_adv);
    success = predict_from_scores(row_forward(model, result.x_adv)) != label;
  } else {
    if (a.rules.empty()) fail(ErrorKind::InvalidArgument, "--rules is required for a segmenter checkpoint");
    const auto rc = load_ruleset(a.rules);
    const SegModel model = load_seg_checkpoint(a.model, rc.catalog);
    const SegModelOracle oracle(model);
    const JudgmentOptions judge{};
    if (cfg.variant == AttackVariant::importance) {
      result = importance_attack(x, oracle, rc.catalog, rc.rules, need_category(), cfg);
    } else if (is_adaptive(cfg.variant)) {
      if (a.labels.empty()) fail(ErrorKind::InvalidArgument, "--labels (ground-truth part grid) is required");
      const LabelGrid gt = to_label_grid(rten::read(a.labels));
      std::optional<LabelGrid> target;
      if (!a.target_labels.empty()) target = to_label_grid(rten::read(a.target_labels));
      const auto adv = make_adv_labels(cfg.variant, gt, rc.catalog, cfg.seed, target);
      result = modified_dag(x, oracle, gt, adv, cfg);
    } else if (cfg.variant == AttackVariant::spsa || cfg.variant == AttackVariant::nes) {
      const int label = need_category();
      const ScoreFn margin = [&](const Tensor& in) {
        return rock_margin(model, rc.catalog, rc.rules, judge, in, label);
      };
      result = cfg.variant == AttackVariant::spsa ? spsa_attack(x, margin, cfg) : nes_attack(x, margin, cfg);
    } else {
      fail(ErrorKind::InvalidArgument, "variant '" + to_string(cfg.variant) + "' needs a baseline checkpoint");
    }
    if (a.category) {
      final_score = rock_margin(model, rc.catalog, rc.rules, judge, result.x_adv, *a.category);
      success = rock_predict(model, rc.catalog, rc.rules, judge, result.x_adv) != *a.category;
    }
  }

  check_budget(x, result.x_adv, cfg.epsilon);
  fs::create_directories(g.out);
  rten::write(fs::path(g.out) / "x_adv.rten", result.x_adv);
  json report = to_json(AttackReport{cfg, result.queries, final_score, success});
  report["per_step_loss"] = result.per_step_loss;
  report["linf"] = linf_distance(x, result.x_adv) * 255.0;
  write_json(fs::path(g.out) / "report.json", report);
  std::cout << report.dump(2) << '\n';
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string rules;
  std::string seg;
  std::string row;
  std::string object_seg;
  std::string split = "val";
  std::vector<std::string> attacks;
  std::vector<double> epsilons;
  std::optional<int> steps;
  std::optional<double> bg_scale;
  std::optional<int> top_k;
  std::optional<std::size_t> max_images;
  std::optional<std::size_t> max_query_images;
  bool worst_case = false;
  bool no_knowledge = false;
  bool uniform_weights = false;
};

void cmd_eval(const Globals& g, const EvalArgs& a) {
  require_out(g);
  EvalConfig cfg = g.config.empty() ? EvalConfig{} : parse_eval_config(read_json(g.config));
  if (!a.attacks.empty()) {
    cfg.attacks.clear();
    for (const auto& name : a.attacks)
      if (name != "none") cfg.attacks.push_back(parse_variant(name));
  }
  if (!a.epsilons.empty()) cfg.epsilons = a.epsilons;
  if (a.steps) cfg.steps = *a.steps;
  if (a.bg_scale) cfg.judgment.bg_scale = *a.bg_scale;
  if (a.top_k) cfg.judgment.top_k = *a.top_k;
  if (a.max_images) cfg.max_images = *a.max_images;
  if (a.max_query_images) cfg.max_query_images = *a.max_query_images;
  cfg.worst_case = cfg.worst_case || a.worst_case;
  cfg.seed = derive_seed(g.seed, "attack");
  if (g.config.empty()) {
    cfg.models = {ModelKind::rock};
    if (!a.row.empty()) cfg.models.push_back(ModelKind::row);
    if (a.no_knowledge) cfg.models.push_back(ModelKind::ablation_woK);
    if (a.uniform_weights) cfg.models.push_back(ModelKind::ablation_woW);
    if (!a.object_seg.empty()) cfg.models.push_back(ModelKind::ablation_woP);
  }
  if (a.split != "val" && a.split != "train") fail(ErrorKind::InvalidArgument, "--split must be train or val");

  const Dataset data = load_dataset(a.data);
  const auto rc = load_ruleset(a.rules);
  if (!(rc.catalog == data.catalog)) fail(ErrorKind::InvalidArgument, "rule file and dataset disagree on the catalog");

  std::optional<SegModel> seg, obj;
  std::optional<RowModel> row;
  if (!a.seg.empty()) seg = load_seg_checkpoint(a.seg, rc.catalog);
  if (!a.row.empty()) row = load_row_checkpoint(a.row, rc.catalog);
  if (!a.object_seg.empty()) obj = load_seg_checkpoint(a.object_seg, object_catalog(rc.catalog));
  for (auto m : cfg.models) {
    const bool parts = m == ModelKind::rock || m == ModelKind::ablation_woK || m == ModelKind::ablation_woW;
    if (parts && !seg) fail(ErrorKind::InvalidArgument, "--seg is required for " + to_string(m));
    if (m == ModelKind::row && !row) fail(ErrorKind::InvalidArgument, "--row is required for the baseline");
    if (m == ModelKind::ablation_woP && !obj) fail(ErrorKind::InvalidArgument, "--object-seg is required for ablation-woP");
  }
  const bool needs_baseline =
      std::any_of(cfg.attacks.begin(), cfg.attacks.end(), [](AttackVariant v) {
        return v == AttackVariant::pgd_ce || v == AttackVariant::fgsm || v == AttackVariant::mim;
      });
  if (needs_baseline && !row) fail(ErrorKind::InvalidArgument, "transfer attacks need --row");

  const EvalModels models{rc.catalog, rc.rules, seg ? &*seg : nullptr, row ? &*row : nullptr, obj ? &*obj : nullptr};
  const auto& samples = a.split == "val" ? data.val : data.train;
  EvalReport report = run_eval(models, samples, cfg);
  report.metadata["root_seed"] = g.seed;
  report.metadata["split"] = a.split;
  const json manifest = read_json((fs::path(a.data) / "manifest.json").string());
  report.metadata["dataset_spec_hash"] = manifest.value("spec_hash", "");

  fs::create_directories(g.out);
  write_json(fs::path(g.out) / "report.json", to_json(report));
  const std::string table = to_table(report);
  write_text(fs::path(g.out) / "report.txt", table);
  std::cout << table;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IoError:
    case ErrorKind::FormatError:
    case ErrorKind::ParseError:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-based recognition with linkage knowledge: data, training, judgment, attacks, evaluation"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Root seed; split into data/init/train/attack streams");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--config", g.config, "JSON config for the subcommand");

  GenArgs gen;
  auto* sc_gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  sc_gen->add_option("--train-per-category", gen.train_per_category);
  sc_gen->add_option("--val-per-category", gen.val_per_category);

  std::string rules_data;
  auto* sc_rules = app.add_subcommand("rules", "Estimate rule weights from ground-truth part grids");
  sc_rules->add_option("--data", rules_data)->required();

  TrainArgs tr;
  auto* sc_train = app.add_subcommand("train", "Train the part segmenter, the baseline, or the object segmenter");
  sc_train->add_option("--data", tr.data)->required();
  sc_train->add_option("--arch", tr.arch, "seg, row or object")->capture_default_str();
  sc_train->add_option("--hidden", tr.hidden, "Width of both hidden layers")->capture_default_str();
  sc_train->add_option("--epochs", tr.epochs);
  sc_train->add_option("--lr", tr.learning_rate);
  sc_train->add_flag("--adversarial", tr.adversarial, "Train on random-variant adversarial examples");

  ClassifyArgs cl;
  auto* sc_classify = app.add_subcommand("classify", "Judge one response map or image");
  sc_classify->add_option("--rules", cl.rules)->required();
  sc_classify->add_option("--response", cl.response, "(K+1)xHxW probabilities");
  sc_classify->add_option("--image", cl.image, "3xHxW image in [0,1]");
  sc_classify->add_option("--model", cl.model, "Part segmenter checkpoint");
  sc_classify->add_option("--bg-scale", cl.bg_scale)->capture_default_str();
  sc_classify->add_option("--top-k", cl.top_k);

  AttackArgs at;
  auto* sc_attack = app.add_subcommand("attack", "Attack one image");
  sc_attack->add_option("--model", at.model)->required();
  sc_attack->add_option("--rules", at.rules);
  sc_attack->add_option("--image", at.image)->required();
  sc_attack->add_option("--labels", at.labels, "Ground-truth part grid");
  sc_attack->add_option("--target-labels", at.target_labels, "Another image's part grid (targeted)");
  sc_attack->add_option("--category", at.category, "True category index");
  sc_attack->add_option("--variant", at.variant);
  sc_attack->add_option("--epsilon", at.epsilon, "Budget in /255 units");
  sc_attack->add_option("--alpha", at.alpha, "Step in /255 units; default epsilon/8");
  sc_attack->add_option("--steps", at.steps);

  EvalArgs ev;
  auto* sc_eval = app.add_subcommand("eval", "Accuracy grid over models, attacks and budgets");
  sc_eval->add_option("--data", ev.data)->required();
  sc_eval->add_option("--rules", ev.rules)->required();
  sc_eval->add_option("--seg", ev.seg);
  sc_eval->add_option("--row", ev.row);
  sc_eval->add_option("--object-seg", ev.object_seg);
  sc_eval->add_option("--split", ev.split)->capture_default_str();
  sc_eval->add_option("--attacks", ev.attacks, "Comma-separated variants, or none")->delimiter(',');
  sc_eval->add_option("--epsilons", ev.epsilons)->delimiter(',');
  sc_eval->add_option("--steps", ev.steps);
  sc_eval->add_option("--bg-scale", ev.bg_scale);
  sc_eval->add_option("--top-k", ev.top_k);
  sc_eval->add_option("--max-images", ev.max_images);
  sc_eval->add_option("--max-query-images", ev.max_query_images);
  sc_eval->add_flag("--worst-case", ev.worst_case, "Add the five adaptive variants and their minimum");
  sc_eval->add_flag("--no-knowledge", ev.no_knowledge, "Add the knowledge-free ablation");
  sc_eval->add_flag("--uniform-weights", ev.uniform_weights, "Add the uniform-weight ablation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (*sc_gen) cmd_gen(g, gen);
    else if (*sc_rules) cmd_rules(g, rules_data);
    else if (*sc_train) cmd_train(g, tr);
    else if (*sc_classify) cmd_classify(g, cl);
    else if (*sc_attack) cmd_attack(g, at);
    else if (*sc_eval) cmd_eval(g, ev);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
}
