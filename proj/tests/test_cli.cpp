#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "rock/catalog.hpp"
#include "rock/rten.hpp"

using namespace rock;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "rock_cli_test";

int run(const std::string& args, const std::string& stdout_file = "/dev/null") {
  const std::string cmd = std::string(ROCK_CLI) + " " + args + " > " + stdout_file + " 2> /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

std::string path(const char* name) { return (kWork / name).string(); }

// gen → rules → train (seg, row) on a tiny dataset, once for the whole binary.
struct Pipeline {
  Pipeline() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    REQUIRE(run("--out " + path("data") + " gen --train-per-category 4 --val-per-category 2") == 0);
    REQUIRE(run("--out " + path("rules.json") + " rules --data " + path("data")) == 0);
    REQUIRE(run("--seed 3 --out " + path("seg") + " train --data " + path("data") + " --epochs 1 --hidden 2") == 0);
    REQUIRE(run("--seed 3 --out " + path("row") + " train --arch row --data " + path("data") +
                " --epochs 1 --hidden 2") == 0);
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("classify") == 1);
  CHECK(run("--seed notanumber gen") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("classify an all-background response") {
  fs::create_directories(kWork);
  const PartCatalog cat = make_catalog({2, 1});
  save_ruleset(cat, LinkageRuleSet{{{make_rule(1, 2, 3)}, {}}}, path("bg_rules.json"));
  Tensor t({4, 3, 3});
  for (std::size_t k = 0; k < 9; ++k) t[k] = 1.0;
  rten::write(path("bg.rten"), t);

  REQUIRE(run("classify --rules " + path("bg_rules.json") + " --response " + path("bg.rten"), path("bg.json")) == 0);
  const json out = read_json(path("bg.json"));
  CHECK(out.at("no_evidence") == true);
  CHECK(out.at("prediction_index") == 0);
  CHECK(out.at("scores")[0].at("score") == 0.0);

  // Missing files are I/O errors; a response with the wrong channel count is a
  // validation error.
  CHECK(run("classify --rules " + path("nope.json") + " --response " + path("bg.rten")) == 2);
  rten::write(path("bad.rten"), Tensor({3, 3, 3}));
  CHECK(run("classify --rules " + path("bg_rules.json") + " --response " + path("bad.rten")) == 1);
}

TEST_CASE("pipeline outputs") {
  pipeline();
  CHECK(fs::exists(path("data") + "/manifest.json"));
  const json metrics = read_json(path("seg") + "/metrics.json");
  CHECK(metrics.at("epochs").size() == 1);
  CHECK(metrics.at("arch") == "seg");
  const auto rules = load_ruleset(path("rules.json"));
  CHECK(rules.catalog.num_categories() == 4);
}

TEST_CASE("benign eval is reproducible") {
  pipeline();
  const std::string base = "--seed 5 eval --data " + path("data") + " --rules " + path("rules.json") + " --seg " +
                           path("seg") + " --row " + path("row") + " --attacks none";
  REQUIRE(run("--out " + path("eval1") + " " + base) == 0);
  REQUIRE(run("--out " + path("eval2") + " " + base) == 0);
  const json a = read_json(path("eval1") + "/report.json"), b = read_json(path("eval2") + "/report.json");
  CHECK(a.at("rows") == b.at("rows"));
  CHECK(a.at("rows").size() == 2);
  CHECK(a.at("metadata").at("root_seed") == 5);
  CHECK(fs::exists(path("eval1") + "/report.txt"));

  // A baseline checkpoint is not a part segmenter.
  CHECK(run("--out " + path("eval3") + " eval --data " + path("data") + " --rules " + path("rules.json") +
            " --seg " + path("row") + " --attacks none") != 0);
}

TEST_CASE("single-image attack") {
  pipeline();
  const json manifest = read_json(path("data") + "/manifest.json");
  const int id = manifest.at("splits").at("val")[0].at("id");
  const int category = manifest.at("splits").at("val")[0].at("category");
  const std::string image = path("data") + "/val/img_" + std::to_string(id) + ".rten";
  const std::string labels = path("data") + "/val/gt_" + std::to_string(id) + ".rten";
  REQUIRE(run("--out " + path("atk") + " attack --model " + path("seg") + " --rules " + path("rules.json") +
              " --image " + image + " --labels " + labels + " --category " +
              std::to_string(category) + " --variant background --epsilon 8 --steps 3") == 0);
  const json rep = read_json(path("atk") + "/report.json");
  CHECK(rep.at("linf").get<double>() <= 8.0 + 1e-4);
  CHECK(fs::exists(path("atk") + "/x_adv.rten"));

  REQUIRE(run("--out " + path("atk_row") + " attack --model " + path("row") + " --rules " + path("rules.json") +
              " --image " + image + " --category " + std::to_string(category) +
              " --variant pgd_ce --epsilon 4 --steps 2") == 0);
  CHECK(read_json(path("atk_row") + "/report.json").at("linf").get<double>() <= 4.0 + 1e-4);
  CHECK(run("--out " + path("atk_bad") + " attack --model " + path("row") + " --image " + image +
            " --category 0 --variant targeted") == 1);
}
