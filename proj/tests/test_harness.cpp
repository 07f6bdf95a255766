#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "fdp/errors.hpp"
#include "fdp/experiment.hpp"
#include "fdp/report.hpp"
#include "test_support.hpp"

using namespace fdp;
using namespace fdp::test;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.methods = {"joint", "fdp_blockwise", "cfg"};
  c.demos = {3};
  c.seeds = {0, 1};
  c.episodes = 6;
  c.hidden = 16;
  c.blocks = 2;
  c.training.epochs = 2;
  c.training.batch_size = 32;
  c.training.learning_rate = 1e-3;
  c.perturbations = {"none", "occlusion"};
  return c;
}

ResultRow row(const std::string& method, std::uint64_t seed, double rate, const std::string& hash = "h") {
  ResultRow r;
  r.method = method;
  r.priority = "prop>vision";
  r.demos = 10;
  r.scale = "S";
  r.perturbation = "none";
  r.seed = seed;
  r.success_rate = rate;
  r.episodes = 100;
  r.config_hash = hash;
  return r;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FDP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("experiment config parsing and validation") {
  const auto c = experiment_config_from_json(nlohmann::json::parse(
      R"({"env": {"scales": ["S", "L"], "perturbations": ["none", "distractor"]},
          "methods": ["joint", "poco"], "priorities": ["prop>vision", "vision>prop"],
          "seeds": [1, 2, 3], "demos": [10, 50], "training": {"epochs": 5},
          "sampler": {"method": "ddim", "num_inference_steps": 8}})"));
  CHECK(c.scales == std::vector<std::string>{"S", "L"});
  CHECK(c.training.epochs == 5);
  CHECK(c.training.batch_size == 64);
  CHECK(experiment_config_from_json(to_json(c)).seeds == c.seeds);
  CHECK(experiment_hash(c) == experiment_hash(experiment_config_from_json(to_json(c))));

  auto bad = [](const char* text) { return experiment_config_from_json(nlohmann::json::parse(text)); };
  CHECK_THROWS_AS(bad(R"({"methods": []})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"seeds": []})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"methods": ["magic"]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"priorities": ["state>prop"]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"training": {"batch_size": "big"}})"), ConfigError);
}

TEST_CASE("the experiment hash ignores the per-row columns") {
  auto a = tiny_config();
  auto b = a;
  b.seeds = {7};
  b.methods = {"poco"};
  CHECK(experiment_hash(a) == experiment_hash(b));
  b.training.epochs = 3;
  CHECK(experiment_hash(a) != experiment_hash(b));
}

TEST_CASE("aggregation gives mean and sample std over seeds") {
  const auto t = aggregate({row("joint", 0, 0.2), row("joint", 1, 0.4), row("joint", 2, 0.6), row("poco", 0, 0.5)});
  REQUIRE(t.size() == 2);
  CHECK(t[0].mean == doctest::Approx(0.4));
  CHECK(t[0].stddev == doctest::Approx(0.2));
  CHECK(t[0].seeds == 3);
  CHECK(t[1].stddev == 0.0);
  CHECK(find_aggregate(t, "poco", "prop>vision", 10, "S", "none").mean == 0.5);
}

TEST_CASE("report refuses mixed configs unless forced") {
  const std::vector<ResultRow> rows = {row("joint", 0, 0.2, "a"), row("joint", 1, 0.4, "b")};
  CHECK_THROWS_AS(aggregate(rows), ConfigError);
  CHECK(aggregate(rows, true).size() == 1);
}

TEST_CASE("markdown and svg rendering") {
  const auto t = aggregate({row("joint", 0, 0.25), row("fdp_blockwise", 0, 0.75)});
  const auto md = render_markdown(t);
  CHECK(md.find("| joint | fdp_blockwise |") != std::string::npos);
  CHECK(md.find("25.0 ± 0.0") != std::string::npos);
  const auto svg = render_svg(t, "title");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  TempDir dir("report");
  const auto files = write_report({row("joint", 0, 0.25)}, dir.path);
  CHECK(std::filesystem::exists(files.svg));
  const auto bytes = read_file(files.summary_csv);
  CHECK(std::string(bytes.begin(), bytes.end()).find(FDP_VERSION) != std::string::npos);
}

TEST_CASE("eval before train names the missing artifact") {
  TempDir dir("dependency");
  const auto c = tiny_config();
  CHECK_THROWS_AS(run_stage(c, dir.path, Stage::eval), DependencyError);
  run_stage(c, dir.path, Stage::gen_data);
  try {
    run_stage(c, dir.path, Stage::eval);
    FAIL("expected a dependency error");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find(".fdpc") != std::string::npos);
  }
}

TEST_CASE("staged pipeline, sweep and resume agree byte for byte") {
  TempDir staged("staged"), swept("swept");
  const auto c = tiny_config();
  run_stage(c, staged.path, Stage::gen_data);
  run_stage(c, staged.path, Stage::train);
  const auto rows = run_stage(c, staged.path, Stage::eval);
  CHECK(rows.size() == 2 * 3 * 2);
  for (const auto& r : rows) {
    CHECK(r.config_hash == experiment_hash(c));
    CHECK(r.code_version == FDP_VERSION);
  }
  const auto swept_rows = run_stage(c, swept.path, Stage::sweep);
  CHECK(swept_rows == rows);
  CHECK(read_file(staged.path / "results.csv") == read_file(swept.path / "results.csv"));
  for (const auto& entry : std::filesystem::directory_iterator(staged.path / "models")) {
    CHECK(read_file(entry.path()) == read_file(swept.path / "models" / entry.path().filename()));
  }
  for (const auto& entry : std::filesystem::directory_iterator(staged.path / "data")) {
    CHECK(read_file(entry.path()) == read_file(swept.path / "data" / entry.path().filename()));
  }

  // interrupt: drop one cell, corrupt another, then resume
  std::vector<std::filesystem::path> cells;
  for (const auto& entry : std::filesystem::directory_iterator(swept.path / "cells")) cells.push_back(entry.path());
  std::sort(cells.begin(), cells.end());
  std::filesystem::remove(cells[0]);
  write(cells[1], "{\"hash\": \"trunc");
  std::filesystem::remove(swept.path / "results.csv");
  CHECK(run_stage(c, swept.path, Stage::sweep) == rows);
  CHECK(read_file(staged.path / "results.csv") == read_file(swept.path / "results.csv"));
}

TEST_CASE("a one-cell sweep equals direct evaluation") {
  TempDir dir("onecell");
  auto c = tiny_config();
  c.methods = {"fdp_output"};
  c.seeds = {4};
  c.perturbations = {"distractor"};
  const auto rows = run_stage(c, dir.path, Stage::sweep);
  REQUIRE(rows.size() == 1);
  const ArtifactPaths paths{dir.path};
  const auto data = prepare_dataset(c, paths, "S", 3, 4, false);
  const auto models = prepare_models(c, paths, data, "S", 3, 4, "prop>vision", roles_for_method("fdp_output"), false);
  CHECK(evaluate_cell(c, models, data, {"fdp_output", "prop>vision", 3, "S", "distractor", 4}) == rows[0]);
}

TEST_CASE("worker count honours FDP_THREADS") {
  setenv("FDP_THREADS", "1", 1);
  CHECK(worker_count(8) == 1);
  unsetenv("FDP_THREADS");
  CHECK(worker_count(1) == 1);
}

TEST_CASE("cli exit codes") {
  TempDir dir("cli");
  const auto out = dir.path.string();
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("eval --config " + out + "/missing.json --out " + out) == 2);
  write(dir.path / "bad.json", "{\"methods\": [\"magic\"]}");
  CHECK(run_cli("eval --config " + out + "/bad.json --out " + out) == 2);
  write(dir.path / "ok.json", "{\"methods\": [\"joint\"], \"demos\": [2], \"episodes\": 2}");
  CHECK(run_cli("eval --config " + out + "/ok.json --out " + out) == 3);
  CHECK(run_cli("report --in " + out + "/nothing.csv --out " + out) == 3);
  write(dir.path / "nan.json",
        "{\"methods\": [\"joint\"], \"demos\": [2], \"episodes\": 2, \"net\": {\"hidden\": 8, \"blocks\": 1},"
        " \"training\": {\"epochs\": 3, \"learning_rate\": 1e300}}");
  CHECK(run_cli("sweep --config " + out + "/nan.json --out " + out) == 4);
}
