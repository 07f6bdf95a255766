#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "fdp/errors.hpp"
#include "fdp/experiment.hpp"
#include "fdp/gmm_fixture.hpp"
#include "fdp/report.hpp"

namespace {

constexpr const char* kCsvHelp = R"(Result CSV columns (one row per evaluated cell):
  method        joint | fdp_output | fdp_blockwise | poco | cfg | base_only
  priority      prop>vision | vision>prop (first modality is the prioritized one)
  demos         number of expert demonstrations used for training
  scale         arena scale S | M | L
  perturbation  none | color | distractor | occlusion
  seed          experiment seed (data, init, training and evaluation streams)
  success_rate  fraction of successful episodes in [0, 1]
  episodes      number of evaluation episodes
  config_hash   hash of the shared experiment config
  code_version  version string of the build

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric abort.
Env: FDP_THREADS caps the worker pool.)";

struct Common {
  std::string config;
  std::string out = "fdp_out";
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> methods;
};

fdp::ExperimentConfig load(const Common& c) {
  if (c.config.empty()) throw fdp::ConfigError("--config is required");
  fdp::ExperimentConfig cfg = fdp::load_experiment_config(c.config);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (!c.methods.empty()) cfg.methods = c.methods;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_method) {
  app->add_option("--config", c.config, "experiment config (JSON)")->required();
  app->add_option("--out", c.out, "output directory; every artifact path is relative to it");
  app->add_option("--seed", c.seeds, "override the seed list");
  if (with_method) app->add_option("--method", c.methods, "override the method list");
}

void print_rows(const std::vector<fdp::ResultRow>& rows, const std::filesystem::path& out) {
  std::cout << fdp::render_markdown(fdp::aggregate(rows)) << "results: " << (out / "results.csv").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorized diffusion policy toolkit"};
  app.footer(kCsvHelp);
  app.set_version_flag("--version", FDP_VERSION);
  app.require_subcommand(1);

  Common gen, train, eval, sweep;
  add_common(app.add_subcommand("gen-data", "generate expert demonstrations (.fdpd)"), gen, false);
  add_common(app.add_subcommand("train", "train all networks the methods need (.fdpc + JSONL logs)"), train, true);
  add_common(app.add_subcommand("eval", "evaluate trained models into results.csv/json"), eval, true);
  add_common(app.add_subcommand("sweep", "resumable gen-data, train and eval over the whole cross product"), sweep,
             true);

  auto* score = app.add_subcommand("score-check", "verify composed scores against the mixture oracle");
  std::string score_config, score_out = "fdp_out";
  std::optional<std::uint64_t> score_seed;
  score->add_option("--config", score_config, "score-check config (JSON), defaults built in");
  score->add_option("--out", score_out, "output directory");
  score->add_option("--seed", score_seed, "override the seed");

  auto* report = app.add_subcommand("report", "aggregate result CSVs into Markdown, SVG and summary CSV");
  std::vector<std::string> report_inputs;
  std::string report_out = "fdp_out";
  bool force = false;
  report->add_option("--in", report_inputs, "result CSV files")->required();
  report->add_option("--out", report_out, "output directory");
  report->add_flag("--force", force, "allow rows from different configs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("gen-data")) {
      fdp::run_stage(load(gen), gen.out, fdp::Stage::gen_data);
      std::cout << "datasets written under " << (std::filesystem::path(gen.out) / "data").string() << "\n";
    } else if (app.got_subcommand("train")) {
      fdp::run_stage(load(train), train.out, fdp::Stage::train);
      std::cout << "checkpoints written under " << (std::filesystem::path(train.out) / "models").string() << "\n";
    } else if (app.got_subcommand("eval")) {
      print_rows(fdp::run_stage(load(eval), eval.out, fdp::Stage::eval), eval.out);
    } else if (app.got_subcommand("sweep")) {
      print_rows(fdp::run_stage(load(sweep), sweep.out, fdp::Stage::sweep), sweep.out);
    } else if (app.got_subcommand("score-check")) {
      fdp::ScoreCheckConfig cfg;
      if (!score_config.empty()) {
        std::ifstream in(score_config);
        if (!in) throw fdp::ConfigError("config file not found: " + score_config);
        nlohmann::json j;
        try {
          in >> j;
        } catch (const nlohmann::json::exception& e) {
          throw fdp::ConfigError(std::string("score-check config: ") + e.what());
        }
        cfg = fdp::score_check_config_from_json(j);
      }
      if (score_seed) cfg.seed = *score_seed;
      const auto result = fdp::run_score_check(cfg, fdp::build_schedule(fdp::ScheduleKind::squared_cosine, 100));
      nlohmann::json j = fdp::to_json(result);
      j["config"] = fdp::to_json(cfg);
      j["code_version"] = FDP_VERSION;
      j["config_hash"] = fdp::content_hash(fdp::to_json(cfg).dump());
      std::filesystem::create_directories(score_out);
      const auto path = std::filesystem::path(score_out) / "score_check.json";
      fdp::write_text_atomic(path, j.dump(2) + "\n");
      std::printf("composed vs oracle rms %.4f\njoint vs oracle rms %.4f\ncomposed vs joint rms %.4f\nreport: %s\n",
                  result.composed_vs_oracle.overall_rms, result.joint_vs_oracle.overall_rms,
                  result.composed_vs_joint.overall_rms, path.string().c_str());
    } else if (app.got_subcommand("report")) {
      std::vector<fdp::ResultRow> rows;
      for (const auto& in : report_inputs) {
        if (!std::filesystem::exists(in)) throw fdp::DependencyError("missing result file " + in);
        auto more = fdp::load_results(in);
        rows.insert(rows.end(), more.begin(), more.end());
      }
      const auto files = fdp::write_report(rows, report_out, force);
      std::cout << fdp::render_markdown(fdp::aggregate(rows, force)) << "wrote " << files.markdown.string() << ", "
                << files.svg.string() << ", " << files.summary_csv.string() << "\n";
    }
  } catch (const fdp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fdp::ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fdp::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const fdp::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
