#include "fdp/gmm_fixture.hpp"

#include <chrono>
#include <cmath>

#include "fdp/errors.hpp"

namespace fdp {

GaussianMixtureTask score_check_task() {
  GaussianMixtureTask task;
  task.modality_dims = {1, 1};
  task.priority_k = 1;
  for (double sign : {1.0, -1.0}) {
    MixtureComponent c;
    c.weight = 0.5;
    c.offset = Vec::Constant(1, sign);
    c.coeff = Mat(1, 2);
    c.coeff << 0.5, 0.5 * sign;
    c.variance = Vec::Constant(1, 0.16);
    task.components.push_back(c);
  }
  task.validate();
  return task;
}

ScoreCheckConfig::ScoreCheckConfig() {
  training.learning_rate = 1e-3;
  training.weight_decay = 0.0;
  training.batch_size = 256;
  training.epochs = 25;
  training.ema_decay = 0.999;
}

nlohmann::json to_json(const ScoreCheckConfig& c) {
  return {{"samples", c.samples},
          {"hidden", c.hidden},
          {"blocks", c.blocks},
          {"mode", to_string(c.mode)},
          {"training", to_json(c.training)},
          {"seed", c.seed},
          {"points_per_dim", c.points_per_dim},
          {"half_width_stddevs", c.half_width_stddevs},
          {"conditions", c.conditions}};
}

ScoreCheckConfig score_check_config_from_json(const nlohmann::json& j) {
  ScoreCheckConfig c;
  try {
    c.samples = j.value("samples", c.samples);
    c.hidden = j.value("hidden", c.hidden);
    c.blocks = j.value("blocks", c.blocks);
    if (j.contains("mode")) c.mode = parse_compose_mode(j.at("mode").get<std::string>());
    if (j.contains("training")) {
      nlohmann::json merged = to_json(c.training);
      merged.update(j.at("training"));
      c.training = training_config_from_json(merged);
    }
    c.seed = j.value("seed", c.seed);
    c.points_per_dim = j.value("points_per_dim", c.points_per_dim);
    c.half_width_stddevs = j.value("half_width_stddevs", c.half_width_stddevs);
    if (j.contains("conditions")) c.conditions = j.at("conditions").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("score-check config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (c.samples < 10 || c.conditions.empty()) throw ConfigError("score-check needs samples and conditions");
  return c;
}

TrainingSet sample_task(const GaussianMixtureTask& task, int samples, std::uint64_t seed) {
  TrainingSet set;
  const auto n = static_cast<Eigen::Index>(samples);
  set.x0.resize(task.action_dim(), n);
  for (std::size_t m = 0; m < task.modality_dims.size(); ++m) {
    set.specs.push_back({"y" + std::to_string(m + 1), task.modality_dims[m], ModalityKind::state});
    set.cond.emplace_back(task.modality_dims[m], n);
  }
  set.horizon = 1;
  set.priority_k = task.priority_k;
  CounterRng rng(seed, 0x6A55);
  for (Eigen::Index j = 0; j < n; ++j) {
    auto [x, y] = task.sample(rng);
    set.x0.col(j) = x;
    for (std::size_t m = 0; m < y.size(); ++m) set.cond[m].col(j) = y[m];
  }
  return set;
}

NetConfig score_check_net(const GaussianMixtureTask& task, int modalities, int hidden, int blocks) {
  NetConfig c;
  c.action_dim = task.action_dim();
  c.hidden = hidden;
  c.blocks = blocks;
  c.obs_horizon = 1;
  for (int m = 0; m < modalities; ++m) {
    c.cond_specs.push_back({"y" + std::to_string(m + 1), task.modality_dims[static_cast<std::size_t>(m)],
                            ModalityKind::state});
  }
  return c;
}

namespace {

CondBatch broadcast(std::span<const Vec> y, Eigen::Index cols) {
  CondBatch cond;
  for (const auto& v : y) cond.modalities.push_back(v.replicate(1, cols));
  return cond;
}

TheoremGrid make_grid(const ScoreCheckConfig& c) {
  TheoremGrid grid;
  grid.points_per_dim = c.points_per_dim;
  grid.half_width_stddevs = c.half_width_stddevs;
  for (const auto& cond : c.conditions) {
    std::vector<Vec> y;
    for (double v : cond) y.push_back(Vec::Constant(1, v));
    grid.conditions.push_back(std::move(y));
  }
  return grid;
}

}  // namespace

EpsModel eps_model(const PolicyNet& net) {
  return [&net](const Mat& x, int t, std::span<const Vec> y) {
    const std::vector<int> steps(static_cast<std::size_t>(x.cols()), t);
    return net.predict(x, steps, broadcast(y, x.cols()));
  };
}

EpsModel eps_model(const ComposedPolicy& policy) {
  return [&policy](const Mat& x, int t, std::span<const Vec> y) {
    const std::vector<int> steps(static_cast<std::size_t>(x.cols()), t);
    return policy.predict(x, steps, broadcast(y, x.cols()));
  };
}

TheoremReport compare_models(const GaussianMixtureTask& task, const TheoremGrid& grid,
                             const NoiseSchedule& schedule, const EpsModel& a, const EpsModel& b) {
  std::vector<int> steps = grid.steps;
  if (steps.empty()) {
    for (int t = 1; t <= schedule.num_steps(); ++t) steps.push_back(t);
  }
  TheoremReport report;
  report.model_checked = true;
  report.conditions = static_cast<int>(grid.conditions.size());
  double total_sq = 0.0;
  long total_n = 0;
  for (int t : steps) {
    TheoremStepStats st;
    st.t = t;
    double sq = 0.0;
    long n = 0;
    for (const auto& y : grid.conditions) {
      const Mat pts =
          theorem_grid_points(task, schedule.alpha_bar(t), y, grid.points_per_dim, grid.half_width_stddevs);
      report.grid_points = static_cast<int>(pts.cols());
      const Mat diff = a(pts, t, y) - b(pts, t, y);
      st.max_abs = std::max(st.max_abs, diff.cwiseAbs().maxCoeff());
      sq += diff.squaredNorm();
      n += diff.size();
    }
    st.rms = std::sqrt(sq / static_cast<double>(n));
    total_sq += sq;
    total_n += n;
    report.overall_max_abs = std::max(report.overall_max_abs, st.max_abs);
    report.per_t.push_back(st);
  }
  report.overall_rms = std::sqrt(total_sq / static_cast<double>(total_n));
  return report;
}

ScoreCheckResult run_score_check(const ScoreCheckConfig& config, const NoiseSchedule& schedule) {
  const auto start = std::chrono::steady_clock::now();
  const GaussianMixtureTask task = score_check_task();
  const TrainingSet data = sample_task(task, config.samples, config.seed);
  const int m = static_cast<int>(task.modality_dims.size());

  TrainingConfig tc = config.training;
  ScoreCheckResult r;
  r.base = PolicyNet(score_check_net(task, task.priority_k, config.hidden, config.blocks), config.seed + 1);
  tc.seed = config.seed + 11;
  r.base_log = train_policy(r.base, data, tc, LossKind::base, schedule).reports;

  ResidualNet residual(score_check_net(task, m, config.hidden, config.blocks), config.mode, config.seed + 2);
  r.composed = ComposedPolicy(r.base, std::move(residual), true);
  tc.seed = config.seed + 12;
  r.residual_log = train_residual(r.composed, data, tc, schedule).reports;

  r.joint = PolicyNet(score_check_net(task, m, config.hidden, config.blocks), config.seed + 3);
  tc.seed = config.seed + 13;
  r.joint_log = train_policy(r.joint, data, tc, LossKind::joint, schedule).reports;

  const TheoremGrid grid = make_grid(config);
  r.composed_vs_oracle = verify_theorem1(task, grid, schedule, eps_model(r.composed));
  r.joint_vs_oracle = verify_theorem1(task, grid, schedule, eps_model(r.joint));
  r.composed_vs_joint = compare_models(task, grid, schedule, eps_model(r.composed), eps_model(r.joint));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json to_json(const ScoreCheckResult& r) {
  return {{"composed_vs_oracle", to_json(r.composed_vs_oracle)},
          {"joint_vs_oracle", to_json(r.joint_vs_oracle)},
          {"composed_vs_joint", to_json(r.composed_vs_joint)},
          {"base_final_val_loss", r.base_log.empty() ? 0.0 : r.base_log.back().val_loss},
          {"residual_final_val_loss", r.residual_log.empty() ? 0.0 : r.residual_log.back().val_loss},
          {"joint_final_val_loss", r.joint_log.empty() ? 0.0 : r.joint_log.back().val_loss},
          {"seconds", r.seconds}};
}

}  // namespace fdp
