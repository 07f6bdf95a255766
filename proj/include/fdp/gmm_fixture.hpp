#pragma once

#include <json.hpp>

#include "fdp/oracle.hpp"
#include "fdp/policy_nets.hpp"
#include "fdp/training.hpp"

namespace fdp {

/// 1D action, two scalar modalities y1 (prioritized) and y2, both N(0, 1):
/// two equal-weight components with means +-1 + 0.5 y1 +- 0.5 y2, std 0.4.
GaussianMixtureTask score_check_task();

struct ScoreCheckConfig {
  int samples = 40000;
  int hidden = 128;
  int blocks = 4;
  ComposeMode mode = ComposeMode::blockwise_compose;
  TrainingConfig training;
  std::uint64_t seed = 0;
  int points_per_dim = 101;
  double half_width_stddevs = 4.0;
  std::vector<std::vector<double>> conditions = {{0.0, 0.0}, {1.0, -1.0}, {-1.0, 1.0}, {0.5, 0.5}, {-1.5, -0.5}};

  ScoreCheckConfig();
};

nlohmann::json to_json(const ScoreCheckConfig& c);
ScoreCheckConfig score_check_config_from_json(const nlohmann::json& j);

/// Samples the task into a training set (x0 is 1 x N; modalities y1, y2).
TrainingSet sample_task(const GaussianMixtureTask& task, int samples, std::uint64_t seed);

NetConfig score_check_net(const GaussianMixtureTask& task, int modalities, int hidden, int blocks);

/// Grid mismatch between two noise predictors, same grid as the theorem check.
TheoremReport compare_models(const GaussianMixtureTask& task, const TheoremGrid& grid,
                             const NoiseSchedule& schedule, const EpsModel& a, const EpsModel& b);

EpsModel eps_model(const PolicyNet& net);
EpsModel eps_model(const ComposedPolicy& policy);

struct ScoreCheckResult {
  PolicyNet base;
  ComposedPolicy composed;
  PolicyNet joint;
  TheoremReport composed_vs_oracle;
  TheoremReport joint_vs_oracle;
  TheoremReport composed_vs_joint;
  std::vector<LossReport> base_log, residual_log, joint_log;
  double seconds = 0.0;
};

/// Trains base, then residual against the frozen base, then an independent
/// joint model, and compares all of them on the grid.
ScoreCheckResult run_score_check(const ScoreCheckConfig& config, const NoiseSchedule& schedule);

nlohmann::json to_json(const ScoreCheckResult& r);

}  // namespace fdp
