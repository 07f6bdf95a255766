#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdp/datastore.hpp"
#include "fdp/sampling.hpp"
#include "fdp/toyenv.hpp"
#include "fdp/training.hpp"

namespace fdp {

inline const std::vector<std::string> kMethods = {"joint", "fdp_output", "fdp_blockwise", "poco", "cfg", "base_only"};
inline const std::vector<std::string> kPriorities = {"prop>vision", "vision>prop"};

struct ExperimentConfig {
  EnvConfig env;  // scale and perturbation are overridden per cell
  std::vector<std::string> scales = {"S"};
  std::vector<std::string> perturbations = {"none"};
  std::vector<int> demos = {10};
  std::vector<std::string> methods = {"joint", "fdp_blockwise"};
  std::vector<std::string> priorities = {"prop>vision"};
  std::vector<std::uint64_t> seeds = {0};
  TrainingConfig training;
  std::optional<TrainingConfig> residual_training;
  SamplerConfig sampler = [] {
    SamplerConfig s;
    s.clip_sample = 1.0;
    return s;
  }();
  int hidden = 128;
  int blocks = 4;
  int episodes = 300;
  int diffusion_steps = kDefaultDiffusionSteps;
  ScheduleKind schedule = ScheduleKind::squared_cosine;

  void validate() const;
  [[nodiscard]] TrainingConfig residual_config() const { return residual_training.value_or(training); }
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Throws ConfigError on malformed or inconsistent input.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Hash of everything that shapes a result except the per-row columns
/// (method, priority, demos, scale, perturbation, seed).
std::string experiment_hash(const ExperimentConfig& c);

/// Paths under the output directory.
struct ArtifactPaths {
  std::filesystem::path root;
  [[nodiscard]] std::filesystem::path dataset(const std::string& scale, int demos, std::uint64_t seed) const;
  [[nodiscard]] std::filesystem::path model(const std::string& key) const;
  [[nodiscard]] std::filesystem::path log(const std::string& key) const;
  [[nodiscard]] std::filesystem::path cell(const std::string& key) const;
  [[nodiscard]] std::filesystem::path results_csv() const { return root / "results.csv"; }
};

/// Trained networks for one (scale, demos, seed) unit and one priority.
struct ModelBundle {
  std::optional<PolicyNet> joint;
  std::optional<PolicyNet> base;
  std::optional<ComposedPolicy> fdp_output;
  std::optional<ComposedPolicy> fdp_blockwise;
  std::optional<PolicyNet> cfg;
};

/// Net roles a method needs: "joint", "base", "residual_output",
/// "residual_blockwise", "cfg".
std::vector<std::string> roles_for_method(const std::string& method);

NetConfig toy_net_config(const ExperimentConfig& c, const std::vector<ModalitySpec>& specs, bool nullable_tail);

/// Trains (or loads cached) networks for the listed roles. When `train` is
/// false, a missing checkpoint throws DependencyError naming the file.
ModelBundle prepare_models(const ExperimentConfig& c, const ArtifactPaths& paths, const DemoDataset& data,
                           const std::string& scale, int demos, std::uint64_t seed, const std::string& priority,
                           const std::vector<std::string>& roles, bool train);

/// Chunk policy driven by the diffusion sampler for the given method.
ChunkPolicy diffusion_chunk_policy(const ModelBundle& models, const DemoDataset& stats, const std::string& method,
                                   const std::string& priority, const SamplerConfig& sampler,
                                   const NoiseSchedule& schedule);

struct CellKey {
  std::string method;
  std::string priority;
  int demos = 0;
  std::string scale;
  std::string perturbation;
  std::uint64_t seed = 0;
};

std::string cell_hash(const ExperimentConfig& c, const CellKey& k);
ResultRow evaluate_cell(const ExperimentConfig& c, const ModelBundle& models, const DemoDataset& data,
                        const CellKey& k);

/// Dataset for one unit, generated (and cached) unless `generate` is false.
DemoDataset prepare_dataset(const ExperimentConfig& c, const ArtifactPaths& paths, const std::string& scale,
                            int demos, std::uint64_t seed, bool generate);

enum class Stage { gen_data, train, eval, sweep };

/// Runs the cross product for a stage. Units of (scale, demos, seed) run on a
/// worker pool capped by FDP_THREADS; completed cells are reused by hash.
/// Returns rows in deterministic order (gen-data and train return none).
std::vector<ResultRow> run_stage(const ExperimentConfig& c, const std::filesystem::path& out, Stage stage);

int worker_count(std::size_t jobs);

/// Residual-only fine-tuning on distractor demonstrations; returns success
/// before and after on the distractor environment and both base checksums.
struct FinetuneOutcome {
  double before = 0.0;
  double after = 0.0;
  std::uint64_t base_checksum_before = 0;
  std::uint64_t base_checksum_after = 0;
};
FinetuneOutcome run_finetune(const ExperimentConfig& c, const std::filesystem::path& out, const std::string& scale,
                             int demos, std::uint64_t seed, const std::string& priority, const std::string& method,
                             int ood_demos, const TrainingConfig& finetune_config);

}  // namespace fdp
