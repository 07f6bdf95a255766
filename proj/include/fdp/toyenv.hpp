#pragma once

#include <array>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdp/diffusion.hpp"
#include "fdp/observation.hpp"
#include "fdp/rng.hpp"

namespace fdp {

enum class ArenaScale { S, M, L };
enum class PerturbationKind { none, color, distractor, occlusion };

std::string to_string(ArenaScale s);
std::string to_string(PerturbationKind k);
ArenaScale parse_arena_scale(const std::string& name);
PerturbationKind parse_perturbation_kind(const std::string& name);

/// Placement half-extents (x, y) of block and goal.
std::array<double, 2> placement_half_extents(ArenaScale s);

struct Perturbation {
  PerturbationKind kind = PerturbationKind::none;
  double color_intensity = 0.75;
  int distractor_count = 6;
  int occlusion_start = 0;
  int occlusion_end = -1;  // exclusive; negative means through max_steps

  [[nodiscard]] std::string tag() const { return to_string(kind); }
};

struct EnvConfig {
  ArenaScale scale = ArenaScale::S;
  Perturbation perturbation;
  int max_steps = 120;
  double success_radius = 0.04;
  double grasp_radius = 0.03;
  double max_move = 0.05;
  double min_separation = 0.1;
  int grid = 16;
  int obs_horizon = 2;
  int action_horizon = 8;

  void validate() const;
};

nlohmann::json to_json(const EnvConfig& c);
EnvConfig env_config_from_json(const nlohmann::json& j);

inline constexpr double kArenaHalf = 0.5;
inline constexpr int kActionDim = 3;
inline constexpr int kProprioDim = 3;

struct EnvState {
  double gripper[2] = {0.0, -0.45};
  bool closed = false;
  double block[2] = {0.0, 0.0};
  double goal[2] = {0.0, 0.0};
  bool held = false;
};

struct RenderedObs {
  Vec proprio;  // x, y, closed
  Vec vision;   // grid * grid, row-major from the top-left cell
};

struct StepResult {
  RenderedObs obs;
  bool done = false;
  bool success = false;
};

using Action = std::array<double, kActionDim>;

class BlockPickEnv {
 public:
  explicit BlockPickEnv(EnvConfig config = {});

  RenderedObs reset(CounterRng& rng);
  /// Throws ContractError once the episode is done.
  StepResult step(const Action& action);

  [[nodiscard]] const EnvState& state() const { return state_; }
  [[nodiscard]] const EnvConfig& config() const { return config_; }
  [[nodiscard]] int step_count() const { return step_count_; }
  [[nodiscard]] bool done() const { return done_; }
  [[nodiscard]] bool success() const { return success_; }
  [[nodiscard]] RenderedObs observe() const;
  [[nodiscard]] const std::vector<int>& distractor_cells() const { return distractors_; }

 private:
  [[nodiscard]] bool vision_occluded(int step) const;

  EnvConfig config_;
  EnvState state_;
  std::vector<int> distractors_;
  int step_count_ = 0;
  bool done_ = false;
  bool success_ = false;
};

/// Privileged scripted expert: approach, close, carry, open. Jitter of the
/// given std is drawn from `rng` on each move component.
Action expert_action(const EnvState& state, CounterRng& rng, double jitter_std = 0.004);

/// Toy modality specs in priority order for "prop>vision" or "vision>prop".
std::vector<ModalitySpec> toy_modality_specs(const EnvConfig& config, const std::string& priority);
/// Index of each spec in the canonical (proprio, vision) order.
std::vector<int> toy_modality_order(const std::string& priority);

/// One rollout slot visible to a chunk policy.
struct RolloutView {
  const std::deque<RenderedObs>* history;  // oldest first, length obs_horizon
  const EnvState* state;
  CounterRng* rng;
};

/// Returns one action sequence per view; each is executed open-loop (possibly
/// truncated by episode end) before the policy is queried again.
using ChunkPolicy = std::function<std::vector<std::vector<Action>>(std::span<const RolloutView> views)>;

struct EpisodeRecord {
  std::vector<Vec> proprio;  // per step, before acting
  std::vector<Vec> vision;
  std::vector<Action> actions;
  bool success = false;
  std::string perturbation = "none";
  std::uint64_t seed = 0;
  int steps = 0;

  friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

struct RolloutResult {
  double success_rate = 0.0;
  std::vector<EpisodeRecord> episodes;
};

/// Runs `episodes` environments in lockstep; episode i resets from seed
/// (seed, i). Observation/action streams are kept only when `keep_streams`.
RolloutResult rollout(const ChunkPolicy& policy, const EnvConfig& config, int episodes, std::uint64_t seed,
                      bool keep_streams = false, int batch = 64);

ChunkPolicy expert_policy(double jitter_std = 0.004);
ChunkPolicy random_policy();

}  // namespace fdp
