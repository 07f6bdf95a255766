#include "fdp/toyenv.hpp"

#include <algorithm>
#include <cmath>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

constexpr double kHome[2] = {0.0, -0.45};
constexpr double kBlockIntensity = 1.0;
constexpr double kGoalIntensity = 0.5;
constexpr double kGripperIntensity = 0.25;
constexpr double kDistractorIntensity = 1.0;
constexpr double kCloseDistance = 0.015;

double dist(const double a[2], const double b[2]) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

/// Bilinear splat onto cell centers.
void splat(Vec& grid, int g, double x, double y, double intensity) {
  const double cell = 2.0 * kArenaHalf / g;
  const double u = (x + kArenaHalf) / cell - 0.5;
  const double v = (kArenaHalf - y) / cell - 0.5;
  const int c0 = static_cast<int>(std::floor(u));
  const int r0 = static_cast<int>(std::floor(v));
  const double fu = u - c0, fv = v - r0;
  for (int dr = 0; dr <= 1; ++dr) {
    for (int dc = 0; dc <= 1; ++dc) {
      const int r = r0 + dr, c = c0 + dc;
      if (r < 0 || r >= g || c < 0 || c >= g) continue;
      const double w = (dr ? fv : 1.0 - fv) * (dc ? fu : 1.0 - fu);
      grid[r * g + c] += intensity * w;
    }
  }
}

void move_toward(Action& a, const double from[2], const double to[2], double max_move) {
  double dx = to[0] - from[0], dy = to[1] - from[1];
  const double n = std::hypot(dx, dy);
  if (n > max_move) {
    dx *= max_move / n;
    dy *= max_move / n;
  }
  a[0] = dx;
  a[1] = dy;
}

}  // namespace

std::string to_string(ArenaScale s) {
  switch (s) {
    case ArenaScale::S: return "S";
    case ArenaScale::M: return "M";
    case ArenaScale::L: return "L";
  }
  return "S";
}

std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::none: return "none";
    case PerturbationKind::color: return "color";
    case PerturbationKind::distractor: return "distractor";
    case PerturbationKind::occlusion: return "occlusion";
  }
  return "none";
}

ArenaScale parse_arena_scale(const std::string& name) {
  if (name == "S") return ArenaScale::S;
  if (name == "M") return ArenaScale::M;
  if (name == "L") return ArenaScale::L;
  throw ConfigError("unknown arena scale: " + name);
}

PerturbationKind parse_perturbation_kind(const std::string& name) {
  for (auto k : {PerturbationKind::none, PerturbationKind::color, PerturbationKind::distractor,
                 PerturbationKind::occlusion}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown perturbation: " + name);
}

std::array<double, 2> placement_half_extents(ArenaScale s) {
  switch (s) {
    case ArenaScale::S: return {0.075, 0.10};
    case ArenaScale::M: return {0.175, 0.225};
    case ArenaScale::L: return {0.275, 0.375};
  }
  return {0.075, 0.10};
}

void EnvConfig::validate() const {
  if (max_steps < 1) throw ConfigError("max_steps must be positive");
  if (!(success_radius > 0.0) || !(grasp_radius > 0.0) || !(max_move > 0.0)) {
    throw ConfigError("radii and max move must be positive");
  }
  if (grid < 2) throw ConfigError("vision grid must be at least 2x2");
  if (obs_horizon < 1 || action_horizon < 1) throw ConfigError("horizons must be positive");
  const auto& p = perturbation;
  const int end = p.occlusion_end < 0 ? max_steps : p.occlusion_end;
  if (p.occlusion_start < 0 || p.occlusion_start > end || end > max_steps) {
    throw ConfigError("occlusion interval must lie within [0, max_steps]");
  }
  if (p.distractor_count < 0 || p.distractor_count > grid * grid) throw ConfigError("bad distractor count");
  if (!(p.color_intensity >= 0.0 && p.color_intensity <= 1.0)) throw ConfigError("color intensity outside [0, 1]");
}

nlohmann::json to_json(const EnvConfig& c) {
  const auto& p = c.perturbation;
  return {{"scale", to_string(c.scale)},
          {"perturbation",
           {{"kind", to_string(p.kind)},
            {"color_intensity", p.color_intensity},
            {"distractor_count", p.distractor_count},
            {"occlusion_start", p.occlusion_start},
            {"occlusion_end", p.occlusion_end}}},
          {"max_steps", c.max_steps},
          {"success_radius", c.success_radius},
          {"grasp_radius", c.grasp_radius},
          {"max_move", c.max_move},
          {"min_separation", c.min_separation},
          {"grid", c.grid},
          {"obs_horizon", c.obs_horizon},
          {"action_horizon", c.action_horizon}};
}

EnvConfig env_config_from_json(const nlohmann::json& j) {
  EnvConfig c;
  try {
    c.scale = parse_arena_scale(j.value("scale", std::string("S")));
    if (j.contains("perturbation")) {
      const auto& p = j.at("perturbation");
      if (p.is_string()) {
        c.perturbation.kind = parse_perturbation_kind(p.get<std::string>());
      } else {
        c.perturbation.kind = parse_perturbation_kind(p.value("kind", std::string("none")));
        c.perturbation.color_intensity = p.value("color_intensity", c.perturbation.color_intensity);
        c.perturbation.distractor_count = p.value("distractor_count", c.perturbation.distractor_count);
        c.perturbation.occlusion_start = p.value("occlusion_start", c.perturbation.occlusion_start);
        c.perturbation.occlusion_end = p.value("occlusion_end", c.perturbation.occlusion_end);
      }
    }
    c.max_steps = j.value("max_steps", c.max_steps);
    c.success_radius = j.value("success_radius", c.success_radius);
    c.grasp_radius = j.value("grasp_radius", c.grasp_radius);
    c.max_move = j.value("max_move", c.max_move);
    c.min_separation = j.value("min_separation", c.min_separation);
    c.grid = j.value("grid", c.grid);
    c.obs_horizon = j.value("obs_horizon", c.obs_horizon);
    c.action_horizon = j.value("action_horizon", c.action_horizon);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("env config: ") + e.what());
  }
  c.validate();
  return c;
}

BlockPickEnv::BlockPickEnv(EnvConfig config) : config_(std::move(config)) { config_.validate(); }

RenderedObs BlockPickEnv::reset(CounterRng& rng) {
  const auto [hx, hy] = placement_half_extents(config_.scale);
  CounterRng extra = rng.fork(0xD157);
  state_ = EnvState{};
  state_.gripper[0] = kHome[0];
  state_.gripper[1] = kHome[1];
  do {
    state_.block[0] = (2.0 * rng.uniform() - 1.0) * hx;
    state_.block[1] = (2.0 * rng.uniform() - 1.0) * hy;
    state_.goal[0] = (2.0 * rng.uniform() - 1.0) * hx;
    state_.goal[1] = (2.0 * rng.uniform() - 1.0) * hy;
  } while (dist(state_.block, state_.goal) < config_.min_separation);

  distractors_.clear();
  if (config_.perturbation.kind == PerturbationKind::distractor) {
    const int cells = config_.grid * config_.grid;
    while (static_cast<int>(distractors_.size()) < config_.perturbation.distractor_count) {
      const int c = static_cast<int>(extra.below(static_cast<std::uint64_t>(cells)));
      if (std::find(distractors_.begin(), distractors_.end(), c) == distractors_.end()) distractors_.push_back(c);
    }
  }
  step_count_ = 0;
  done_ = false;
  success_ = false;
  return observe();
}

bool BlockPickEnv::vision_occluded(int step) const {
  const auto& p = config_.perturbation;
  if (p.kind != PerturbationKind::occlusion) return false;
  const int end = p.occlusion_end < 0 ? config_.max_steps : p.occlusion_end;
  return step >= p.occlusion_start && step < end;
}

RenderedObs BlockPickEnv::observe() const {
  RenderedObs obs;
  obs.proprio = Vec(3);
  obs.proprio << state_.gripper[0], state_.gripper[1], state_.closed ? 1.0 : 0.0;
  const int g = config_.grid;
  obs.vision = Vec::Zero(g * g);
  if (vision_occluded(step_count_)) return obs;
  const double block_i =
      config_.perturbation.kind == PerturbationKind::color ? config_.perturbation.color_intensity : kBlockIntensity;
  splat(obs.vision, g, state_.block[0], state_.block[1], block_i);
  splat(obs.vision, g, state_.goal[0], state_.goal[1], kGoalIntensity);
  splat(obs.vision, g, state_.gripper[0], state_.gripper[1], kGripperIntensity);
  for (int c : distractors_) obs.vision[c] += kDistractorIntensity;
  obs.vision = obs.vision.cwiseMin(1.0).cwiseMax(0.0);
  return obs;
}

StepResult BlockPickEnv::step(const Action& action) {
  if (done_) throw ContractError("step called on a finished episode");
  double dx = std::isfinite(action[0]) ? action[0] : 0.0;
  double dy = std::isfinite(action[1]) ? action[1] : 0.0;
  const double n = std::hypot(dx, dy);
  if (n > config_.max_move) {
    dx *= config_.max_move / n;
    dy *= config_.max_move / n;
  }
  state_.gripper[0] = std::clamp(state_.gripper[0] + dx, -kArenaHalf, kArenaHalf);
  state_.gripper[1] = std::clamp(state_.gripper[1] + dy, -kArenaHalf, kArenaHalf);
  if (state_.held) {
    state_.block[0] = state_.gripper[0];
    state_.block[1] = state_.gripper[1];
  }
  const bool close = action[2] > 0.5;
  if (close && !state_.closed && dist(state_.gripper, state_.block) < config_.grasp_radius) {
    state_.held = true;
    state_.block[0] = state_.gripper[0];
    state_.block[1] = state_.gripper[1];
  }
  if (!close) state_.held = false;
  state_.closed = close;
  ++step_count_;
  if (!state_.held && dist(state_.block, state_.goal) < config_.success_radius) success_ = true;
  done_ = success_ || step_count_ >= config_.max_steps;
  return {observe(), done_, success_};
}

Action expert_action(const EnvState& s, CounterRng& rng, double jitter_std) {
  Action a{0.0, 0.0, 0.0};
  if (s.held) {
    move_toward(a, s.gripper, s.goal, 0.05);
    a[2] = dist(s.block, s.goal) < kCloseDistance ? 0.0 : 1.0;
  } else if (s.closed) {
    move_toward(a, s.gripper, s.block, 0.05);
    a[2] = 0.0;
  } else {
    move_toward(a, s.gripper, s.block, 0.05);
    const double after[2] = {s.gripper[0] + a[0], s.gripper[1] + a[1]};
    a[2] = dist(after, s.block) < kCloseDistance ? 1.0 : 0.0;
  }
  a[0] += jitter_std * rng.normal();
  a[1] += jitter_std * rng.normal();
  return a;
}

std::vector<ModalitySpec> toy_modality_specs(const EnvConfig& config, const std::string& priority) {
  const ModalitySpec prop{"proprio", kProprioDim, ModalityKind::proprio};
  const ModalitySpec vis{"vision", config.grid * config.grid, ModalityKind::vision_grid};
  if (priority == "prop>vision") return {prop, vis};
  if (priority == "vision>prop") return {vis, prop};
  throw ConfigError("unknown priority order: " + priority);
}

std::vector<int> toy_modality_order(const std::string& priority) {
  if (priority == "prop>vision") return {0, 1};
  if (priority == "vision>prop") return {1, 0};
  throw ConfigError("unknown priority order: " + priority);
}

RolloutResult rollout(const ChunkPolicy& policy, const EnvConfig& config, int episodes, std::uint64_t seed,
                      bool keep_streams, int batch) {
  if (episodes < 1) throw ArgumentError("rollout needs at least one episode");
  config.validate();
  batch = std::max(1, batch);
  RolloutResult result;
  result.episodes.resize(static_cast<std::size_t>(episodes));
  int successes = 0;

  struct Slot {
    BlockPickEnv env;
    std::deque<RenderedObs> history;
    std::deque<Action> queue;
    CounterRng rng;
    EpisodeRecord* record;
  };

  for (int first = 0; first < episodes; first += batch) {
    const int count = std::min(batch, episodes - first);
    std::vector<Slot> slots;
    slots.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int ep = first + i;
      CounterRng env_rng(seed, static_cast<std::uint64_t>(ep));
      Slot s{BlockPickEnv(config), {}, {}, env_rng.fork(0xAC7), &result.episodes[static_cast<std::size_t>(ep)]};
      const RenderedObs obs = s.env.reset(env_rng);
      s.history.assign(static_cast<std::size_t>(config.obs_horizon), obs);
      s.record->perturbation = config.perturbation.tag();
      s.record->seed = static_cast<std::uint64_t>(ep);
      slots.push_back(std::move(s));
    }
    for (;;) {
      std::vector<std::size_t> need;
      bool any_active = false;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].env.done()) continue;
        any_active = true;
        if (slots[i].queue.empty()) need.push_back(i);
      }
      if (!any_active) break;
      if (!need.empty()) {
        std::vector<RolloutView> views;
        for (std::size_t i : need) views.push_back({&slots[i].history, &slots[i].env.state(), &slots[i].rng});
        const auto chunks = policy(views);
        if (chunks.size() != need.size()) throw ArgumentError("policy returned the wrong number of chunks");
        for (std::size_t j = 0; j < need.size(); ++j) {
          if (chunks[j].empty()) throw ArgumentError("policy returned an empty chunk");
          slots[need[j]].queue.assign(chunks[j].begin(), chunks[j].end());
        }
      }
      for (auto& s : slots) {
        if (s.env.done()) continue;
        const Action a = s.queue.front();
        s.queue.pop_front();
        if (keep_streams) {
          s.record->proprio.push_back(s.history.back().proprio);
          s.record->vision.push_back(s.history.back().vision);
          s.record->actions.push_back(a);
        }
        const StepResult r = s.env.step(a);
        s.history.pop_front();
        s.history.push_back(r.obs);
        if (r.done) {
          s.record->success = r.success;
          s.record->steps = s.env.step_count();
          successes += r.success ? 1 : 0;
          s.queue.clear();
        }
      }
    }
  }
  result.success_rate = static_cast<double>(successes) / episodes;
  return result;
}

ChunkPolicy expert_policy(double jitter_std) {
  return [jitter_std](std::span<const RolloutView> views) {
    std::vector<std::vector<Action>> out;
    for (const auto& v : views) out.push_back({expert_action(*v.state, *v.rng, jitter_std)});
    return out;
  };
}

ChunkPolicy random_policy() {
  return [](std::span<const RolloutView> views) {
    std::vector<std::vector<Action>> out;
    for (const auto& v : views) {
      auto& rng = *v.rng;
      out.push_back({Action{(2.0 * rng.uniform() - 1.0) * 0.05, (2.0 * rng.uniform() - 1.0) * 0.05,
                            rng.uniform()}});
    }
    return out;
  };
}

}  // namespace fdp
