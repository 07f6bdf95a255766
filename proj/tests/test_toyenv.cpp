#include <doctest.h>

#include <cmath>

#include "fdp/errors.hpp"
#include "fdp/toyenv.hpp"
#include "test_support.hpp"

using namespace fdp;

namespace {

EnvConfig env_with(ArenaScale scale, PerturbationKind kind = PerturbationKind::none) {
  EnvConfig c;
  c.scale = scale;
  c.perturbation.kind = kind;
  return c;
}

}  // namespace

TEST_CASE("resets place block and goal inside the scale box") {
  for (auto scale : {ArenaScale::S, ArenaScale::M, ArenaScale::L}) {
    BlockPickEnv env(env_with(scale));
    const auto half = placement_half_extents(scale);
    bool inside = true;
    for (std::uint64_t i = 0; i < 10000; ++i) {
      CounterRng rng(2, i);
      env.reset(rng);
      const auto& st = env.state();
      inside = inside && std::abs(st.block[0]) <= half[0] && std::abs(st.block[1]) <= half[1] &&
               std::abs(st.goal[0]) <= half[0] && std::abs(st.goal[1]) <= half[1];
    }
    CHECK(inside);
  }
}

TEST_CASE("visual perturbations leave proprio untouched") {
  for (auto kind : {PerturbationKind::color, PerturbationKind::distractor, PerturbationKind::occlusion}) {
    BlockPickEnv clean(env_with(ArenaScale::M)), pert(env_with(ArenaScale::M, kind));
    CounterRng r1(5), r2(5), e1(6), e2(6);
    auto a = clean.reset(r1);
    auto b = pert.reset(r2);
    for (int s = 0; s < 40 && !clean.done(); ++s) {
      CHECK(a.proprio == b.proprio);
      if (kind == PerturbationKind::distractor) {
        for (int cell = 0; cell < 256; ++cell) {
          const bool is_distractor = std::count(pert.distractor_cells().begin(), pert.distractor_cells().end(), cell);
          if (!is_distractor) CHECK(a.vision(cell) == b.vision(cell));
        }
        CHECK(a.vision != b.vision);
      }
      if (kind == PerturbationKind::occlusion) CHECK(b.vision.isZero());
      const auto act = expert_action(clean.state(), e1);
      expert_action(pert.state(), e2);
      a = clean.step(act).obs;
      b = pert.step(act).obs;
    }
  }
}

TEST_CASE("inaction fails at max steps and stepping after the end throws") {
  BlockPickEnv env(env_with(ArenaScale::S));
  CounterRng rng(3);
  env.reset(rng);
  StepResult r;
  while (!env.done()) r = env.step({0.0, 0.0, 0.0});
  CHECK_FALSE(r.success);
  CHECK(env.step_count() == env.config().max_steps);
  CHECK_THROWS_AS(env.step({0.0, 0.0, 0.0}), ContractError);
}

TEST_CASE("moves are clipped to the maximum step") {
  BlockPickEnv env(env_with(ArenaScale::L));
  CounterRng rng(4);
  env.reset(rng);
  for (int i = 0; i < 10; ++i) {
    const double x0 = env.state().gripper[0], y0 = env.state().gripper[1];
    env.step({3.0 * (i % 2 ? 1 : -1), 5.0, 0.0});
    CHECK(std::hypot(env.state().gripper[0] - x0, env.state().gripper[1] - y0) <= 0.05 + 1e-12);
  }
}

TEST_CASE("expert phase rules") {
  CounterRng rng(1);
  EnvState st;
  st.block[0] = 0.1;
  st.block[1] = 0.2;
  st.gripper[0] = 0.1;
  st.gripper[1] = 0.2;
  CHECK(expert_action(st, rng, 0.0)[2] > 0.5);
  st.held = true;
  st.closed = true;
  st.goal[0] = 0.1;
  st.goal[1] = 0.2;
  CHECK(expert_action(st, rng, 0.0)[2] < 0.5);
}

TEST_CASE("expert solves every scale") {
  for (auto scale : {ArenaScale::S, ArenaScale::M, ArenaScale::L}) {
    const auto r = rollout(expert_policy(), env_with(scale), 300, 11);
    CHECK(r.success_rate == 1.0);
  }
}

TEST_CASE("random policy rarely succeeds on the large arena") {
  const auto r = rollout(random_policy(), env_with(ArenaScale::L), 300, 12);
  CHECK(r.success_rate < 0.05);
}

TEST_CASE("rollouts are deterministic and batch-size independent") {
  const auto a = rollout(expert_policy(), env_with(ArenaScale::M), 40, 13, true, 64);
  const auto b = rollout(expert_policy(), env_with(ArenaScale::M), 40, 13, true, 7);
  CHECK(a.success_rate == b.success_rate);
  CHECK(a.episodes == b.episodes);
}

TEST_CASE("physics is a pure function of seed and actions") {
  BlockPickEnv a(env_with(ArenaScale::M)), b(env_with(ArenaScale::M));
  CounterRng ra(8), rb(8), act(9);
  a.reset(ra);
  b.reset(rb);
  for (int i = 0; i < 50; ++i) {
    const Action u = {act.normal() * 0.05, act.normal() * 0.05, act.uniform()};
    a.step(u);
    b.step(u);
    CHECK(a.state().gripper[0] == b.state().gripper[0]);
    CHECK(a.state().block[1] == b.state().block[1]);
  }
}

TEST_CASE("success is monotone in the success radius") {
  double prev = 0.0;
  for (double radius : {0.005, 0.01, 0.02, 0.04}) {
    auto c = env_with(ArenaScale::M);
    c.success_radius = radius;
    const double rate = rollout(random_policy(), c, 100, 14).success_rate +
                        rollout(expert_policy(0.02), c, 100, 14).success_rate;
    CHECK(rate >= prev);
    prev = rate;
  }
}

TEST_CASE("env config json round trip and validation") {
  auto c = env_with(ArenaScale::L, PerturbationKind::occlusion);
  c.perturbation.occlusion_start = 3;
  const auto back = env_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  c.grid = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_arena_scale("XL"), ConfigError);
}

TEST_CASE("priority order decides modality order") {
  const EnvConfig c;
  const auto pv = toy_modality_specs(c, "prop>vision");
  const auto vp = toy_modality_specs(c, "vision>prop");
  CHECK(pv[0].kind == ModalityKind::proprio);
  CHECK(vp[0].kind == ModalityKind::vision_grid);
  CHECK(vp[0].dim == 256);
  CHECK_THROWS(toy_modality_specs(c, "state>vision"));
}
