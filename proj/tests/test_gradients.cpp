#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fdp/sampling.hpp"
#include "test_support.hpp"

using namespace fdp;
using namespace fdp::test;

namespace {

constexpr int kProbes = 64;

// Indices spread over every parameter block, then topped up at random.
std::vector<std::size_t> probe_set(const ParameterLayout& layout, CounterRng& rng) {
  std::vector<std::size_t> out;
  for (const auto& b : layout.blocks()) {
    const auto n = static_cast<std::uint64_t>(b.rows) * static_cast<std::uint64_t>(b.cols);
    out.push_back(b.offset + rng.below(n));
  }
  while (out.size() < kProbes) out.push_back(rng.below(layout.size()));
  out.resize(kProbes);
  return out;
}

template <class LossAt>
double worst_relative_error(std::span<double> params, std::span<const double> grad,
                            std::span<const std::size_t> probes, const LossAt& loss_at) {
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i : probes) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = loss_at();
    params[i] = keep - h;
    const double down = loss_at();
    params[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  return worst;
}

struct Problem {
  std::vector<ModalitySpec> specs = small_specs();
  NoiseSchedule schedule = build_schedule(ScheduleKind::squared_cosine, 100);
  CounterRng rng{42};
  Mat x0;
  CondBatch cond;
  NoiseDraws draws;
  Problem() {
    x0 = random_mat(4, 5, rng);
    cond = random_cond(specs, 2, 5, rng);
    draws = draw_noise(schedule, 5, 4, rng);
  }
};

}  // namespace

TEST_CASE("loss_joint gradient matches central differences") {
  Problem p;
  PolicyNet net(small_net(p.specs), 1);
  perturb(net.params(), p.rng, 0.05);
  const auto lv = loss_joint(net, p.x0, p.cond, p.schedule, p.draws);
  const auto probes = probe_set(net.layout(), p.rng);
  const double err = worst_relative_error(net.params(), lv.grad, probes, [&] {
    return loss_joint(net, p.x0, p.cond, p.schedule, p.draws, false).loss;
  });
  CHECK(err < 1e-4);
}

TEST_CASE("loss_base gradient matches central differences") {
  Problem p;
  PolicyNet net(small_net({p.specs[0]}), 2);
  perturb(net.params(), p.rng, 0.05);
  const auto lv = loss_base(net, p.x0, p.cond, p.schedule, p.draws);
  const auto probes = probe_set(net.layout(), p.rng);
  const double err = worst_relative_error(net.params(), lv.grad, probes, [&] {
    return loss_base(net, p.x0, p.cond, p.schedule, p.draws, false).loss;
  });
  CHECK(err < 1e-4);
}

TEST_CASE("loss_cfg gradient covers null tokens") {
  Problem p;
  auto cfg = small_net(p.specs);
  cfg.nullable = {false, true};
  PolicyNet net(cfg, 3);
  perturb(net.params(), p.rng, 0.05);
  draw_guidance_drops(p.draws, 2, 1, 0.5, p.rng);
  const auto lv = loss_cfg(net, p.x0, p.cond, p.schedule, p.draws);
  const auto probes = probe_set(net.layout(), p.rng);
  const double err = worst_relative_error(net.params(), lv.grad, probes, [&] {
    return loss_cfg(net, p.x0, p.cond, p.schedule, p.draws, false).loss;
  });
  CHECK(err < 1e-4);
}

TEST_CASE("loss_residual gradient matches central differences in both modes") {
  for (auto mode : {ComposeMode::output_compose, ComposeMode::blockwise_compose}) {
    CAPTURE(to_string(mode));
    Problem p;
    PolicyNet base(small_net({p.specs[0]}), 4);
    perturb(base.params(), p.rng, 0.05);
    ComposedPolicy policy(base, ResidualNet(small_net(p.specs), mode, 5));
    perturb(policy.residual().params(), p.rng, 0.05);
    const auto lv = loss_residual(policy, p.x0, p.cond, p.schedule, p.draws);
    REQUIRE(lv.grad.size() == policy.residual().num_params());
    const auto probes = probe_set(policy.residual().layout(), p.rng);
    const double err = worst_relative_error(policy.residual().params(), lv.grad, probes, [&] {
      return loss_residual(policy, p.x0, p.cond, p.schedule, p.draws, false).loss;
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("zero-initialized residual still receives gradient at its couplings") {
  Problem p;
  PolicyNet base(small_net({p.specs[0]}), 6);
  ComposedPolicy policy(base, ResidualNet(small_net(p.specs), ComposeMode::blockwise_compose, 7));
  const auto lv = loss_residual(policy, p.x0, p.cond, p.schedule, p.draws);
  double coupling_norm = 0.0;
  for (const auto& z : policy.residual().zero_layers()) {
    for (int i = 0; i < z.out * z.in; ++i) coupling_norm += std::abs(lv.grad[z.weight + static_cast<std::size_t>(i)]);
  }
  CHECK(coupling_norm > 0.0);
}
