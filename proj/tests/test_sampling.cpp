#include <doctest.h>

#include <cmath>

#include "fdp/errors.hpp"
#include "fdp/sampling.hpp"
#include "test_support.hpp"

using namespace fdp;
using namespace fdp::test;

namespace {

struct Nets {
  std::vector<ModalitySpec> specs = small_specs();
  PolicyNet base{small_net({specs[0]}), 1};
  PolicyNet joint{small_net(specs), 2};
  PolicyNet cfg;
  ComposedPolicy fdp_out{base, ResidualNet(small_net(specs), ComposeMode::output_compose, 3)};
  ComposedPolicy fdp_block{base, ResidualNet(small_net(specs), ComposeMode::blockwise_compose, 4)};
  CondBatch cond;
  Nets() {
    auto c = small_net(specs);
    c.nullable = {false, true};
    cfg = PolicyNet(c, 5);
    CounterRng rng(77);
    cond = random_cond(specs, 2, 3, rng);
  }
  PolicySet set() const {
    PolicySet s;
    s.base = &base;
    s.joint = &joint;
    s.independent = &joint;
    s.cfg = &cfg;
    return s;
  }
};

Mat run(const PolicySet& set, const CondBatch& cond, const SamplerConfig& sc, const NoiseSchedule& s,
        SampleTrace* trace = nullptr) {
  std::vector<CounterRng> rngs;
  for (int b = 0; b < 3; ++b) rngs.emplace_back(sc.seed, static_cast<std::uint64_t>(b));
  return sample_action(set, cond, sc, s, 4, rngs, trace);
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("poco with zero weight is the base prediction") {
  Nets n;
  SamplerConfig sc;
  sc.composition = Composition::poco;
  sc.poco_lambda = 0.0;
  CounterRng rng(1);
  const Mat x = random_mat(4, 3, rng);
  SamplerConfig base_only = sc;
  base_only.composition = Composition::base;
  CHECK(compose_eps(n.set(), x, 10, n.cond, sc) == compose_eps(n.set(), x, 10, n.cond, base_only));
}

TEST_CASE("cfg with unit conditional weight is the conditioned prediction") {
  Nets n;
  SamplerConfig sc;
  sc.composition = Composition::cfg;
  sc.cfg_lambda1 = 1.0;
  sc.cfg_lambda2 = 0.0;
  CounterRng rng(2);
  const Mat x = random_mat(4, 3, rng);
  const std::vector<int> t(3, 10);
  CHECK(compose_eps(n.set(), x, 10, n.cond, sc) == n.cfg.predict(x, t, n.cond));
}

TEST_CASE("cfg blends full and null-token predictions") {
  Nets n;
  SamplerConfig sc;
  sc.composition = Composition::cfg;
  CounterRng rng(3);
  const Mat x = random_mat(4, 3, rng);
  const std::vector<int> t(3, 30);
  CondBatch nulled = n.cond;
  nulled.dropped = {{}, {1, 1, 1}};
  const Mat expect = 1.1 * n.cfg.predict(x, t, n.cond) + 0.1 * n.cfg.predict(x, t, nulled);
  CHECK((compose_eps(n.set(), x, 30, n.cond, sc) - expect).cwiseAbs().maxCoeff() < 1e-14);
  sc.cfg_normalized = true;
  const Mat normalized = (1.1 * n.cfg.predict(x, t, n.cond) + 0.1 * n.cfg.predict(x, t, nulled)) / 1.2;
  CHECK((compose_eps(n.set(), x, 30, n.cond, sc) - normalized).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("zero-init compositions reproduce base sampling bit-exactly") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  Nets n;
  for (auto method : {SamplerMethod::ddim, SamplerMethod::ddpm}) {
    SamplerConfig sc;
    sc.method = method;
    sc.num_inference_steps = method == SamplerMethod::ddpm ? 100 : 8;
    sc.seed = 42;
    sc.composition = Composition::base;
    SampleTrace base_trace;
    const Mat base = run(n.set(), n.cond, sc, s, &base_trace);
    for (auto comp : {Composition::fdp_output, Composition::fdp_blockwise}) {
      auto set = n.set();
      set.fdp = comp == Composition::fdp_output ? &n.fdp_out : &n.fdp_block;
      sc.composition = comp;
      SampleTrace trace;
      CHECK(run(set, n.cond, sc, s, &trace) == base);
      CHECK(trace.states == base_trace.states);
    }
    sc.composition = Composition::poco;
    sc.poco_lambda = 0.0;
    CHECK(run(n.set(), n.cond, sc, s) == base);
  }
}

TEST_CASE("deterministic DDIM is repeatable and seeded sampling replays") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  Nets n;
  SamplerConfig sc;
  sc.composition = Composition::joint;
  sc.seed = 3;
  CHECK(run(n.set(), n.cond, sc, s) == run(n.set(), n.cond, sc, s));
  sc.method = SamplerMethod::ddpm;
  sc.num_inference_steps = 100;
  CHECK(run(n.set(), n.cond, sc, s) == run(n.set(), n.cond, sc, s));
  SamplerConfig other = sc;
  other.seed = 4;
  CHECK(run(n.set(), n.cond, sc, s) != run(n.set(), n.cond, other, s));
}

TEST_CASE("eps call accounting") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  Nets n;
  SamplerConfig sc;
  sc.num_inference_steps = 8;
  for (auto comp : {Composition::joint, Composition::cfg}) {
    sc.composition = comp;
    SampleTrace trace;
    run(n.set(), n.cond, sc, s, &trace);
    CHECK(trace.eps_calls == (comp == Composition::cfg ? 16 : 8));
    CHECK(trace.states.size() == 9);
    CHECK(trace.steps.back() == 0);
  }
}

TEST_CASE("DDPM update edge cases") {
  const Vec x = Vec::Constant(2, 0.3);
  const Vec eps = Vec::Constant(2, 5.0);
  CHECK(ddpm_update(x, eps, 1.0, 0.5, 0.0, Vec::Zero(2)) == x);
  CHECK((ddpm_update(x, Vec::Zero(2), 0.81, 0.5, 0.0, Vec::Zero(2)) - x / 0.9).norm() < 1e-15);
}

TEST_CASE("DDIM single jump with exact noise recovers x0") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  CounterRng rng(4);
  const Vec x0 = standard_normal(3, rng), eps = standard_normal(3, rng);
  const Vec xt = diffuse(s.alpha_bar(100), x0, eps);
  CHECK((ddim_step(xt, eps, s, 100, 0, 0.0, rng) - x0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("DDIM timesteps are evenly spaced with endpoints") {
  const auto ts = ddim_timesteps(100, 8);
  REQUIRE(ts.size() == 8);
  CHECK(ts.front() == 100);
  CHECK(ts.back() == 1);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  CHECK(ddim_timesteps(100, 100).size() == 100);
}

TEST_CASE("sampler config validation") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  SamplerConfig sc;
  sc.num_inference_steps = 0;
  CHECK_THROWS_AS(sc.validate(s), ArgumentError);
  sc.num_inference_steps = 101;
  CHECK_THROWS_AS(sc.validate(s), ArgumentError);
  sc = {};
  sc.method = SamplerMethod::ddpm;
  sc.num_inference_steps = 8;
  CHECK_THROWS_AS(sc.validate(s), ArgumentError);
  CHECK(sampler_config_from_json(to_json(SamplerConfig{})).num_inference_steps == 8);
}

TEST_CASE("oracle-eps DDPM samples match a single Gaussian") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const double mu = 0.7, var = 0.25;
  auto oracle = [&](const Mat& x, int t) -> Mat {
    const double ab = s.alpha_bar(t);
    const Mat score = -(x.array() - std::sqrt(ab) * mu) / (ab * var + 1 - ab);
    return -std::sqrt(1 - ab) * score;
  };
  SamplerConfig sc;
  sc.method = SamplerMethod::ddpm;
  sc.num_inference_steps = 100;
  std::vector<CounterRng> rngs;
  for (int b = 0; b < 100000; ++b) rngs.emplace_back(9, static_cast<std::uint64_t>(b));
  const Mat x = sample_with_eps(oracle, sc, s, 1, rngs);
  const double mean = x.mean();
  const double v = (x.array() - mean).square().mean();
  CHECK(std::abs(mean - mu) < 0.05 * mu);
  CHECK(std::abs(v - var) < 0.05 * var);
}

TEST_CASE("oracle-eps DDIM and DDPM agree on a bimodal target") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto oracle = [&](const Mat& x, int t) -> Mat {
    const double ab = s.alpha_bar(t), v = ab * 0.04 + 1 - ab;
    Mat out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double a = -std::pow(x(0, j) - std::sqrt(ab), 2) / (2 * v);
      const double b = -std::pow(x(0, j) + std::sqrt(ab), 2) / (2 * v);
      const double m = std::max(a, b);
      const double wa = std::exp(a - m), wb = std::exp(b - m);
      const double score = (wa * -(x(0, j) - std::sqrt(ab)) + wb * -(x(0, j) + std::sqrt(ab))) / (v * (wa + wb));
      out(0, j) = -std::sqrt(1 - ab) * score;
    }
    return out;
  };
  auto draw = [&](SamplerMethod m, int steps) {
    SamplerConfig sc;
    sc.method = m;
    sc.num_inference_steps = steps;
    std::vector<CounterRng> rngs;
    for (int b = 0; b < 10000; ++b) rngs.emplace_back(m == SamplerMethod::ddpm ? 1 : 2, static_cast<std::uint64_t>(b));
    const Mat x = sample_with_eps(oracle, sc, s, 1, rngs);
    return std::vector<double>(x.data(), x.data() + x.size());
  };
  CHECK(wasserstein1(draw(SamplerMethod::ddim, 8), draw(SamplerMethod::ddpm, 100)) < 0.15);
}

TEST_CASE("trace round trip") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  Nets n;
  SamplerConfig sc;
  sc.composition = Composition::joint;
  SampleTrace trace;
  run(n.set(), n.cond, sc, s, &trace);
  const auto back = decode_trace(encode_trace(trace));
  CHECK(back.states == trace.states);
  CHECK(back.steps == trace.steps);
  CHECK(back.eps_calls == trace.eps_calls);
  auto bytes = encode_trace(trace);
  bytes[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_trace(bytes), CorruptionError);
}
