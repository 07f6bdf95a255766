#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fdp/diffusion.hpp"
#include "fdp/errors.hpp"
#include "test_support.hpp"

using namespace fdp;

TEST_CASE("single-step linear schedule") {
  const auto s = build_schedule(ScheduleKind::linear, 1);
  REQUIRE(s.num_steps() == 1);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-15));
}

TEST_CASE("linear alpha_bars equal the running product of alphas") {
  const auto s = build_schedule(ScheduleKind::linear, 100);
  double prod = 1.0;
  for (int t = 1; t <= 100; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0;
    CHECK(s.beta(t) == doctest::Approx(beta).epsilon(1e-12));
    prod *= 1.0 - beta;
    CHECK(std::abs(s.alpha_bar(t) - prod) < 1e-12);
  }
}

TEST_CASE("squared cosine schedule follows the cosine curve") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto f = [](double u) {
    const double c = std::cos((u + 0.008) / 1.008 * std::numbers::pi / 2);
    return c * c;
  };
  for (int t = 1; t <= 100; ++t) {
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    const double beta = std::min(1.0 - f(t / 100.0) / f((t - 1) / 100.0), 0.999);
    CHECK(s.beta(t) == doctest::Approx(beta).epsilon(1e-12));
  }
  CHECK(s.alpha_bar(100) < 0.01);
}

TEST_CASE("step bounds are checked") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 10);
  CHECK_THROWS_AS(s.check_step(0), ArgumentError);
  CHECK_THROWS_AS(s.check_step(11), ArgumentError);
  CHECK_NOTHROW(s.check_step(10));
  CHECK_THROWS_AS(NoiseSchedule::from_betas({0.1, 1.0}, ScheduleKind::linear), ArgumentError);
}

TEST_CASE("forward kernel edge cases") {
  const Vec x0 = Vec::Constant(3, 2.0);
  const Vec eps = Vec::Constant(3, -0.7);
  CHECK(diffuse(1.0, x0, eps) == x0);
  const double ab = 0.3;
  const Vec xt = diffuse(ab, Vec::Zero(3), eps);
  CHECK((xt - std::sqrt(1 - ab) * eps).norm() < 1e-15);
}

TEST_CASE("forward noise moments match the kernel") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  CounterRng rng(7);
  const Vec x0 = Vec::Constant(1, 1.5);
  const int t = 40, n = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double v = forward_noise(s, x0, t, rng).x_t(0);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  const double ab = s.alpha_bar(t);
  CHECK(std::abs(mean - std::sqrt(ab) * 1.5) < 3 * std::sqrt((1 - ab) / n));
  CHECK(std::abs(var - (1 - ab)) < 3 * (1 - ab) * std::sqrt(2.0 / n));
}

TEST_CASE("direct noising equals stepwise noising in distribution") {
  const auto s = build_schedule(ScheduleKind::linear, 100);
  CounterRng rng(11);
  const int t = 30, n = 50000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    double x = 1.0;
    for (int j = 1; j <= t; ++j) x = std::sqrt(s.alpha(j)) * x + std::sqrt(s.beta(j)) * rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  CHECK(std::abs(mean - std::sqrt(s.alpha_bar(t))) < 4 * std::sqrt((1 - s.alpha_bar(t)) / n));
  CHECK(std::abs(var - (1 - s.alpha_bar(t))) < 4 * (1 - s.alpha_bar(t)) * std::sqrt(2.0 / n));
}

TEST_CASE("score and noise conversions") {
  CHECK(eps_to_score(Vec::Zero(2), 0.5).norm() == 0.0);
  CHECK(eps_to_score(Vec::Constant(1, 1.0), 0.75)(0) == doctest::Approx(-2.0).epsilon(1e-15));
  CHECK_THROWS_AS(eps_to_score(Vec::Ones(1), 1.0), NumericError);
  CounterRng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vec s = standard_normal(4, rng);
    const double ab = rng.uniform() * 0.99;
    CHECK((eps_to_score(score_to_eps(s, ab), ab) - s).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("counter rng is replayable and forks independently") {
  CounterRng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CounterRng c(5);
  const auto child = c.fork(1);
  CHECK(c.counter() == 0);
  CHECK(CounterRng(5).fork(1).key() == child.key());
  CHECK(c.fork(2).key() != child.key());
  double sum = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = c.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    sum += u;
  }
  CHECK(std::abs(sum / 20000 - 0.5) < 0.01);
}
