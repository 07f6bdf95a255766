#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fdp/oracle.hpp"
#include "test_support.hpp"

using namespace fdp;

namespace {

GaussianMixtureTask one_gaussian(double sigma2, double mean) {
  GaussianMixtureTask task;
  task.modality_dims = {1, 1};
  MixtureComponent c;
  c.offset = Vec::Constant(1, mean);
  c.coeff = Mat::Zero(1, 2);
  c.variance = Vec::Constant(1, sigma2);
  task.components = {c};
  return task;
}

// p(x | y1, y2) = sum_c w_c N(x; b_c + a1 y1 + a2 y2, v) with y2 ~ N(0, 1).
GaussianMixtureTask two_modality_task() {
  GaussianMixtureTask task;
  task.modality_dims = {1, 1};
  for (double sgn : {1.0, -1.0}) {
    MixtureComponent c;
    c.weight = 0.5;
    c.offset = Vec::Constant(1, sgn);
    c.coeff = Mat(1, 2);
    c.coeff << 0.5, sgn * 0.5;
    c.variance = Vec::Constant(1, 0.16);
    task.components.push_back(c);
  }
  return task;
}

double normal_pdf(double x, double m, double v) {
  return std::exp(-0.5 * (x - m) * (x - m) / v) / std::sqrt(2 * std::numbers::pi * v);
}

// log p_t(x_t | y1) by trapezoidal integration over y2 and an explicit mixture sum.
double brute_base_log_density(const GaussianMixtureTask& task, double x, double ab, double y1) {
  const int n = 4001;
  const double lo = -10, hi = 10, h = (hi - lo) / (n - 1);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const double y2 = lo + h * i;
    double mix = 0;
    for (const auto& c : task.components) {
      const double mu = c.offset(0) + c.coeff(0, 0) * y1 + c.coeff(0, 1) * y2;
      mix += c.weight * normal_pdf(x, std::sqrt(ab) * mu, ab * c.variance(0) + 1 - ab);
    }
    total += (i == 0 || i == n - 1 ? 0.5 : 1.0) * h * mix * normal_pdf(y2, 0, 1);
  }
  return std::log(total);
}

}  // namespace

TEST_CASE("standard normal diffuses to itself") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto task = one_gaussian(1.0, 0.0);
  int t = 1;
  while (s.alpha_bar(t) > 0.5) ++t;
  const Vec y[] = {Vec::Zero(1), Vec::Zero(1)};
  const Vec x = Vec::Constant(1, 0.8);
  const auto sc = oracle_full_score(task, x, t, y, s);
  CHECK(sc.value(0) == doctest::Approx(-0.8).epsilon(1e-12));
}

TEST_CASE("single gaussian score matches numerical log-density derivative") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto task = one_gaussian(0.3, 0.7);
  const Vec y[] = {Vec::Zero(1), Vec::Zero(1)};
  for (int t : {1, 20, 60, 100}) {
    const double ab = s.alpha_bar(t);
    for (double x : {-1.3, 0.0, 0.4, 2.2}) {
      const double expect = -(x - std::sqrt(ab) * 0.7) / (ab * 0.3 + 1 - ab);
      const double got = oracle_full_score(task, Vec::Constant(1, x), t, y, s).value(0);
      CHECK(got == doctest::Approx(expect).epsilon(1e-12));
      const double h = 1e-5;
      const double fd = (oracle_full_log_density(task, Vec::Constant(1, x + h), ab, y) -
                         oracle_full_log_density(task, Vec::Constant(1, x - h), ab, y)) /
                        (2 * h);
      CHECK(std::abs(fd - got) < 1e-6);
    }
  }
}

TEST_CASE("symmetric mixture has zero score at the midpoint") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto task = two_modality_task();
  for (auto& c : task.components) c.coeff.setZero();
  const Vec y[] = {Vec::Zero(1), Vec::Zero(1)};
  for (int t : {1, 50, 100}) CHECK(std::abs(oracle_full_score(task, Vec::Zero(1), t, y, s).value(0)) < 1e-15);
}

TEST_CASE("base score ignores modalities the mean does not depend on") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  auto task = two_modality_task();
  for (auto& c : task.components) c.coeff(0, 1) = 0.0;
  const Vec y[] = {Vec::Constant(1, 0.3), Vec::Constant(1, -1.1)};
  for (double x : {-2.0, 0.1, 1.7}) {
    const auto full = oracle_full_score(task, Vec::Constant(1, x), 30, y, s);
    const auto base = oracle_base_score(task, Vec::Constant(1, x), 30, std::span(y, 1), s);
    CHECK(base.score.value(0) == doctest::Approx(full.value(0)).epsilon(1e-12));
  }
}

TEST_CASE("closed-form marginalization matches brute-force quadrature") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const auto task = two_modality_task();
  const Vec y1[] = {Vec::Constant(1, 0.4)};
  for (int t : {1, 25, 70}) {
    const double ab = s.alpha_bar(t);
    for (double x : {-1.5, -0.2, 0.9}) {
      const double h = 1e-4;
      const double fd = (brute_base_log_density(task, x + h, ab, 0.4) - brute_base_log_density(task, x - h, ab, 0.4)) /
                        (2 * h);
      const auto base = oracle_base_score(task, Vec::Constant(1, x), t, y1, s);
      CHECK(base.exact);
      CHECK(std::abs(base.score.value(0) - fd) < 1e-4);
      CHECK(oracle_base_log_density(task, Vec::Constant(1, x), ab, y1) ==
            doctest::Approx(brute_base_log_density(task, x, ab, 0.4)).epsilon(1e-8));
    }
  }
}

TEST_CASE("Bayes residual equals the classifier log-gradient") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const auto task = two_modality_task();
  const Vec y[] = {Vec::Constant(1, -0.6), Vec::Constant(1, 0.9)};
  const int t = 15;
  const double ab = s.alpha_bar(t);
  // log p(y2 | x, y1) = log p(x | y1, y2) + log p(y2) - log p(x | y1)
  auto log_classifier = [&](double x) {
    const Vec xv = Vec::Constant(1, x);
    return oracle_full_log_density(task, xv, ab, y) + std::log(normal_pdf(0.9, 0, 1)) -
           brute_base_log_density(task, x, ab, -0.6);
  };
  for (double x : {-1.0, 0.0, 1.2}) {
    const auto sc = oracle_scores(task, Vec::Constant(1, x), t, y, s);
    const double h = 1e-4;
    const double fd = (log_classifier(x + h) - log_classifier(x - h)) / (2 * h);
    CHECK(std::abs(sc.residual.value(0) - fd) < 1e-4);
  }
}

TEST_CASE("Monte-Carlo marginalization converges") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const auto task = two_modality_task();
  const Vec y1[] = {Vec::Constant(1, 0.2)};
  const Vec x = Vec::Constant(1, 0.5);
  const auto exact = oracle_base_score(task, x, 20, y1, s);
  const auto few = oracle_base_score(task, x, 20, y1, s, 100, 1, true);
  const auto many = oracle_base_score(task, x, 20, y1, s, 100000, 1, true);
  CHECK_FALSE(many.exact);
  CHECK(many.std_error(0) < few.std_error(0) / 10);
  CHECK(std::abs(many.score.value(0) - exact.score.value(0)) < 4 * many.std_error(0) + 1e-3);
}

TEST_CASE("construction check is exact") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const auto task = two_modality_task();
  TheoremGrid grid;
  grid.points_per_dim = 21;
  grid.conditions = {{Vec::Constant(1, 0.0), Vec::Constant(1, 1.0)}};
  grid.steps = {1, 50, 100};
  const auto r = verify_theorem1(task, grid, s);
  CHECK(r.construction_max_abs == 0.0);
  CHECK(r.per_t.size() == 3);
}

TEST_CASE("an oracle eps model scores zero mismatch") {
  const auto s = build_schedule(ScheduleKind::squared_cosine, 100);
  const auto task = two_modality_task();
  TheoremGrid grid;
  grid.points_per_dim = 11;
  grid.conditions = {{Vec::Constant(1, 0.5), Vec::Constant(1, -0.5)}};
  grid.steps = {3, 40};
  EpsModel oracle = [&](const Mat& x, int t, std::span<const Vec> y) {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out.col(j) = score_to_eps(oracle_full_score(task, x.col(j), t, y, s).value, s.alpha_bar(t));
    }
    return out;
  };
  const auto r = verify_theorem1(task, grid, s, oracle);
  CHECK(r.model_checked);
  CHECK(r.overall_rms < 1e-12);
}
