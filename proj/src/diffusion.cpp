#include "fdp/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "fdp/errors.hpp"

namespace fdp {

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "squared_cosine";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "squared_cosine" || name == "cosine") return ScheduleKind::squared_cosine;
  throw ArgumentError("unknown schedule kind: " + name);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas, ScheduleKind kind) {
  if (betas.empty()) throw ArgumentError("schedule needs at least one step");
  NoiseSchedule s;
  s.kind_ = kind;
  s.betas_ = std::move(betas);
  s.alphas_.reserve(s.betas_.size());
  s.alpha_bars_.reserve(s.betas_.size());
  double running = 1.0;
  for (double b : s.betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ArgumentError("beta outside (0, 1)");
    const double a = 1.0 - b;
    running *= a;
    s.alphas_.push_back(a);
    s.alpha_bars_.push_back(running);
  }
  return s;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > num_steps()) {
    throw ArgumentError("diffusion step " + std::to_string(t) + " outside [1, " +
                        std::to_string(num_steps()) + "]");
  }
}

std::size_t NoiseSchedule::index(int t) const {
  check_step(t);
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule build_schedule(ScheduleKind kind, int num_steps, double beta_start,
                             double beta_end) {
  if (num_steps < 1) throw ArgumentError("schedule length must be positive");
  std::vector<double> betas(static_cast<std::size_t>(num_steps));
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < num_steps; ++i) {
      const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / num_steps + offset) / (1.0 + offset) * std::numbers::pi / 2);
      return c * c;
    };
    for (int i = 0; i < num_steps; ++i) {
      const double b = 1.0 - f(i + 1.0) / f(static_cast<double>(i));
      betas[static_cast<std::size_t>(i)] = std::min(b, 0.999);
    }
  }
  return NoiseSchedule::from_betas(std::move(betas), kind);
}

Vec diffuse(double alpha_bar, const Vec& x0, const Vec& eps) {
  if (x0.size() != eps.size()) throw ArgumentError("x0 and eps dimensions differ");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

NoisyAction forward_noise(const NoiseSchedule& schedule, const Vec& x0, int t, CounterRng& rng) {
  schedule.check_step(t);
  NoisyAction out;
  out.t = t;
  out.eps0 = standard_normal(x0.size(), rng);
  out.x_t = diffuse(schedule.alpha_bar(t), x0, out.eps0);
  return out;
}

Vec eps_to_score(const Vec& eps, double alpha_bar) {
  if (!(alpha_bar < 1.0)) throw NumericError("degenerate diffusion step: alpha_bar == 1");
  return -eps / std::sqrt(1.0 - alpha_bar);
}

Score eps_to_score(const Vec& eps, const NoiseSchedule& schedule, int t) {
  return Score{eps_to_score(eps, schedule.alpha_bar(t)), t};
}

Vec score_to_eps(const Vec& score, double alpha_bar) {
  return -std::sqrt(1.0 - alpha_bar) * score;
}

Vec standard_normal(Eigen::Index n, CounterRng& rng) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace fdp
