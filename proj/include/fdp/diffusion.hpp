#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "fdp/rng.hpp"

namespace fdp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class ScheduleKind { linear, squared_cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

/// Discrete-time variance schedule. Steps are 1-based: t in [1, T].
class NoiseSchedule {
 public:
  /// Builds alphas and cumulative products from betas, each in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas, ScheduleKind kind);

  [[nodiscard]] int num_steps() const { return static_cast<int>(betas_.size()); }
  [[nodiscard]] ScheduleKind kind() const { return kind_; }

  [[nodiscard]] double beta(int t) const { return betas_[index(t)]; }
  [[nodiscard]] double alpha(int t) const { return alphas_[index(t)]; }
  [[nodiscard]] double alpha_bar(int t) const { return alpha_bars_[index(t)]; }

  [[nodiscard]] std::span<const double> betas() const { return betas_; }
  [[nodiscard]] std::span<const double> alphas() const { return alphas_; }
  [[nodiscard]] std::span<const double> alpha_bars() const { return alpha_bars_; }

  /// Throws ArgumentError unless 1 <= t <= T.
  void check_step(int t) const;

 private:
  NoiseSchedule() = default;
  [[nodiscard]] std::size_t index(int t) const;

  ScheduleKind kind_ = ScheduleKind::squared_cosine;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

inline constexpr int kDefaultDiffusionSteps = 100;

/// Linear kind spans [beta_start, beta_end]; squared_cosine uses the standard
/// cosine alpha-bar curve (offset 0.008) with betas clipped to 0.999.
NoiseSchedule build_schedule(ScheduleKind kind, int num_steps, double beta_start = 1e-4,
                             double beta_end = 0.02);

struct NoisyAction {
  Vec x_t;
  int t = 0;
  Vec eps0;
};

struct Score {
  Vec value;
  int t = 0;
};

/// x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps.
Vec diffuse(double alpha_bar, const Vec& x0, const Vec& eps);

NoisyAction forward_noise(const NoiseSchedule& schedule, const Vec& x0, int t, CounterRng& rng);

/// s = -eps / sqrt(1 - alpha_bar). Throws NumericError when alpha_bar == 1.
Vec eps_to_score(const Vec& eps, double alpha_bar);
Score eps_to_score(const Vec& eps, const NoiseSchedule& schedule, int t);
Vec score_to_eps(const Vec& score, double alpha_bar);

/// Draws a standard normal vector of the given size.
Vec standard_normal(Eigen::Index n, CounterRng& rng);

}  // namespace fdp
