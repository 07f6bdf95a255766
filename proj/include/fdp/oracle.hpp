#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "fdp/diffusion.hpp"
#include "fdp/observation.hpp"

namespace fdp {

/// How the de-prioritized modalities are generated, independent of the
/// prioritized ones. Only the Gaussian case marginalizes in closed form.
enum class DroppedDistribution { standard_normal, uniform, unknown };

/// One mixture component of p(x | y): mean = offset + coeff * concat(y).
struct MixtureComponent {
  double weight = 1.0;
  Vec offset;
  Mat coeff;      // action_dim x total observation dim
  Vec variance;   // diagonal, strictly positive
};

/// Conditional Gaussian mixture p(x | y^{1:M}) with y ~ N(0, I) or U[-h, h].
struct GaussianMixtureTask {
  std::vector<MixtureComponent> components;
  std::vector<int> modality_dims;
  int priority_k = 1;
  DroppedDistribution dropped = DroppedDistribution::standard_normal;
  double uniform_half_width = 1.0;

  [[nodiscard]] int action_dim() const;
  [[nodiscard]] int observation_dim() const;
  [[nodiscard]] int prioritized_dim() const;
  void validate() const;

  /// Draws (x, y^{1:M}) from the generative model; y returned per modality.
  std::pair<Vec, std::vector<Vec>> sample(CounterRng& rng) const;
};

struct OracleScore {
  Score full;
  Score base;
  Score residual;
};

struct BaseScoreEstimate {
  Score score;
  Vec std_error;  // zero when marginalization is exact
  bool exact = true;
};

Score oracle_full_score(const GaussianMixtureTask& task, const Vec& x_t, int t,
                        std::span<const Vec> y, const NoiseSchedule& schedule);

/// Score of p_t(x_t | y^{1:k}). Exact for Gaussian dropped modalities unless
/// `force_monte_carlo`; otherwise a self-normalized Monte-Carlo estimate over
/// `marginalization_samples` draws of the dropped modalities.
BaseScoreEstimate oracle_base_score(const GaussianMixtureTask& task, const Vec& x_t, int t,
                                    std::span<const Vec> y_prior, const NoiseSchedule& schedule,
                                    int marginalization_samples = 1, std::uint64_t seed = 0,
                                    bool force_monte_carlo = false);

OracleScore oracle_scores(const GaussianMixtureTask& task, const Vec& x_t, int t,
                          std::span<const Vec> y, const NoiseSchedule& schedule);

/// log p_t(x_t | y^{1:M}) at a given alpha_bar.
double oracle_full_log_density(const GaussianMixtureTask& task, const Vec& x_t, double alpha_bar,
                               std::span<const Vec> y);
/// log p_t(x_t | y^{1:k}) via the closed-form Gaussian marginal.
double oracle_base_log_density(const GaussianMixtureTask& task, const Vec& x_t, double alpha_bar,
                               std::span<const Vec> y_prior);

/// Batched noise prediction used to compare a trained model against the
/// oracle: columns of x_t are grid points, all sharing step t and condition y.
using EpsModel = std::function<Mat(const Mat& x_t, int t, std::span<const Vec> y)>;

struct TheoremStepStats {
  int t = 0;
  double max_abs = 0.0;
  double rms = 0.0;
};

struct TheoremReport {
  std::vector<TheoremStepStats> per_t;
  double overall_rms = 0.0;
  double overall_max_abs = 0.0;
  /// max |(full - base) - residual| over the grid; zero by construction.
  double construction_max_abs = 0.0;
  int grid_points = 0;
  int conditions = 0;
  bool model_checked = false;
};

struct TheoremGrid {
  int points_per_dim = 101;
  double half_width_stddevs = 4.0;
  std::vector<std::vector<Vec>> conditions;  // each a full y^{1:M}
  std::vector<int> steps;                    // empty: every step 1..T
};

/// Construction check over the grid, plus (when `model` is given) the
/// noise-space mismatch eps_model - (-sqrt(1 - alpha_bar) * full score).
TheoremReport verify_theorem1(const GaussianMixtureTask& task, const TheoremGrid& grid,
                              const NoiseSchedule& schedule,
                              const std::optional<EpsModel>& model = std::nullopt);

nlohmann::json to_json(const TheoremReport& report);

/// Grid points spanning +-k diffused standard deviations of p_t(x_t | y),
/// per dimension; returned as columns (D x points^D).
Mat theorem_grid_points(const GaussianMixtureTask& task, double alpha_bar, std::span<const Vec> y,
                        int points_per_dim, double half_width_stddevs);

}  // namespace fdp
