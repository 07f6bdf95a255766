#include "fdp/oracle.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "fdp/errors.hpp"

namespace fdp {

std::string to_string(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::proprio: return "proprio";
    case ModalityKind::vision_grid: return "vision_grid";
    case ModalityKind::state: return "state";
  }
  return "state";
}

ModalityKind parse_modality_kind(const std::string& name) {
  if (name == "proprio") return ModalityKind::proprio;
  if (name == "vision_grid" || name == "vision") return ModalityKind::vision_grid;
  if (name == "state") return ModalityKind::state;
  throw ArgumentError("unknown modality kind: " + name);
}

void validate_specs(std::span<const ModalitySpec> specs) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].dim <= 0) throw ArgumentError("modality '" + specs[i].name + "' has no dimensions");
    for (std::size_t j = 0; j < i; ++j) {
      if (specs[i].name == specs[j].name) throw ArgumentError("duplicate modality name: " + specs[i].name);
    }
  }
}

void ObservationBundle::validate() const {
  validate_specs(specs);
  if (values.size() != specs.size()) throw ArgumentError("bundle has a missing modality");
  if (horizon < 1) throw ArgumentError("observation horizon must be positive");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (values[i].size() != static_cast<Eigen::Index>(specs[i].dim) * horizon) {
      throw ArgumentError("modality '" + specs[i].name + "' has wrong value length");
    }
  }
  if (priority_k < 1 || priority_k >= num_modalities()) {
    throw ArgumentError("priority split must satisfy 1 <= k < M");
  }
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

struct Gaussian {
  double log_weight;
  Vec mean;
  Mat cov;
};

struct MixtureEval {
  double log_density;
  Vec score;
};

MixtureEval evaluate_mixture(const std::vector<Gaussian>& comps, const Vec& x) {
  const Eigen::Index d = x.size();
  std::vector<double> logp(comps.size());
  std::vector<Vec> scores(comps.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < comps.size(); ++c) {
    Eigen::LLT<Mat> llt(comps[c].cov);
    const Vec diff = x - comps[c].mean;
    const Vec sol = llt.solve(diff);
    const Mat& l = llt.matrixL();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) logdet += 2.0 * std::log(l(i, i));
    logp[c] = comps[c].log_weight - 0.5 * (d * kLog2Pi + logdet + diff.dot(sol));
    scores[c] = -sol;
    top = std::max(top, logp[c]);
  }
  double total = 0.0;
  for (double v : logp) total += std::exp(v - top);
  MixtureEval out{top + std::log(total), Vec::Zero(d)};
  for (std::size_t c = 0; c < comps.size(); ++c) {
    out.score += std::exp(logp[c] - out.log_density) * scores[c];
  }
  return out;
}

Vec concat(std::span<const Vec> parts) {
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Vec out(n);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.segment(at, p.size()) = p;
    at += p.size();
  }
  return out;
}

void check_full(const GaussianMixtureTask& task, const Vec& x_t, std::span<const Vec> y) {
  if (y.size() != task.modality_dims.size()) throw ArgumentError("observation count does not match task");
  for (std::size_t m = 0; m < y.size(); ++m) {
    if (y[m].size() != task.modality_dims[m]) throw ArgumentError("modality dimension mismatch");
  }
  if (x_t.size() != task.action_dim()) throw ArgumentError("action dimension mismatch");
}

void check_prior(const GaussianMixtureTask& task, const Vec& x_t, std::span<const Vec> y_prior) {
  if (static_cast<int>(y_prior.size()) != task.priority_k) {
    throw ArgumentError("prioritized bundle must hold exactly k modalities");
  }
  for (std::size_t m = 0; m < y_prior.size(); ++m) {
    if (y_prior[m].size() != task.modality_dims[m]) throw ArgumentError("modality dimension mismatch");
  }
  if (x_t.size() != task.action_dim()) throw ArgumentError("action dimension mismatch");
}

std::vector<Gaussian> full_components(const GaussianMixtureTask& task, double alpha_bar,
                                      const Vec& y) {
  std::vector<Gaussian> out;
  const double s = std::sqrt(alpha_bar);
  const Eigen::Index d = task.action_dim();
  for (const auto& c : task.components) {
    Mat cov = Mat::Identity(d, d) * (1.0 - alpha_bar);
    cov.diagonal() += alpha_bar * c.variance;
    out.push_back({std::log(c.weight), s * (c.offset + c.coeff * y), std::move(cov)});
  }
  return out;
}

std::vector<Gaussian> base_components(const GaussianMixtureTask& task, double alpha_bar,
                                      const Vec& y_prior) {
  std::vector<Gaussian> out;
  const double s = std::sqrt(alpha_bar);
  const Eigen::Index d = task.action_dim();
  const Eigen::Index kp = task.prioritized_dim();
  const Eigen::Index kd = task.observation_dim() - kp;
  for (const auto& c : task.components) {
    const Mat bp = c.coeff.leftCols(kp);
    const Mat bd = c.coeff.rightCols(kd);
    Mat cov = Mat::Identity(d, d) * (1.0 - alpha_bar);
    cov.diagonal() += alpha_bar * c.variance;
    cov += alpha_bar * (bd * bd.transpose());
    out.push_back({std::log(c.weight), s * (c.offset + bp * y_prior), std::move(cov)});
  }
  return out;
}

}  // namespace

int GaussianMixtureTask::action_dim() const {
  return components.empty() ? 0 : static_cast<int>(components.front().offset.size());
}

int GaussianMixtureTask::observation_dim() const {
  return std::accumulate(modality_dims.begin(), modality_dims.end(), 0);
}

int GaussianMixtureTask::prioritized_dim() const {
  return std::accumulate(modality_dims.begin(), modality_dims.begin() + priority_k, 0);
}

void GaussianMixtureTask::validate() const {
  if (components.empty()) throw ArgumentError("mixture needs a component");
  if (modality_dims.size() < 2) throw ArgumentError("mixture task needs at least two modalities");
  if (priority_k < 1 || priority_k >= static_cast<int>(modality_dims.size())) {
    throw ArgumentError("priority split must satisfy 1 <= k < M");
  }
  for (int d : modality_dims) {
    if (d <= 0) throw ArgumentError("modality dims must be positive");
  }
  double total = 0.0;
  const int d = action_dim();
  for (const auto& c : components) {
    if (!(c.weight > 0.0 && c.weight <= 1.0)) throw ArgumentError("component weight outside (0, 1]");
    if (c.offset.size() != d || c.variance.size() != d || c.coeff.rows() != d ||
        c.coeff.cols() != observation_dim()) {
      throw ArgumentError("component shape mismatch");
    }
    if ((c.variance.array() <= 0.0).any()) throw ArgumentError("component variance must be positive");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ArgumentError("component weights must sum to 1");
}

std::pair<Vec, std::vector<Vec>> GaussianMixtureTask::sample(CounterRng& rng) const {
  std::vector<Vec> y;
  for (std::size_t m = 0; m < modality_dims.size(); ++m) {
    Vec v(modality_dims[m]);
    const bool is_dropped = static_cast<int>(m) >= priority_k;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (is_dropped && dropped == DroppedDistribution::uniform) {
        v[i] = (2.0 * rng.uniform() - 1.0) * uniform_half_width;
      } else {
        v[i] = rng.normal();
      }
    }
    y.push_back(std::move(v));
  }
  double u = rng.uniform();
  std::size_t pick = components.size() - 1;
  for (std::size_t c = 0; c < components.size(); ++c) {
    if (u < components[c].weight) {
      pick = c;
      break;
    }
    u -= components[c].weight;
  }
  const auto& comp = components[pick];
  Vec x = comp.offset + comp.coeff * concat(y);
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += std::sqrt(comp.variance[i]) * rng.normal();
  return {std::move(x), std::move(y)};
}

double oracle_full_log_density(const GaussianMixtureTask& task, const Vec& x_t, double alpha_bar,
                               std::span<const Vec> y) {
  check_full(task, x_t, y);
  return evaluate_mixture(full_components(task, alpha_bar, concat(y)), x_t).log_density;
}

double oracle_base_log_density(const GaussianMixtureTask& task, const Vec& x_t, double alpha_bar,
                               std::span<const Vec> y_prior) {
  check_prior(task, x_t, y_prior);
  if (task.dropped != DroppedDistribution::standard_normal) {
    throw UnsupportedTaskError("closed-form base density needs Gaussian dropped modalities");
  }
  return evaluate_mixture(base_components(task, alpha_bar, concat(y_prior)), x_t).log_density;
}

Score oracle_full_score(const GaussianMixtureTask& task, const Vec& x_t, int t,
                        std::span<const Vec> y, const NoiseSchedule& schedule) {
  check_full(task, x_t, y);
  const double ab = schedule.alpha_bar(t);
  return Score{evaluate_mixture(full_components(task, ab, concat(y)), x_t).score, t};
}

BaseScoreEstimate oracle_base_score(const GaussianMixtureTask& task, const Vec& x_t, int t,
                                    std::span<const Vec> y_prior, const NoiseSchedule& schedule,
                                    int marginalization_samples, std::uint64_t seed,
                                    bool force_monte_carlo) {
  check_prior(task, x_t, y_prior);
  if (task.dropped == DroppedDistribution::unknown) {
    throw UnsupportedTaskError("generating distribution of dropped modalities is unknown");
  }
  if (marginalization_samples < 1) throw ArgumentError("marginalization needs at least one sample");
  const double ab = schedule.alpha_bar(t);
  const Vec yp = concat(y_prior);
  if (task.dropped == DroppedDistribution::standard_normal && !force_monte_carlo) {
    return {Score{evaluate_mixture(base_components(task, ab, yp), x_t).score, t},
            Vec::Zero(x_t.size()), true};
  }

  // Self-normalized estimate: score = E[p_j s_j] / E[p_j] over dropped draws.
  CounterRng rng(seed, 0xBA5E);
  const Eigen::Index kd = task.observation_dim() - task.prioritized_dim();
  const int n = marginalization_samples;
  std::vector<double> logp(static_cast<std::size_t>(n));
  std::vector<Vec> scores(static_cast<std::size_t>(n));
  Vec y(task.observation_dim());
  y.head(yp.size()) = yp;
  double top = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < kd; ++i) {
      y[yp.size() + i] = task.dropped == DroppedDistribution::uniform
                             ? (2.0 * rng.uniform() - 1.0) * task.uniform_half_width
                             : rng.normal();
    }
    auto ev = evaluate_mixture(full_components(task, ab, y), x_t);
    logp[static_cast<std::size_t>(j)] = ev.log_density;
    scores[static_cast<std::size_t>(j)] = std::move(ev.score);
    top = std::max(top, ev.log_density);
  }
  double pbar = 0.0;
  Vec gbar = Vec::Zero(x_t.size());
  std::vector<double> a(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    a[static_cast<std::size_t>(j)] = std::exp(logp[static_cast<std::size_t>(j)] - top);
    pbar += a[static_cast<std::size_t>(j)];
    gbar += a[static_cast<std::size_t>(j)] * scores[static_cast<std::size_t>(j)];
  }
  pbar /= n;
  gbar /= n;
  const Vec ratio = gbar / pbar;
  Vec se = Vec::Constant(x_t.size(), std::numeric_limits<double>::infinity());
  if (n > 1) {
    Vec acc = Vec::Zero(x_t.size());
    for (int j = 0; j < n; ++j) {
      const Vec r = a[static_cast<std::size_t>(j)] * (scores[static_cast<std::size_t>(j)] - ratio);
      acc += r.cwiseProduct(r);
    }
    se = (acc / (static_cast<double>(n) * (n - 1))).cwiseSqrt() / pbar;
  }
  return {Score{ratio, t}, se, false};
}

OracleScore oracle_scores(const GaussianMixtureTask& task, const Vec& x_t, int t,
                          std::span<const Vec> y, const NoiseSchedule& schedule) {
  OracleScore out;
  out.full = oracle_full_score(task, x_t, t, y, schedule);
  out.base = oracle_base_score(task, x_t, t, y.first(static_cast<std::size_t>(task.priority_k)),
                               schedule, 4096)
                 .score;
  out.residual = Score{out.full.value - out.base.value, t};
  return out;
}

Mat theorem_grid_points(const GaussianMixtureTask& task, double alpha_bar, std::span<const Vec> y,
                        int points_per_dim, double half_width_stddevs) {
  const int d = task.action_dim();
  if (d > 2) throw ArgumentError("grid evaluation supports action dimension <= 2");
  if (points_per_dim < 2) throw ArgumentError("grid needs at least two points per dimension");
  const Vec yy = concat(y);
  const double s = std::sqrt(alpha_bar);
  Vec mean = Vec::Zero(d);
  Vec second = Vec::Zero(d);
  for (const auto& c : task.components) {
    const Vec mu = s * (c.offset + c.coeff * yy);
    mean += c.weight * mu;
    second += c.weight * (alpha_bar * c.variance + Vec::Constant(d, 1.0 - alpha_bar) +
                          mu.cwiseProduct(mu));
  }
  const Vec sd = (second - mean.cwiseProduct(mean)).cwiseMax(1e-300).cwiseSqrt();
  std::vector<Vec> axes;
  for (int i = 0; i < d; ++i) {
    axes.push_back(Vec::LinSpaced(points_per_dim, mean[i] - half_width_stddevs * sd[i],
                                  mean[i] + half_width_stddevs * sd[i]));
  }
  const Eigen::Index total = d == 1 ? points_per_dim : points_per_dim * points_per_dim;
  Mat pts(d, total);
  for (Eigen::Index p = 0; p < total; ++p) {
    pts(0, p) = axes[0][p % points_per_dim];
    if (d == 2) pts(1, p) = axes[1][p / points_per_dim];
  }
  return pts;
}

TheoremReport verify_theorem1(const GaussianMixtureTask& task, const TheoremGrid& grid,
                              const NoiseSchedule& schedule, const std::optional<EpsModel>& model) {
  task.validate();
  if (grid.conditions.empty()) throw ArgumentError("theorem grid needs at least one condition");
  std::vector<int> steps = grid.steps;
  if (steps.empty()) {
    for (int t = 1; t <= schedule.num_steps(); ++t) steps.push_back(t);
  }
  TheoremReport report;
  report.model_checked = model.has_value();
  report.conditions = static_cast<int>(grid.conditions.size());
  double total_sq = 0.0;
  long total_n = 0;
  for (int t : steps) {
    const double ab = schedule.alpha_bar(t);
    TheoremStepStats st;
    st.t = t;
    double sq = 0.0;
    long n = 0;
    for (const auto& y : grid.conditions) {
      const Mat pts = theorem_grid_points(task, ab, y, grid.points_per_dim, grid.half_width_stddevs);
      report.grid_points = static_cast<int>(pts.cols());
      Mat predicted;
      if (model) predicted = (*model)(pts, t, y);
      for (Eigen::Index p = 0; p < pts.cols(); ++p) {
        const Vec x = pts.col(p);
        const OracleScore os = oracle_scores(task, x, t, y, schedule);
        const double construction =
            ((os.full.value - os.base.value) - os.residual.value).cwiseAbs().maxCoeff();
        report.construction_max_abs = std::max(report.construction_max_abs, construction);
        if (model) {
          const Vec target = score_to_eps(os.full.value, ab);
          const Vec diff = predicted.col(p) - target;
          st.max_abs = std::max(st.max_abs, diff.cwiseAbs().maxCoeff());
          sq += diff.squaredNorm();
          n += diff.size();
        }
      }
    }
    if (n > 0) {
      st.rms = std::sqrt(sq / static_cast<double>(n));
      total_sq += sq;
      total_n += n;
      report.overall_max_abs = std::max(report.overall_max_abs, st.max_abs);
    } else {
      st.max_abs = report.construction_max_abs;
    }
    report.per_t.push_back(st);
  }
  report.overall_rms = total_n > 0 ? std::sqrt(total_sq / static_cast<double>(total_n))
                                   : report.construction_max_abs;
  return report;
}

nlohmann::json to_json(const TheoremReport& report) {
  nlohmann::json per_t = nlohmann::json::array();
  for (const auto& s : report.per_t) per_t.push_back({{"t", s.t}, {"max_abs", s.max_abs}, {"rms", s.rms}});
  return {{"per_t", per_t},
          {"overall_rms", report.overall_rms},
          {"overall_max_abs", report.overall_max_abs},
          {"construction_max_abs", report.construction_max_abs},
          {"grid_points", report.grid_points},
          {"conditions", report.conditions},
          {"model_checked", report.model_checked}};
}

}  // namespace fdp
