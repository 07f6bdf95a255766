#include "fdp/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5EED5;
constexpr std::uint64_t kValidationStream = 0x7A11D;

void check_batch(const Mat& x0, const CondBatch& cond, const NoiseDraws& draws) {
  if (x0.cols() == 0) throw ArgumentError("empty batch");
  if (static_cast<Eigen::Index>(draws.t.size()) != x0.cols() || draws.eps.cols() != x0.cols() ||
      draws.eps.rows() != x0.rows()) {
    throw ArgumentError("noise draws do not match the batch");
  }
  for (const auto& m : cond.modalities) {
    if (m.cols() != x0.cols()) throw ArgumentError("conditioning batch size mismatch");
  }
}

Mat noised(const Mat& x0, const NoiseSchedule& schedule, const NoiseDraws& draws) {
  Mat x_t(x0.rows(), x0.cols());
  for (Eigen::Index b = 0; b < x0.cols(); ++b) {
    const double ab = schedule.alpha_bar(draws.t[static_cast<std::size_t>(b)]);
    x_t.col(b) = std::sqrt(ab) * x0.col(b) + std::sqrt(1.0 - ab) * draws.eps.col(b);
  }
  return x_t;
}

LossValue dsm_loss(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                   const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad) {
  check_batch(x0, cond, draws);
  const Mat x_t = noised(x0, schedule, draws);
  Trunk::Cache cache;
  net.forward(x_t, draws.t, cond, nullptr, cache);
  const Mat diff = cache.output - draws.eps;
  const double batch = static_cast<double>(x0.cols());
  LossValue out;
  out.loss = diff.squaredNorm() / batch;
  if (with_grad) {
    out.grad.assign(net.num_params(), 0.0);
    const Mat d_out = (2.0 / batch) * diff;
    net.trunk().backward(net.params(), cache, &d_out, nullptr, out.grad, nullptr);
  }
  return out;
}

std::vector<Eigen::Index> iota_columns(Eigen::Index n) {
  std::vector<Eigen::Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Eigen::Index{0});
  return v;
}

/// Observation noise of scale tau on every conditioning entry.
void perturb_conditioning(CondBatch& cond, double tau, CounterRng& rng) {
  if (tau <= 0.0) return;
  for (auto& m : cond.modalities) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) += tau * rng.normal();
    }
  }
}

}  // namespace

void TrainingConfig::validate() const {
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) {
    throw ConfigError("learning rate and weight decay must be non-negative");
  }
  if (batch_size < 1 || epochs < 1) throw ConfigError("batch size and epochs must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (!(validation_fraction > 0.0 && validation_fraction <= 0.5)) {
    throw ConfigError("validation_fraction must lie in (0, 0.5]");
  }
  if (!(cfg_drop_prob >= 0.0 && cfg_drop_prob <= 1.0)) throw ConfigError("cfg_drop_prob must lie in [0, 1]");
  if (!(tau >= 0.0)) throw ConfigError("tau must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

nlohmann::json to_json(const TrainingConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},       {"epochs", c.epochs},
          {"ema_decay", c.ema_decay},         {"seed", c.seed},
          {"validation_fraction", c.validation_fraction},
          {"cfg_drop_prob", c.cfg_drop_prob}, {"tau", c.tau},
          {"checkpoint_every", c.checkpoint_every}, {"select_best", c.select_best}};
}

TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.seed = j.value("seed", c.seed);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.cfg_drop_prob = j.value("cfg_drop_prob", c.cfg_drop_prob);
    c.tau = j.value("tau", c.tau);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.select_best = j.value("select_best", c.select_best);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string to_jsonl(const LossReport& r) {
  nlohmann::json j = {{"epoch", r.epoch},         {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                      {"grad_norm", r.grad_norm}, {"ema_applied", r.ema_applied}};
  return j.dump();
}

TrainingSet TrainingSet::select(std::span<const Eigen::Index> columns) const {
  TrainingSet out;
  out.specs = specs;
  out.horizon = horizon;
  out.priority_k = priority_k;
  const auto n = static_cast<Eigen::Index>(columns.size());
  out.x0.resize(x0.rows(), n);
  out.cond.resize(cond.size());
  for (std::size_t m = 0; m < cond.size(); ++m) out.cond[m].resize(cond[m].rows(), n);
  out.episode.resize(columns.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = columns[static_cast<std::size_t>(j)];
    out.x0.col(j) = x0.col(src);
    for (std::size_t m = 0; m < cond.size(); ++m) out.cond[m].col(j) = cond[m].col(src);
    out.episode[static_cast<std::size_t>(j)] = episode.empty() ? static_cast<int>(src)
                                                                : episode[static_cast<std::size_t>(src)];
  }
  return out;
}

CondBatch TrainingSet::cond_batch(std::span<const Eigen::Index> columns) const {
  CondBatch out;
  for (const auto& m : cond) {
    Mat sub(m.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) sub.col(static_cast<Eigen::Index>(j)) = m.col(columns[j]);
    out.modalities.push_back(std::move(sub));
  }
  return out;
}

void TrainingSet::validate() const {
  if (x0.cols() == 0) throw ArgumentError("training set is empty");
  if (cond.size() != specs.size()) throw ArgumentError("training set modality count mismatch");
  for (std::size_t m = 0; m < cond.size(); ++m) {
    if (cond[m].cols() != x0.cols() || cond[m].rows() != static_cast<Eigen::Index>(specs[m].dim) * horizon) {
      throw ArgumentError("training set modality '" + specs[m].name + "' has wrong shape");
    }
  }
  if (!episode.empty() && static_cast<Eigen::Index>(episode.size()) != x0.cols()) {
    throw ArgumentError("episode tags must cover every column");
  }
}

std::pair<TrainingSet, TrainingSet> split_validation(const TrainingSet& data, double fraction) {
  data.validate();
  std::vector<int> tags(static_cast<std::size_t>(data.size()));
  for (std::size_t i = 0; i < tags.size(); ++i) tags[i] = data.episode.empty() ? static_cast<int>(i) : data.episode[i];
  std::vector<int> unique = tags;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  const auto n = static_cast<double>(unique.size());
  auto n_val = static_cast<std::size_t>(std::ceil(fraction * n));
  if (unique.size() < 2) n_val = 0;
  n_val = std::min(n_val, unique.size() - 1);
  const int first_val = n_val == 0 ? std::numeric_limits<int>::max() : unique[unique.size() - n_val];
  std::vector<Eigen::Index> train_cols, val_cols;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    (tags[i] >= first_val ? val_cols : train_cols).push_back(static_cast<Eigen::Index>(i));
  }
  return {data.select(train_cols), data.select(val_cols)};
}

NoiseDraws draw_noise(const NoiseSchedule& schedule, Eigen::Index batch, int action_dim, CounterRng& rng) {
  NoiseDraws d;
  d.t.resize(static_cast<std::size_t>(batch));
  for (auto& t : d.t) t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.num_steps())));
  d.eps.resize(action_dim, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int i = 0; i < action_dim; ++i) d.eps(i, b) = rng.normal();
  }
  return d;
}

void draw_guidance_drops(NoiseDraws& draws, int num_modalities, int priority_k, double p, CounterRng& rng) {
  const std::size_t batch = draws.t.size();
  draws.dropped.assign(static_cast<std::size_t>(num_modalities), {});
  for (int m = priority_k; m < num_modalities; ++m) draws.dropped[static_cast<std::size_t>(m)].assign(batch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const bool drop = rng.uniform() < p;
    for (int m = priority_k; m < num_modalities; ++m) draws.dropped[static_cast<std::size_t>(m)][b] = drop ? 1 : 0;
  }
}

LossValue loss_joint(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                     const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad) {
  if (net.config().cond_specs.size() != cond.modalities.size()) {
    throw ArgumentError("joint loss needs a net over every modality");
  }
  CondBatch plain = cond;
  plain.dropped.clear();
  return dsm_loss(net, x0, plain, schedule, draws, with_grad);
}

LossValue loss_base(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                    const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad) {
  const std::size_t k = net.config().cond_specs.size();
  if (k > cond.modalities.size()) throw ArgumentError("base loss is missing a prioritized modality");
  CondBatch prior = cond.prefix(k);
  prior.dropped.clear();
  return dsm_loss(net, x0, prior, schedule, draws, with_grad);
}

LossValue loss_cfg(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                   const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad) {
  if (net.config().cond_specs.size() != cond.modalities.size()) {
    throw ArgumentError("guidance loss needs a net over every modality");
  }
  CondBatch masked = cond;
  masked.dropped = draws.dropped;
  return dsm_loss(net, x0, masked, schedule, draws, with_grad);
}

LossValue loss_residual(const ComposedPolicy& policy, const Mat& x0, const CondBatch& cond,
                        const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad) {
  if (!policy.base_frozen()) throw ContractError("residual training requires a frozen base");
  check_batch(x0, cond, draws);
  CondBatch plain = cond;
  plain.dropped.clear();
  const Mat x_t = noised(x0, schedule, draws);
  const double batch = static_cast<double>(x0.cols());
  const bool output_mode = policy.mode() == ComposeMode::output_compose;
  const double scale = output_mode ? 0.5 : 1.0;
  LossValue out;
  if (!with_grad) {
    out.loss = scale * (policy.predict(x_t, draws.t, plain) - draws.eps).squaredNorm() / batch;
    return out;
  }
  out.grad.assign(policy.residual().num_params(), 0.0);
  policy.predict_with_residual_grad(
      x_t, draws.t, plain,
      [&](const Mat& composed) {
        const Mat diff = composed - draws.eps;
        out.loss = scale * diff.squaredNorm() / batch;
        return Mat((2.0 * scale / batch) * diff);
      },
      out.grad);
  return out;
}

LossValue loss_joint(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                     const NoiseSchedule& schedule, CounterRng& rng, bool with_grad) {
  return loss_joint(net, x0, cond, schedule, draw_noise(schedule, x0.cols(), static_cast<int>(x0.rows()), rng),
                    with_grad);
}

LossValue loss_base(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                    const NoiseSchedule& schedule, CounterRng& rng, bool with_grad) {
  return loss_base(net, x0, cond, schedule, draw_noise(schedule, x0.cols(), static_cast<int>(x0.rows()), rng),
                   with_grad);
}

LossValue loss_residual(const ComposedPolicy& policy, const Mat& x0, const CondBatch& cond,
                        const NoiseSchedule& schedule, CounterRng& rng, bool with_grad) {
  return loss_residual(policy, x0, cond, schedule,
                       draw_noise(schedule, x0.cols(), static_cast<int>(x0.rows()), rng), with_grad);
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::joint: return "joint";
    case LossKind::base: return "base";
    case LossKind::cfg: return "cfg";
    case LossKind::residual: return "residual";
  }
  return "joint";
}

AdamW::AdamW(std::size_t n, double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
    const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    params[i] -= lr_ * (update + wd_ * params[i]);
  }
}

Ema::Ema(std::span<const double> params, double decay) : decay_(decay), shadow_(params.begin(), params.end()) {}

void Ema::update(std::span<const double> params) {
  const double n = static_cast<double>(updates_++);
  const double d = std::min(decay_, (1.0 + n) / (10.0 + n));
  for (std::size_t i = 0; i < shadow_.size(); ++i) shadow_[i] += (1.0 - d) * (params[i] - shadow_[i]);
}

TrainResult run_training(std::span<double> params, Eigen::Index train_size, Eigen::Index val_size,
                         const BatchLossFn& train_loss, const BatchLossFn& val_loss,
                         const TrainingConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_size == 0) throw ArgumentError("training set is empty");
  AdamW opt(params.size(), config.learning_rate, config.weight_decay);
  Ema ema(params, config.ema_decay);
  CounterRng shuffle_rng(config.seed, kShuffleStream);
  CounterRng draw_rng(config.seed, kShuffleStream + 1);
  std::vector<Eigen::Index> order = iota_columns(train_size);
  std::vector<double> grad(params.size());
  std::vector<double> live(params.size());

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    double loss_sum = 0.0, norm_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const Eigen::Index> cols(order.data() + start, end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = train_loss(cols, draw_rng, grad);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps + 1));
      }
      double norm2 = 0.0;
      for (double g : grad) norm2 += g * g;
      if (!std::isfinite(norm2)) {
        throw NumericError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps + 1));
      }
      opt.step(params, grad);
      ema.update(params);
      loss_sum += loss;
      norm_sum += std::sqrt(norm2);
      ++steps;
    }

    LossReport report;
    report.epoch = epoch;
    report.train_loss = loss_sum / steps;
    report.grad_norm = norm_sum / steps;
    report.ema_applied = config.ema_decay > 0.0;
    std::copy(params.begin(), params.end(), live.begin());
    std::copy(ema.shadow().begin(), ema.shadow().end(), params.begin());
    if (val_size > 0) {
      CounterRng val_rng(config.seed, kValidationStream);
      const std::vector<Eigen::Index> cols = iota_columns(val_size);
      double total = 0.0;
      for (std::size_t start = 0; start < cols.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(cols.size(), start + static_cast<std::size_t>(config.batch_size));
        total += val_loss(std::span<const Eigen::Index>(cols.data() + start, end - start), val_rng, {}) *
                 static_cast<double>(end - start);
      }
      report.val_loss = total / static_cast<double>(val_size);
    } else {
      report.val_loss = report.train_loss;
    }
    std::copy(live.begin(), live.end(), params.begin());
    if (!std::isfinite(report.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    if (report.val_loss < best_val) {
      best_val = report.val_loss;
      result.best_epoch = epoch;
      result.best_params = ema.shadow();
    }
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
      result.checkpoint_epochs.push_back(epoch);
      result.checkpoints.push_back(ema.shadow());
    }
    result.reports.push_back(report);
    if (on_epoch) on_epoch(report);
  }
  result.final_params = ema.shadow();
  const auto& chosen = config.select_best ? result.best_params : result.final_params;
  std::copy(chosen.begin(), chosen.end(), params.begin());
  return result;
}

TrainResult train_policy(PolicyNet& net, const TrainingSet& data, const TrainingConfig& config,
                         LossKind kind, const NoiseSchedule& schedule, const EpochCallback& on_epoch) {
  if (kind == LossKind::residual) throw ArgumentError("use train_residual for the residual objective");
  data.validate();
  const std::size_t n_net = net.config().cond_specs.size();
  const std::span<const ModalitySpec> expect(data.specs.data(), kind == LossKind::base ? n_net : data.specs.size());
  if (n_net != expect.size() || !std::equal(expect.begin(), expect.end(), net.config().cond_specs.begin())) {
    throw ArgumentError("network modalities do not match the training data");
  }
  if (kind == LossKind::cfg) {
    for (std::size_t m = static_cast<std::size_t>(data.priority_k); m < n_net; ++m) {
      if (!net.config().is_nullable(m)) throw ArgumentError("guidance net needs null tokens for dropped modalities");
    }
  }
  auto [train_set, val_set] = split_validation(data, config.validation_fraction);
  const int dim = static_cast<int>(data.x0.rows());
  const int num_modalities = static_cast<int>(data.specs.size());

  auto make_loss = [&, dim, num_modalities](const TrainingSet& set, bool training) -> BatchLossFn {
    const TrainingSet* source = &set;
    return [&, source, dim, num_modalities, training](std::span<const Eigen::Index> cols, CounterRng& rng,
                                                      std::span<double> grad) {
      const TrainingSet& set = *source;
      const Mat x0 = [&] {
        Mat m(dim, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t j = 0; j < cols.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = set.x0.col(cols[j]);
        return m;
      }();
      CondBatch cond = set.cond_batch(cols);
      NoiseDraws draws = draw_noise(schedule, x0.cols(), dim, rng);
      if (kind == LossKind::cfg) {
        draw_guidance_drops(draws, num_modalities, data.priority_k, config.cfg_drop_prob, rng);
      }
      if (training) perturb_conditioning(cond, config.tau, rng);
      const bool want = !grad.empty();
      LossValue v;
      switch (kind) {
        case LossKind::joint: v = loss_joint(net, x0, cond, schedule, draws, want); break;
        case LossKind::base: v = loss_base(net, x0, cond, schedule, draws, want); break;
        default: v = loss_cfg(net, x0, cond, schedule, draws, want); break;
      }
      if (want) std::copy(v.grad.begin(), v.grad.end(), grad.begin());
      return v.loss;
    };
  };
  return run_training(net.params(), train_set.size(), val_set.size(), make_loss(train_set, true),
                      make_loss(val_set, false), config, on_epoch);
}

TrainResult train_residual(ComposedPolicy& policy, const TrainingSet& data, const TrainingConfig& config,
                           const NoiseSchedule& schedule, const EpochCallback& on_epoch) {
  if (!policy.base_frozen()) throw ContractError("residual training requires a frozen base");
  data.validate();
  const auto& specs = policy.residual().config().cond_specs;
  if (specs != data.specs) throw ArgumentError("residual modalities do not match the training data");
  auto [train_set, val_set] = split_validation(data, config.validation_fraction);
  const int dim = static_cast<int>(data.x0.rows());
  auto make_loss = [&, dim](const TrainingSet& set, bool training) -> BatchLossFn {
    const TrainingSet* source = &set;
    return [&, source, dim, training](std::span<const Eigen::Index> cols, CounterRng& rng, std::span<double> grad) {
      const TrainingSet& set = *source;
      Mat x0(dim, static_cast<Eigen::Index>(cols.size()));
      for (std::size_t j = 0; j < cols.size(); ++j) x0.col(static_cast<Eigen::Index>(j)) = set.x0.col(cols[j]);
      CondBatch cond = set.cond_batch(cols);
      const NoiseDraws draws = draw_noise(schedule, x0.cols(), dim, rng);
      if (training) perturb_conditioning(cond, config.tau, rng);
      const bool want = !grad.empty();
      LossValue v = loss_residual(policy, x0, cond, schedule, draws, want);
      if (want) std::copy(v.grad.begin(), v.grad.end(), grad.begin());
      return v.loss;
    };
  };
  return run_training(policy.residual().params(), train_set.size(), val_set.size(),
                      make_loss(train_set, true), make_loss(val_set, false), config, on_epoch);
}

TrainResult finetune_residual(ComposedPolicy& policy, const TrainingSet& ood_data,
                              const TrainingConfig& config, const NoiseSchedule& schedule,
                              const EpochCallback& on_epoch) {
  if (policy.residual().config().cond_specs != ood_data.specs) {
    throw ArgumentError("fine-tuning data uses different modality specs");
  }
  return train_residual(policy, ood_data, config, schedule, on_epoch);
}

}  // namespace fdp
