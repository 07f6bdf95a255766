#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdp/diffusion.hpp"
#include "fdp/policy_nets.hpp"

namespace fdp {

struct TrainingConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  int batch_size = 64;
  int epochs = 300;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double cfg_drop_prob = 0.2;
  double tau = 0.0;
  /// Keep the EMA snapshot every n epochs in TrainResult::checkpoints (0: none).
  int checkpoint_every = 0;
  /// End on the lowest-validation EMA snapshot; otherwise on the last one.
  bool select_best = true;

  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& config);
TrainingConfig training_config_from_json(const nlohmann::json& j);

struct LossReport {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double grad_norm = 0.0;
  bool ema_applied = false;
};

/// One JSON object per line of the training log.
std::string to_jsonl(const LossReport& report);

/// Columns are samples: x0 is D x N, cond[m] is (dim_m * horizon) x N over all
/// M modalities. `episode` tags each column; the validation split takes whole
/// episodes from the end.
struct TrainingSet {
  Mat x0;
  std::vector<Mat> cond;
  std::vector<ModalitySpec> specs;
  int horizon = 1;
  int priority_k = 1;
  std::vector<int> episode;

  [[nodiscard]] Eigen::Index size() const { return x0.cols(); }
  [[nodiscard]] TrainingSet select(std::span<const Eigen::Index> columns) const;
  [[nodiscard]] CondBatch cond_batch(std::span<const Eigen::Index> columns) const;
  void validate() const;
};

/// (train, validation), splitting on episode boundaries.
std::pair<TrainingSet, TrainingSet> split_validation(const TrainingSet& data, double fraction);

/// Per-item diffusion step, noise, and (for guidance training) drop flags.
struct NoiseDraws {
  std::vector<int> t;
  Mat eps;
  std::vector<std::vector<std::uint8_t>> dropped;  // per modality, empty if never dropped
};

/// t uniform on [1, T], then eps ~ N(0, I), in that order from `rng`.
NoiseDraws draw_noise(const NoiseSchedule& schedule, Eigen::Index batch, int action_dim, CounterRng& rng);

/// Adds drop flags: with probability p per item, all modalities from k onward
/// are dropped together.
void draw_guidance_drops(NoiseDraws& draws, int num_modalities, int priority_k, double p, CounterRng& rng);

/// Loss value plus the gradient w.r.t. the trainable parameters (empty when
/// not requested).
struct LossValue {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean ||eps0 - eps_theta(x_t, y, t)||^2 with the net seeing all M modalities.
LossValue loss_joint(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                     const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad = true);
/// Same objective, the net seeing only its prioritized prefix of `cond`.
LossValue loss_base(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                    const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad = true);
/// Output mode: 1/2 mean ||eps0 - eps_theta - eps_phi||^2. Blockwise mode:
/// mean ||eps0 - composed||^2. Gradient covers residual parameters only.
LossValue loss_residual(const ComposedPolicy& policy, const Mat& x0, const CondBatch& cond,
                        const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad = true);
/// Joint objective with modalities replaced by learned null tokens where
/// `draws.dropped` says so.
LossValue loss_cfg(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                   const NoiseSchedule& schedule, const NoiseDraws& draws, bool with_grad = true);

LossValue loss_joint(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                     const NoiseSchedule& schedule, CounterRng& rng, bool with_grad = true);
LossValue loss_base(const PolicyNet& net, const Mat& x0, const CondBatch& cond,
                    const NoiseSchedule& schedule, CounterRng& rng, bool with_grad = true);
LossValue loss_residual(const ComposedPolicy& policy, const Mat& x0, const CondBatch& cond,
                        const NoiseSchedule& schedule, CounterRng& rng, bool with_grad = true);

enum class LossKind { joint, base, cfg, residual };
std::string to_string(LossKind kind);

struct TrainResult {
  std::vector<LossReport> reports;
  int best_epoch = 0;  // 1-based
  std::vector<double> best_params;
  std::vector<double> final_params;
  std::vector<int> checkpoint_epochs;
  std::vector<std::vector<double>> checkpoints;
};

using EpochCallback = std::function<void(const LossReport&)>;

/// Generic loop: `loss(params, columns, rng, grad)` evaluates a minibatch at the
/// given parameters, writing the gradient when `grad` is non-empty. `params` is
/// the live parameter array and ends holding the best-validation EMA snapshot.
using BatchLossFn = std::function<double(std::span<const Eigen::Index> columns, CounterRng& rng,
                                         std::span<double> grad)>;
TrainResult run_training(std::span<double> params, Eigen::Index train_size, Eigen::Index val_size,
                         const BatchLossFn& train_loss, const BatchLossFn& val_loss,
                         const TrainingConfig& config, const EpochCallback& on_epoch = {});

/// Trains a policy net with the joint, base, or guidance objective.
TrainResult train_policy(PolicyNet& net, const TrainingSet& data, const TrainingConfig& config,
                         LossKind kind, const NoiseSchedule& schedule, const EpochCallback& on_epoch = {});

/// Trains only the residual of a frozen-base composed policy.
TrainResult train_residual(ComposedPolicy& policy, const TrainingSet& data, const TrainingConfig& config,
                           const NoiseSchedule& schedule, const EpochCallback& on_epoch = {});

/// Residual-only adaptation to new demonstrations with the same modalities.
TrainResult finetune_residual(ComposedPolicy& policy, const TrainingSet& ood_data,
                              const TrainingConfig& config, const NoiseSchedule& schedule,
                              const EpochCallback& on_epoch = {});

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t n, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grad);

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  long long t_ = 0;
};

/// Parameter shadow with warmup: decay_n = min(decay, (1 + n) / (10 + n)).
class Ema {
 public:
  Ema(std::span<const double> params, double decay);
  void update(std::span<const double> params);
  [[nodiscard]] const std::vector<double>& shadow() const { return shadow_; }

 private:
  double decay_;
  long long updates_ = 0;
  std::vector<double> shadow_;
};

}  // namespace fdp
