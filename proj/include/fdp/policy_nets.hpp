#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fdp/diffusion.hpp"
#include "fdp/observation.hpp"

namespace fdp {

/// Per-modality conditioning for a batch: modalities[m] is (dim * horizon) x B.
/// dropped[m], when non-empty, flags items whose modality m is replaced by the
/// network's learned null token.
struct CondBatch {
  std::vector<Mat> modalities;
  std::vector<std::vector<std::uint8_t>> dropped;

  [[nodiscard]] Eigen::Index batch_size() const {
    return modalities.empty() ? 0 : modalities.front().cols();
  }
  /// The first n modalities, without drop flags beyond them.
  [[nodiscard]] CondBatch prefix(std::size_t n) const;
};

/// Packs single bundles (all sharing specs) into a batch.
CondBatch make_cond_batch(std::span<const ObservationBundle> bundles);
CondBatch make_cond_batch(const ObservationBundle& bundle);

struct NetConfig {
  int action_dim = 0;
  int hidden = 128;
  int blocks = 4;
  int time_features = 32;
  int time_embed = 64;
  int obs_horizon = 1;
  std::vector<ModalitySpec> cond_specs;
  /// Encoder width per conditioning modality; empty picks a width by kind.
  std::vector<int> embed_dims;
  /// Learned null token per modality (used by the guidance baseline).
  std::vector<bool> nullable;

  void validate() const;
  [[nodiscard]] int embed_dim(std::size_t m) const;
  [[nodiscard]] int cond_width() const;
  [[nodiscard]] bool is_nullable(std::size_t m) const {
    return m < nullable.size() && nullable[m];
  }
};

int default_embed_dim(ModalityKind kind);

/// Named slice of a flat parameter array.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
};

/// Deterministic layout: blocks are appended in construction order.
class ParameterLayout {
 public:
  std::size_t add(std::string name, int rows, int cols);
  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] const std::vector<ParamBlock>& blocks() const { return blocks_; }

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t size_ = 0;
};

struct LinearSlot {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int out = 0;
  int in = 0;
  bool has_bias = true;
};

/// Shared fully-connected denoiser body: sinusoidal time embedding, per-modality
/// encoders, an input projection of [x_t, conditioning], residual blocks with
/// additive conditioning modulation, and an optional output head.
class Trunk {
 public:
  struct Cache {
    Mat x;
    Mat time_features;
    Mat time_pre;
    Mat cond;                       // G x B
    std::vector<Mat> enc_inputs;    // after null substitution
    std::vector<std::vector<std::uint8_t>> dropped;
    std::vector<Mat> block_pre;     // a_i
    std::vector<Mat> block_out;     // h_0 .. h_L (after any injection)
    Mat output;                     // head output, if any
  };

  Trunk() = default;
  Trunk(const NetConfig& config, bool with_head, ParameterLayout& layout);

  /// `inject`, when given, is added to block i's output before block i + 1.
  void forward(std::span<const double> params, const Mat& x_t, std::span<const int> t,
               const CondBatch& cond, const std::vector<Mat>* inject, Cache& cache) const;

  /// Backpropagates head gradient `d_out` (may be null for head-less trunks)
  /// plus optional per-block output gradients `d_blocks` (index 1..L).
  /// Parameter gradients are accumulated into `grad` unless it is empty; the
  /// gradient reaching each post-injection block output is written to
  /// `d_inject` when non-null.
  void backward(std::span<const double> params, const Cache& cache, const Mat* d_out,
                const std::vector<Mat>* d_blocks, std::span<double> grad,
                std::vector<Mat>* d_inject) const;

  void initialize(std::span<double> params, CounterRng& rng, bool zero_head) const;

  [[nodiscard]] const NetConfig& config() const { return config_; }
  [[nodiscard]] bool has_head() const { return with_head_; }
  [[nodiscard]] const std::vector<std::size_t>& null_tokens() const { return null_tokens_; }

 private:
  NetConfig config_;
  bool with_head_ = true;
  LinearSlot time_proj_;
  std::vector<LinearSlot> encoders_;
  std::vector<std::size_t> null_tokens_;  // offset per modality, SIZE_MAX if none
  LinearSlot in_x_;
  LinearSlot in_cond_;
  std::vector<LinearSlot> block_w_;
  std::vector<LinearSlot> block_mod_;
  LinearSlot head_;
};

/// Noise predictor epsilon_theta(x_t, y^{1:k}, t).
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(NetConfig config, std::uint64_t seed);

  [[nodiscard]] const NetConfig& config() const { return trunk_.config(); }
  [[nodiscard]] const Trunk& trunk() const { return trunk_; }
  [[nodiscard]] const ParameterLayout& layout() const { return layout_; }
  [[nodiscard]] std::span<const double> params() const { return params_; }
  [[nodiscard]] std::span<double> params() { return params_; }
  [[nodiscard]] std::size_t num_params() const { return params_.size(); }

  /// Batched prediction; `cond` must hold at least this net's modalities.
  [[nodiscard]] Mat predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const;
  void forward(const Mat& x_t, std::span<const int> t, const CondBatch& cond,
               const std::vector<Mat>* inject, Trunk::Cache& cache) const;

 private:
  ParameterLayout layout_;
  Trunk trunk_;
  std::vector<double> params_;
};

enum class ComposeMode { output_compose, blockwise_compose };

std::string to_string(ComposeMode mode);
ComposeMode parse_compose_mode(const std::string& name);

/// Residual noise predictor epsilon_phi(x_t, y^{1:M}, t). In output mode its
/// head is zero-initialized; in blockwise mode it has no head and one
/// zero-initialized coupling layer per block instead.
class ResidualNet {
 public:
  ResidualNet() = default;
  ResidualNet(NetConfig config, ComposeMode mode, std::uint64_t seed);

  [[nodiscard]] const NetConfig& config() const { return trunk_.config(); }
  [[nodiscard]] ComposeMode mode() const { return mode_; }
  [[nodiscard]] const Trunk& trunk() const { return trunk_; }
  [[nodiscard]] const ParameterLayout& layout() const { return layout_; }
  [[nodiscard]] std::span<const double> params() const { return params_; }
  [[nodiscard]] std::span<double> params() { return params_; }
  [[nodiscard]] std::size_t num_params() const { return params_.size(); }
  [[nodiscard]] const std::vector<LinearSlot>& zero_layers() const { return zero_layers_; }

  /// Output-mode prediction (head output).
  [[nodiscard]] Mat predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const;

  /// Blockwise mode: runs the residual stream and returns Z_i(F^i_res) for
  /// i = 1..L (index 0 unused, zero-sized).
  std::vector<Mat> couplings(const Mat& x_t, std::span<const int> t, const CondBatch& cond,
                             Trunk::Cache& cache) const;

 private:
  friend class ComposedPolicy;
  ComposeMode mode_ = ComposeMode::blockwise_compose;
  ParameterLayout layout_;
  Trunk trunk_;
  std::vector<LinearSlot> zero_layers_;
  std::vector<double> params_;
};

/// Frozen base plus trainable residual.
class ComposedPolicy {
 public:
  ComposedPolicy() = default;
  ComposedPolicy(PolicyNet base, ResidualNet residual, bool base_frozen = true);

  [[nodiscard]] const PolicyNet& base() const { return base_; }
  PolicyNet& mutable_base() { return base_; }
  [[nodiscard]] const ResidualNet& residual() const { return residual_; }
  ResidualNet& residual() { return residual_; }
  [[nodiscard]] ComposeMode mode() const { return residual_.mode(); }
  [[nodiscard]] bool base_frozen() const { return base_frozen_; }
  void set_base_frozen(bool frozen) { base_frozen_ = frozen; }

  /// eps_theta + eps_phi (output mode) or the blockwise-composed base stream.
  [[nodiscard]] Mat predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const;

  /// Loss gradient w.r.t. the composed output -> residual parameter gradient.
  /// Returns the composed prediction.
  Mat predict_with_residual_grad(const Mat& x_t, std::span<const int> t, const CondBatch& cond,
                                 const std::function<Mat(const Mat&)>& d_loss_d_out,
                                 std::span<double> residual_grad) const;

 private:
  PolicyNet base_;
  ResidualNet residual_;
  bool base_frozen_ = true;
};

/// Single-sample conveniences.
Vec forward_base(const PolicyNet& net, const Vec& x_t, std::span<const Vec> y_prior, int t);
Vec forward_composed(const ComposedPolicy& policy, const Vec& x_t, const ObservationBundle& y, int t);

/// Replaces the listed modalities with null tokens (or zeros when a modality
/// has no token). In guidance mode only de-prioritized modalities may drop.
ObservationBundle drop_modality(const ObservationBundle& y, std::span<const int> indices,
                                const std::vector<Vec>& null_tokens, bool guidance_mode = true);

/// Null tokens stored in a net, one per conditioning modality (empty if none).
std::vector<Vec> null_tokens_of(const PolicyNet& net);

/// Order-sensitive checksum of a parameter array.
std::uint64_t parameter_checksum(std::span<const double> params);

double gelu(double x);
double gelu_grad(double x);

}  // namespace fdp
