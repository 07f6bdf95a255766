#include "fdp/policy_nets.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
using CVMap = Eigen::Map<const Vec>;
using VMap = Eigen::Map<Vec>;

constexpr std::size_t kNoToken = std::numeric_limits<std::size_t>::max();

Mat weight(const LinearSlot& s, std::span<const double> p) {
  return CMap(p.data() + s.weight, s.out, s.in);
}
CVMap bias(const LinearSlot& s, std::span<const double> p) { return CVMap(p.data() + s.bias, s.out); }
MMap weight_grad(const LinearSlot& s, std::span<double> g) { return MMap(g.data() + s.weight, s.out, s.in); }
VMap bias_grad(const LinearSlot& s, std::span<double> g) { return VMap(g.data() + s.bias, s.out); }

LinearSlot add_linear(ParameterLayout& layout, const std::string& name, int out, int in, bool with_bias) {
  LinearSlot s;
  s.out = out;
  s.in = in;
  s.has_bias = with_bias;
  s.weight = layout.add(name + ".weight", out, in);
  if (with_bias) s.bias = layout.add(name + ".bias", out, 1);
  return s;
}

void apply_linear(const LinearSlot& s, std::span<const double> p, const Mat& in, Mat& out) {
  out.noalias() = weight(s, p) * in;
  if (s.has_bias) out.colwise() += bias(s, p);
}

void accumulate_linear_grad(const LinearSlot& s, std::span<double> g, const Mat& d_out, const Mat& in) {
  weight_grad(s, g) += Mat(d_out * in.transpose());
  if (s.has_bias) bias_grad(s, g) += Vec(d_out.rowwise().sum());
}

void init_uniform(const LinearSlot& s, std::span<double> p, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
  const std::size_t nw = static_cast<std::size_t>(s.out) * s.in;
  for (std::size_t i = 0; i < nw; ++i) p[s.weight + i] = (2.0 * rng.uniform() - 1.0) * bound;
  if (s.has_bias) {
    for (int i = 0; i < s.out; ++i) p[s.bias + i] = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

void init_zero(const LinearSlot& s, std::span<double> p) {
  std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(s.weight), static_cast<std::size_t>(s.out) * s.in, 0.0);
  if (s.has_bias) std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(s.bias), s.out, 0.0);
}

Mat gelu_of(const Mat& a) { return a.unaryExpr([](double v) { return gelu(v); }); }
Mat gelu_grad_of(const Mat& a) { return a.unaryExpr([](double v) { return gelu_grad(v); }); }

void check_cond(const NetConfig& cfg, const CondBatch& cond, Eigen::Index batch) {
  if (cond.modalities.size() < cfg.cond_specs.size()) {
    throw ArgumentError("conditioning is missing a modality");
  }
  for (std::size_t m = 0; m < cfg.cond_specs.size(); ++m) {
    const auto& mat = cond.modalities[m];
    if (mat.rows() != static_cast<Eigen::Index>(cfg.cond_specs[m].dim) * cfg.obs_horizon) {
      throw ArgumentError("modality '" + cfg.cond_specs[m].name + "' has wrong dimension");
    }
    if (mat.cols() != batch) throw ArgumentError("conditioning batch size mismatch");
  }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

CondBatch CondBatch::prefix(std::size_t n) const {
  CondBatch out;
  out.modalities.assign(modalities.begin(), modalities.begin() + static_cast<std::ptrdiff_t>(std::min(n, modalities.size())));
  if (!dropped.empty()) {
    out.dropped.assign(dropped.begin(), dropped.begin() + static_cast<std::ptrdiff_t>(std::min(n, dropped.size())));
  }
  return out;
}

CondBatch make_cond_batch(std::span<const ObservationBundle> bundles) {
  if (bundles.empty()) throw ArgumentError("empty bundle batch");
  CondBatch out;
  const auto& first = bundles.front();
  for (std::size_t m = 0; m < first.values.size(); ++m) {
    Mat mat(first.values[m].size(), static_cast<Eigen::Index>(bundles.size()));
    for (std::size_t b = 0; b < bundles.size(); ++b) {
      if (bundles[b].values.size() != first.values.size() ||
          bundles[b].values[m].size() != first.values[m].size()) {
        throw ArgumentError("bundles in a batch must share specs");
      }
      mat.col(static_cast<Eigen::Index>(b)) = bundles[b].values[m];
    }
    out.modalities.push_back(std::move(mat));
  }
  return out;
}

CondBatch make_cond_batch(const ObservationBundle& bundle) {
  return make_cond_batch(std::span<const ObservationBundle>(&bundle, 1));
}

int default_embed_dim(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::vision_grid: return 64;
    case ModalityKind::proprio: return 32;
    case ModalityKind::state: return 32;
  }
  return 32;
}

void NetConfig::validate() const {
  if (action_dim < 1 || hidden < 1 || blocks < 1 || obs_horizon < 1) {
    throw ArgumentError("network dimensions must be positive");
  }
  if (time_features < 2 || time_features % 2 != 0) throw ArgumentError("time features must be even");
  validate_specs(cond_specs);
  if (!embed_dims.empty() && embed_dims.size() != cond_specs.size()) {
    throw ArgumentError("embed_dims must match cond_specs");
  }
  if (!nullable.empty() && nullable.size() != cond_specs.size()) {
    throw ArgumentError("nullable flags must match cond_specs");
  }
}

int NetConfig::embed_dim(std::size_t m) const {
  return embed_dims.empty() ? default_embed_dim(cond_specs[m].kind) : embed_dims[m];
}

int NetConfig::cond_width() const {
  int g = time_embed;
  for (std::size_t m = 0; m < cond_specs.size(); ++m) g += embed_dim(m);
  return g;
}

std::size_t ParameterLayout::add(std::string name, int rows, int cols) {
  const std::size_t at = size_;
  blocks_.push_back({std::move(name), at, rows, cols});
  size_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  return at;
}

Trunk::Trunk(const NetConfig& config, bool with_head, ParameterLayout& layout)
    : config_(config), with_head_(with_head) {
  config_.validate();
  const int h = config_.hidden;
  time_proj_ = add_linear(layout, "time_proj", config_.time_embed, config_.time_features, true);
  for (std::size_t m = 0; m < config_.cond_specs.size(); ++m) {
    const auto& spec = config_.cond_specs[m];
    const int in = spec.dim * config_.obs_horizon;
    encoders_.push_back(add_linear(layout, "encoder." + spec.name, config_.embed_dim(m), in, true));
    null_tokens_.push_back(config_.is_nullable(m) ? layout.add("null." + spec.name, in, 1) : kNoToken);
  }
  in_x_ = add_linear(layout, "input.x", h, config_.action_dim, true);
  in_cond_ = add_linear(layout, "input.cond", h, config_.cond_width(), false);
  for (int i = 0; i < config_.blocks; ++i) {
    block_w_.push_back(add_linear(layout, "block" + std::to_string(i) + ".linear", h, h, true));
    block_mod_.push_back(add_linear(layout, "block" + std::to_string(i) + ".modulation", h,
                                    config_.cond_width(), false));
  }
  if (with_head_) head_ = add_linear(layout, "head", config_.action_dim, h, true);
}

void Trunk::initialize(std::span<double> params, CounterRng& rng, bool zero_head) const {
  init_uniform(time_proj_, params, rng);
  for (std::size_t m = 0; m < encoders_.size(); ++m) {
    init_uniform(encoders_[m], params, rng);
    if (null_tokens_[m] != kNoToken) {
      const int n = encoders_[m].in;
      std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(null_tokens_[m]), n, 0.0);
    }
  }
  init_uniform(in_x_, params, rng);
  init_uniform(in_cond_, params, rng);
  for (int i = 0; i < config_.blocks; ++i) {
    init_uniform(block_w_[static_cast<std::size_t>(i)], params, rng);
    const auto& mod = block_mod_[static_cast<std::size_t>(i)];
    if (i + 1 == config_.blocks) {
      // Final modulation projection: small Gaussian rather than zero.
      const std::size_t n = static_cast<std::size_t>(mod.out) * mod.in;
      for (std::size_t k = 0; k < n; ++k) params[mod.weight + k] = 0.02 * rng.normal();
    } else {
      init_uniform(mod, params, rng);
    }
  }
  if (with_head_) {
    if (zero_head) {
      init_zero(head_, params);
    } else {
      init_uniform(head_, params, rng);
    }
  }
}

void Trunk::forward(std::span<const double> p, const Mat& x_t, std::span<const int> t,
                    const CondBatch& cond, const std::vector<Mat>* inject, Cache& c) const {
  const Eigen::Index batch = x_t.cols();
  if (x_t.rows() != config_.action_dim) throw ArgumentError("x_t has wrong dimension");
  if (static_cast<Eigen::Index>(t.size()) != batch) throw ArgumentError("one step index per item required");
  check_cond(config_, cond, batch);

  c.x = x_t;
  const int half = config_.time_features / 2;
  c.time_features.resize(config_.time_features, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const double tv = static_cast<double>(t[static_cast<std::size_t>(b)]);
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      c.time_features(k, b) = std::sin(tv * freq);
      c.time_features(half + k, b) = std::cos(tv * freq);
    }
  }
  apply_linear(time_proj_, p, c.time_features, c.time_pre);

  const int g = config_.cond_width();
  c.cond.resize(g, batch);
  c.cond.topRows(config_.time_embed) = gelu_of(c.time_pre);
  int row = config_.time_embed;
  c.enc_inputs.resize(encoders_.size());
  c.dropped.assign(encoders_.size(), {});
  for (std::size_t m = 0; m < encoders_.size(); ++m) {
    c.enc_inputs[m] = cond.modalities[m];
    if (m < cond.dropped.size() && !cond.dropped[m].empty()) {
      const auto& mask = cond.dropped[m];
      if (static_cast<Eigen::Index>(mask.size()) != batch) throw ArgumentError("drop mask size mismatch");
      c.dropped[m] = mask;
      for (Eigen::Index b = 0; b < batch; ++b) {
        if (!mask[static_cast<std::size_t>(b)]) continue;
        if (null_tokens_[m] == kNoToken) {
          c.enc_inputs[m].col(b).setZero();
        } else {
          c.enc_inputs[m].col(b) = CVMap(p.data() + null_tokens_[m], encoders_[m].in);
        }
      }
    }
    Mat e;
    apply_linear(encoders_[m], p, c.enc_inputs[m], e);
    c.cond.middleRows(row, encoders_[m].out) = e;
    row += encoders_[m].out;
  }

  const int blocks = config_.blocks;
  c.block_out.resize(static_cast<std::size_t>(blocks) + 1);
  c.block_pre.resize(static_cast<std::size_t>(blocks) + 1);
  Mat& h0 = c.block_out[0];
  apply_linear(in_x_, p, x_t, h0);
  h0.noalias() += weight(in_cond_, p) * c.cond;
  for (int i = 1; i <= blocks; ++i) {
    const auto si = static_cast<std::size_t>(i);
    Mat& a = c.block_pre[si];
    apply_linear(block_w_[si - 1], p, c.block_out[si - 1], a);
    a.noalias() += weight(block_mod_[si - 1], p) * c.cond;
    c.block_out[si] = c.block_out[si - 1] + gelu_of(a);
    if (inject != nullptr) c.block_out[si] += (*inject)[si];
  }
  if (with_head_) apply_linear(head_, p, c.block_out.back(), c.output);
}

void Trunk::backward(std::span<const double> p, const Cache& c, const Mat* d_out,
                     const std::vector<Mat>* d_blocks, std::span<double> grad,
                     std::vector<Mat>* d_inject) const {
  const bool want_params = !grad.empty();
  const Eigen::Index batch = c.x.cols();
  const int blocks = config_.blocks;
  Mat dh = Mat::Zero(config_.hidden, batch);
  if (with_head_ && d_out != nullptr) {
    if (want_params) accumulate_linear_grad(head_, grad, *d_out, c.block_out.back());
    dh.noalias() += weight(head_, p).transpose() * *d_out;
  }
  Mat dcond;
  if (want_params) dcond = Mat::Zero(config_.cond_width(), batch);
  if (d_inject != nullptr) d_inject->assign(static_cast<std::size_t>(blocks) + 1, Mat());

  for (int i = blocks; i >= 1; --i) {
    const auto si = static_cast<std::size_t>(i);
    if (d_blocks != nullptr && (*d_blocks)[si].size() > 0) dh += (*d_blocks)[si];
    if (d_inject != nullptr) (*d_inject)[si] = dh;
    const Mat delta = dh.cwiseProduct(gelu_grad_of(c.block_pre[si]));
    if (want_params) {
      accumulate_linear_grad(block_w_[si - 1], grad, delta, c.block_out[si - 1]);
      weight_grad(block_mod_[si - 1], grad) += Mat(delta * c.cond.transpose());
      dcond.noalias() += weight(block_mod_[si - 1], p).transpose() * delta;
    }
    dh.noalias() += weight(block_w_[si - 1], p).transpose() * delta;
  }
  if (!want_params) return;

  accumulate_linear_grad(in_x_, grad, dh, c.x);
  weight_grad(in_cond_, grad) += Mat(dh * c.cond.transpose());
  dcond.noalias() += weight(in_cond_, p).transpose() * dh;

  const Mat d_time_pre = dcond.topRows(config_.time_embed).cwiseProduct(gelu_grad_of(c.time_pre));
  accumulate_linear_grad(time_proj_, grad, d_time_pre, c.time_features);
  int row = config_.time_embed;
  for (std::size_t m = 0; m < encoders_.size(); ++m) {
    const Mat de = dcond.middleRows(row, encoders_[m].out);
    row += encoders_[m].out;
    accumulate_linear_grad(encoders_[m], grad, de, c.enc_inputs[m]);
    if (null_tokens_[m] == kNoToken || c.dropped[m].empty()) continue;
    VMap d_token(grad.data() + null_tokens_[m], encoders_[m].in);
    const Mat w = weight(encoders_[m], p);
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (c.dropped[m][static_cast<std::size_t>(b)]) {
        d_token += Vec(w.transpose() * de.col(b));
      }
    }
  }
}

PolicyNet::PolicyNet(NetConfig config, std::uint64_t seed) : trunk_(config, true, layout_) {
  params_.assign(layout_.size(), 0.0);
  CounterRng rng(seed, 0x9011C1);
  trunk_.initialize(params_, rng, false);
}

void PolicyNet::forward(const Mat& x_t, std::span<const int> t, const CondBatch& cond,
                        const std::vector<Mat>* inject, Trunk::Cache& cache) const {
  trunk_.forward(params_, x_t, t, cond, inject, cache);
}

Mat PolicyNet::predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const {
  Trunk::Cache cache;
  forward(x_t, t, cond, nullptr, cache);
  return std::move(cache.output);
}

std::string to_string(ComposeMode mode) {
  return mode == ComposeMode::output_compose ? "output_compose" : "blockwise_compose";
}

ComposeMode parse_compose_mode(const std::string& name) {
  if (name == "output_compose" || name == "output") return ComposeMode::output_compose;
  if (name == "blockwise_compose" || name == "blockwise") return ComposeMode::blockwise_compose;
  throw ArgumentError("unknown compose mode: " + name);
}

ResidualNet::ResidualNet(NetConfig config, ComposeMode mode, std::uint64_t seed)
    : mode_(mode), trunk_(config, mode == ComposeMode::output_compose, layout_) {
  if (mode_ == ComposeMode::blockwise_compose) {
    for (int i = 0; i < trunk_.config().blocks; ++i) {
      zero_layers_.push_back(add_linear(layout_, "zero" + std::to_string(i), trunk_.config().hidden,
                                        trunk_.config().hidden, true));
    }
  }
  params_.assign(layout_.size(), 0.0);
  CounterRng rng(seed, 0x2E51D);
  trunk_.initialize(params_, rng, true);
  for (const auto& z : zero_layers_) init_zero(z, params_);
}

Mat ResidualNet::predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const {
  if (mode_ != ComposeMode::output_compose) throw ContractError("blockwise residual has no output head");
  Trunk::Cache cache;
  trunk_.forward(params_, x_t, t, cond, nullptr, cache);
  return std::move(cache.output);
}

std::vector<Mat> ResidualNet::couplings(const Mat& x_t, std::span<const int> t, const CondBatch& cond,
                                        Trunk::Cache& cache) const {
  if (mode_ != ComposeMode::blockwise_compose) throw ContractError("output residual has no couplings");
  trunk_.forward(params_, x_t, t, cond, nullptr, cache);
  std::vector<Mat> out(zero_layers_.size() + 1);
  for (std::size_t i = 0; i < zero_layers_.size(); ++i) {
    apply_linear(zero_layers_[i], params_, cache.block_out[i + 1], out[i + 1]);
  }
  return out;
}

ComposedPolicy::ComposedPolicy(PolicyNet base, ResidualNet residual, bool base_frozen)
    : base_(std::move(base)), residual_(std::move(residual)), base_frozen_(base_frozen) {
  if (base_.config().action_dim != residual_.config().action_dim) {
    throw ArgumentError("base and residual action dimensions differ");
  }
  if (residual_.mode() == ComposeMode::blockwise_compose &&
      (base_.config().blocks != residual_.config().blocks ||
       base_.config().hidden != residual_.config().hidden)) {
    throw ArgumentError("blockwise composition needs matching block count and width");
  }
  const auto& bspecs = base_.config().cond_specs;
  const auto& rspecs = residual_.config().cond_specs;
  if (bspecs.size() > rspecs.size() || !std::equal(bspecs.begin(), bspecs.end(), rspecs.begin())) {
    throw ArgumentError("base modalities must be a prefix of the residual modalities");
  }
}

Mat ComposedPolicy::predict(const Mat& x_t, std::span<const int> t, const CondBatch& cond) const {
  if (cond.modalities.size() < residual_.config().cond_specs.size()) {
    throw ArgumentError("composed prediction needs every modality");
  }
  if (mode() == ComposeMode::output_compose) {
    return base_.predict(x_t, t, cond) + residual_.predict(x_t, t, cond);
  }
  Trunk::Cache rc;
  const auto inject = residual_.couplings(x_t, t, cond, rc);
  Trunk::Cache bc;
  base_.forward(x_t, t, cond, &inject, bc);
  return std::move(bc.output);
}

Mat ComposedPolicy::predict_with_residual_grad(const Mat& x_t, std::span<const int> t,
                                               const CondBatch& cond,
                                               const std::function<Mat(const Mat&)>& d_loss_d_out,
                                               std::span<double> residual_grad) const {
  if (cond.modalities.size() < residual_.config().cond_specs.size()) {
    throw ArgumentError("composed prediction needs every modality");
  }
  const auto rparams = residual_.params();
  if (mode() == ComposeMode::output_compose) {
    Trunk::Cache rc;
    residual_.trunk().forward(rparams, x_t, t, cond, nullptr, rc);
    Mat out = base_.predict(x_t, t, cond) + rc.output;
    const Mat d_out = d_loss_d_out(out);
    residual_.trunk().backward(rparams, rc, &d_out, nullptr, residual_grad, nullptr);
    return out;
  }
  Trunk::Cache rc;
  const auto inject = residual_.couplings(x_t, t, cond, rc);
  Trunk::Cache bc;
  base_.forward(x_t, t, cond, &inject, bc);
  const Mat d_out = d_loss_d_out(bc.output);
  std::vector<Mat> d_inject;
  base_.trunk().backward(base_.params(), bc, &d_out, nullptr, {}, &d_inject);
  std::vector<Mat> d_res(inject.size());
  for (std::size_t i = 1; i < inject.size(); ++i) {
    const auto& z = residual_.zero_layers_[i - 1];
    accumulate_linear_grad(z, residual_grad, d_inject[i], rc.block_out[i]);
    d_res[i].noalias() = weight(z, rparams).transpose() * d_inject[i];
  }
  residual_.trunk().backward(rparams, rc, nullptr, &d_res, residual_grad, nullptr);
  return std::move(bc.output);
}

Vec forward_base(const PolicyNet& net, const Vec& x_t, std::span<const Vec> y_prior, int t) {
  if (y_prior.size() < net.config().cond_specs.size()) throw ArgumentError("missing prioritized modality");
  CondBatch cond;
  for (std::size_t m = 0; m < net.config().cond_specs.size(); ++m) cond.modalities.emplace_back(y_prior[m]);
  const int steps[1] = {t};
  return net.predict(Mat(x_t), steps, cond).col(0);
}

Vec forward_composed(const ComposedPolicy& policy, const Vec& x_t, const ObservationBundle& y, int t) {
  if (static_cast<std::size_t>(y.num_modalities()) < policy.residual().config().cond_specs.size() ||
      y.values.size() != y.specs.size()) {
    throw ArgumentError("composed forward needs every modality");
  }
  const int steps[1] = {t};
  return policy.predict(Mat(x_t), steps, make_cond_batch(y)).col(0);
}

std::vector<Vec> null_tokens_of(const PolicyNet& net) {
  std::vector<Vec> out;
  const auto& cfg = net.config();
  const auto& tokens = net.trunk().null_tokens();
  for (std::size_t m = 0; m < cfg.cond_specs.size(); ++m) {
    if (tokens[m] == kNoToken) {
      out.emplace_back();
    } else {
      const int n = cfg.cond_specs[m].dim * cfg.obs_horizon;
      out.emplace_back(CVMap(net.params().data() + tokens[m], n));
    }
  }
  return out;
}

ObservationBundle drop_modality(const ObservationBundle& y, std::span<const int> indices,
                                const std::vector<Vec>& null_tokens, bool guidance_mode) {
  ObservationBundle out = y;
  for (int idx : indices) {
    if (idx < 0 || idx >= y.num_modalities()) throw ArgumentError("modality index out of range");
    if (guidance_mode && idx < y.priority_k) {
      throw ArgumentError("cannot drop a prioritized modality in guidance mode");
    }
    const auto si = static_cast<std::size_t>(idx);
    if (si < null_tokens.size() && null_tokens[si].size() > 0) {
      if (null_tokens[si].size() != out.values[si].size()) throw ArgumentError("null token size mismatch");
      out.values[si] = null_tokens[si];
    } else {
      out.values[si].setZero();
    }
  }
  return out;
}

std::uint64_t parameter_checksum(std::span<const double> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double d : params) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    h = mix64(h ^ bits);
  }
  return h;
}

}  // namespace fdp
