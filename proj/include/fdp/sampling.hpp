#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdp/diffusion.hpp"
#include "fdp/normalization.hpp"
#include "fdp/policy_nets.hpp"

namespace fdp {

enum class SamplerMethod { ddpm, ddim };
/// `base` samples the prioritized-only base model alone.
enum class Composition { joint, fdp_output, fdp_blockwise, poco, cfg, base };

std::string to_string(SamplerMethod m);
std::string to_string(Composition c);
SamplerMethod parse_sampler_method(const std::string& name);
Composition parse_composition(const std::string& name);

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::ddim;
  int num_inference_steps = 8;
  double eta = 0.0;
  Composition composition = Composition::fdp_blockwise;
  double poco_lambda = 0.1;
  double cfg_lambda1 = 1.1;
  double cfg_lambda2 = 0.1;
  /// Divides the guidance weights by their sum.
  bool cfg_normalized = false;
  /// When positive, the x0 estimate is clamped to [-c, c] before each update.
  double clip_sample = 0.0;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& schedule) const;
};

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// Networks available to the sampler; which ones are required depends on the
/// composition. `fdp` carries the base for fdp_* compositions; `base` serves
/// poco and base-only sampling; `independent` is poco's separately trained model.
struct PolicySet {
  const PolicyNet* joint = nullptr;
  const PolicyNet* base = nullptr;
  const ComposedPolicy* fdp = nullptr;
  const PolicyNet* independent = nullptr;
  const PolicyNet* cfg = nullptr;
  int priority_k = 1;
};

/// Noise prediction for a batch sharing step t.
Mat compose_eps(const PolicySet& set, const Mat& x_t, int t, const CondBatch& cond, const SamplerConfig& config);

/// Network evaluations per compose_eps call.
int eps_calls_per_step(Composition c);

/// x_{t-1} mean (x - (1 - alpha) / sqrt(1 - alpha_bar) * eps) / sqrt(alpha) plus
/// noise_std * noise.
Vec ddpm_update(const Vec& x_t, const Vec& eps, double alpha, double alpha_bar, double noise_std,
                const Vec& noise);
/// Ancestral step: noise std sqrt(beta_t) for t > 1, none at t = 1.
Vec ddpm_step(const Vec& x_t, const Vec& eps, const NoiseSchedule& schedule, int t, CounterRng& rng);

/// Jump from alpha_bar_t to alpha_bar_prev through the x0 estimate. Throws
/// NumericError when sigma^2 exceeds 1 - alpha_bar_prev.
Vec ddim_update(const Vec& x_t, const Vec& eps, double alpha_bar, double alpha_bar_prev, double eta,
                const Vec& noise);
/// t_prev = 0 denotes the clean end point (alpha_bar = 1).
Vec ddim_step(const Vec& x_t, const Vec& eps, const NoiseSchedule& schedule, int t, int t_prev, double eta,
              CounterRng& rng);

/// Evenly spaced steps from T down to 1, endpoints included.
std::vector<int> ddim_timesteps(int num_steps, int num_inference_steps);

struct SampleTrace {
  std::vector<Mat> states;  // x_T .. x_0, each D x B
  std::vector<int> steps;   // t of each state (0 for the final)
  int eps_calls = 0;
};

/// Batched noise prediction at step t.
using BatchEpsFn = std::function<Mat(const Mat& x_t, int t)>;

/// The reverse chain over any noise predictor; column b draws from `rngs[b]`.
Mat sample_with_eps(const BatchEpsFn& eps_fn, const SamplerConfig& config, const NoiseSchedule& schedule,
                    int action_dim, std::span<CounterRng> rngs, SampleTrace* trace = nullptr,
                    int calls_per_step = 1);

/// Reverse diffusion for a batch; column b draws from `rngs[b]`. Returns
/// normalized samples, denormalized when `normalizer` is given.
Mat sample_action(const PolicySet& set, const CondBatch& cond, const SamplerConfig& config,
                  const NoiseSchedule& schedule, int action_dim, std::span<CounterRng> rngs,
                  SampleTrace* trace = nullptr, const ActionNormalizer* normalizer = nullptr);

/// Single-bundle convenience with rng seeded from config.seed.
Vec sample_action(const PolicySet& set, const ObservationBundle& y, const SamplerConfig& config,
                  const NoiseSchedule& schedule, int action_dim, SampleTrace* trace = nullptr,
                  const ActionNormalizer* normalizer = nullptr);

inline constexpr std::uint32_t kTraceVersion = 1;
Bytes encode_trace(const SampleTrace& trace);
SampleTrace decode_trace(std::span<const std::uint8_t> bytes);
void dump_trace(const std::filesystem::path& path, const SampleTrace& trace);
nlohmann::json trace_summary(const SampleTrace& trace);

}  // namespace fdp
