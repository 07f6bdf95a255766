#include "fdp/sampling.hpp"

#include <cmath>

#include "fdp/errors.hpp"

namespace fdp {

std::string to_string(SamplerMethod m) { return m == SamplerMethod::ddpm ? "ddpm" : "ddim"; }

std::string to_string(Composition c) {
  switch (c) {
    case Composition::joint: return "joint";
    case Composition::fdp_output: return "fdp_output";
    case Composition::fdp_blockwise: return "fdp_blockwise";
    case Composition::poco: return "poco";
    case Composition::cfg: return "cfg";
    case Composition::base: return "base";
  }
  return "joint";
}

SamplerMethod parse_sampler_method(const std::string& name) {
  if (name == "ddpm") return SamplerMethod::ddpm;
  if (name == "ddim") return SamplerMethod::ddim;
  throw ConfigError("unknown sampler: " + name);
}

Composition parse_composition(const std::string& name) {
  for (auto c : {Composition::joint, Composition::fdp_output, Composition::fdp_blockwise, Composition::poco,
                 Composition::cfg, Composition::base}) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown composition: " + name);
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (num_inference_steps < 1 || num_inference_steps > schedule.num_steps()) {
    throw ArgumentError("num_inference_steps must lie in [1, T]");
  }
  if (method == SamplerMethod::ddpm && num_inference_steps != schedule.num_steps()) {
    throw ArgumentError("ancestral sampling runs every step: num_inference_steps must equal T");
  }
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ArgumentError("eta must be finite and non-negative");
  if (!std::isfinite(poco_lambda) || !std::isfinite(cfg_lambda1) || !std::isfinite(cfg_lambda2)) {
    throw ArgumentError("composition weights must be finite");
  }
  if (!(clip_sample >= 0.0) || !std::isfinite(clip_sample)) throw ArgumentError("clip_sample must be >= 0");
}

nlohmann::json to_json(const SamplerConfig& c) {
  return {{"method", to_string(c.method)},       {"num_inference_steps", c.num_inference_steps},
          {"eta", c.eta},                        {"composition", to_string(c.composition)},
          {"poco_lambda", c.poco_lambda},        {"cfg_lambda1", c.cfg_lambda1},
          {"cfg_lambda2", c.cfg_lambda2},        {"cfg_normalized", c.cfg_normalized},
          {"clip_sample", c.clip_sample},        {"seed", c.seed}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  try {
    c.method = parse_sampler_method(j.value("method", to_string(c.method)));
    c.num_inference_steps = j.value("num_inference_steps", c.method == SamplerMethod::ddpm ? 100 : 8);
    c.eta = j.value("eta", c.eta);
    c.composition = parse_composition(j.value("composition", to_string(c.composition)));
    c.poco_lambda = j.value("poco_lambda", c.poco_lambda);
    c.cfg_lambda1 = j.value("cfg_lambda1", c.cfg_lambda1);
    c.cfg_lambda2 = j.value("cfg_lambda2", c.cfg_lambda2);
    c.cfg_normalized = j.value("cfg_normalized", c.cfg_normalized);
    c.clip_sample = j.value("clip_sample", c.clip_sample);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sampler config: ") + e.what());
  }
  return c;
}

int eps_calls_per_step(Composition c) { return c == Composition::cfg ? 2 : 1; }

namespace {

template <class T>
const T& require(const T* p, const char* role) {
  if (p == nullptr) throw ArgumentError(std::string("composition needs a ") + role + " network");
  return *p;
}

}  // namespace

Mat compose_eps(const PolicySet& set, const Mat& x_t, int t, const CondBatch& cond, const SamplerConfig& config) {
  const std::vector<int> steps(static_cast<std::size_t>(x_t.cols()), t);
  CondBatch plain = cond;
  plain.dropped.clear();
  switch (config.composition) {
    case Composition::joint: return require(set.joint, "joint").predict(x_t, steps, plain);
    case Composition::base: return require(set.base, "base").predict(x_t, steps, plain);
    case Composition::fdp_output:
    case Composition::fdp_blockwise: {
      const auto& fdp = require(set.fdp, "composed");
      const auto want = config.composition == Composition::fdp_output ? ComposeMode::output_compose
                                                                       : ComposeMode::blockwise_compose;
      if (fdp.mode() != want) throw ArgumentError("composed policy mode does not match the composition");
      return fdp.predict(x_t, steps, plain);
    }
    case Composition::poco: {
      const Mat base = require(set.base, "base").predict(x_t, steps, plain);
      if (config.poco_lambda == 0.0) return base;
      return base + config.poco_lambda * require(set.independent, "independent").predict(x_t, steps, plain);
    }
    case Composition::cfg: {
      const auto& net = require(set.cfg, "guidance");
      double w1 = config.cfg_lambda1, w2 = config.cfg_lambda2;
      if (config.cfg_normalized) {
        const double s = w1 + w2;
        w1 /= s;
        w2 /= s;
      }
      const Mat full = net.predict(x_t, steps, plain);
      CondBatch nulled = plain;
      nulled.dropped.assign(plain.modalities.size(), {});
      for (std::size_t m = static_cast<std::size_t>(set.priority_k); m < plain.modalities.size(); ++m) {
        nulled.dropped[m].assign(static_cast<std::size_t>(x_t.cols()), 1);
      }
      const Mat weak = net.predict(x_t, steps, nulled);
      if (w2 == 0.0) return w1 == 1.0 ? full : Mat(w1 * full);
      return w1 * full + w2 * weak;
    }
  }
  throw ArgumentError("unknown composition");
}

Vec ddpm_update(const Vec& x_t, const Vec& eps, double alpha, double alpha_bar, double noise_std,
                const Vec& noise) {
  Vec mean = (x_t - ((1.0 - alpha) / std::sqrt(1.0 - alpha_bar)) * eps) / std::sqrt(alpha);
  if (noise_std > 0.0) mean += noise_std * noise;
  return mean;
}

Vec ddpm_step(const Vec& x_t, const Vec& eps, const NoiseSchedule& schedule, int t, CounterRng& rng) {
  schedule.check_step(t);
  if (x_t.size() != eps.size()) throw ArgumentError("x_t and eps differ in size");
  const bool last = t == 1;
  const Vec noise = last ? Vec::Zero(x_t.size()) : standard_normal(x_t.size(), rng);
  return ddpm_update(x_t, eps, schedule.alpha(t), schedule.alpha_bar(t), last ? 0.0 : std::sqrt(schedule.beta(t)),
                     noise);
}

Vec ddim_update(const Vec& x_t, const Vec& eps, double alpha_bar, double alpha_bar_prev, double eta,
                const Vec& noise) {
  const double sigma = eta * std::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)) *
                       std::sqrt(1.0 - alpha_bar / alpha_bar_prev);
  const double dir2 = 1.0 - alpha_bar_prev - sigma * sigma;
  if (dir2 < 0.0 || !std::isfinite(sigma)) {
    throw NumericError("DDIM noise level exceeds the available variance");
  }
  const Vec x0 = (x_t - std::sqrt(1.0 - alpha_bar) * eps) / std::sqrt(alpha_bar);
  Vec out = std::sqrt(alpha_bar_prev) * x0 + std::sqrt(dir2) * eps;
  if (sigma > 0.0) out += sigma * noise;
  return out;
}

Vec ddim_step(const Vec& x_t, const Vec& eps, const NoiseSchedule& schedule, int t, int t_prev, double eta,
              CounterRng& rng) {
  schedule.check_step(t);
  if (t_prev < 0 || t_prev >= t) throw ArgumentError("t_prev must lie in [0, t)");
  if (!(eta >= 0.0)) throw ArgumentError("eta must be non-negative");
  if (x_t.size() != eps.size()) throw ArgumentError("x_t and eps differ in size");
  const double ab_prev = t_prev == 0 ? 1.0 : schedule.alpha_bar(t_prev);
  const Vec noise = (eta > 0.0 && t_prev > 0) ? standard_normal(x_t.size(), rng) : Vec::Zero(x_t.size());
  return ddim_update(x_t, eps, schedule.alpha_bar(t), ab_prev, eta, noise);
}

std::vector<int> ddim_timesteps(int num_steps, int num_inference_steps) {
  if (num_inference_steps < 1 || num_inference_steps > num_steps) {
    throw ArgumentError("num_inference_steps must lie in [1, T]");
  }
  std::vector<int> out;
  if (num_inference_steps == 1) return {num_steps};
  for (int i = 0; i < num_inference_steps; ++i) {
    const double v = num_steps - static_cast<double>(i) * (num_steps - 1) / (num_inference_steps - 1);
    out.push_back(static_cast<int>(std::lround(v)));
  }
  return out;
}

Mat sample_with_eps(const BatchEpsFn& eps_fn, const SamplerConfig& config, const NoiseSchedule& schedule,
                    int action_dim, std::span<CounterRng> rngs, SampleTrace* trace, int calls_per_step) {
  config.validate(schedule);
  const auto batch = static_cast<Eigen::Index>(rngs.size());
  if (batch == 0) throw ArgumentError("sampling needs at least one rng");
  Mat x(action_dim, batch);
  for (Eigen::Index b = 0; b < batch; ++b) x.col(b) = standard_normal(action_dim, rngs[static_cast<std::size_t>(b)]);

  const std::vector<int> steps = config.method == SamplerMethod::ddpm
                                     ? ddim_timesteps(schedule.num_steps(), schedule.num_steps())
                                     : ddim_timesteps(schedule.num_steps(), config.num_inference_steps);
  if (trace != nullptr) {
    trace->states.assign(1, x);
    trace->steps.assign(1, steps.front());
    trace->eps_calls = 0;
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    Mat eps = eps_fn(x, t);
    if (config.clip_sample > 0.0) {
      const double ab = schedule.alpha_bar(t);
      const Mat x0 = ((x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).cwiseMax(-config.clip_sample).cwiseMin(config.clip_sample);
      eps = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    for (Eigen::Index b = 0; b < batch; ++b) {
      auto& rng = rngs[static_cast<std::size_t>(b)];
      const Vec xb = x.col(b);
      const Vec eb = eps.col(b);
      x.col(b) = config.method == SamplerMethod::ddpm ? ddpm_step(xb, eb, schedule, t, rng)
                                                      : ddim_step(xb, eb, schedule, t, t_prev, config.eta, rng);
    }
    if (trace != nullptr) {
      trace->states.push_back(x);
      trace->steps.push_back(t_prev);
      trace->eps_calls += calls_per_step;
    }
  }
  return x;
}

Mat sample_action(const PolicySet& set, const CondBatch& cond, const SamplerConfig& config,
                  const NoiseSchedule& schedule, int action_dim, std::span<CounterRng> rngs, SampleTrace* trace,
                  const ActionNormalizer* normalizer) {
  if (!cond.modalities.empty() && cond.batch_size() != static_cast<Eigen::Index>(rngs.size())) {
    throw ArgumentError("one rng per conditioning column required");
  }
  const Mat x = sample_with_eps([&](const Mat& x_t, int t) { return compose_eps(set, x_t, t, cond, config); },
                               config, schedule, action_dim, rngs, trace, eps_calls_per_step(config.composition));
  return normalizer != nullptr ? normalizer->denormalize(x) : x;
}

Vec sample_action(const PolicySet& set, const ObservationBundle& y, const SamplerConfig& config,
                  const NoiseSchedule& schedule, int action_dim, SampleTrace* trace,
                  const ActionNormalizer* normalizer) {
  CounterRng rng(config.seed);
  return sample_action(set, make_cond_batch(y), config, schedule, action_dim, std::span<CounterRng>(&rng, 1), trace,
                       normalizer)
      .col(0);
}

Bytes encode_trace(const SampleTrace& trace) {
  ByteWriter w;
  w.u64(trace.states.size());
  w.u32(static_cast<std::uint32_t>(trace.eps_calls));
  const auto rows = trace.states.empty() ? 0 : trace.states.front().rows();
  const auto cols = trace.states.empty() ? 0 : trace.states.front().cols();
  w.u64(static_cast<std::uint64_t>(rows));
  w.u64(static_cast<std::uint64_t>(cols));
  for (std::size_t i = 0; i < trace.states.size(); ++i) {
    w.i64(trace.steps[i]);
    w.f64s(std::span<const double>(trace.states[i].data(), static_cast<std::size_t>(rows * cols)));
  }
  return frame_container(kTraceMagic, kTraceVersion, w.bytes());
}

SampleTrace decode_trace(std::span<const std::uint8_t> bytes) {
  const Bytes payload = unframe_container(bytes, kTraceMagic, kTraceVersion);
  ByteReader r(payload);
  SampleTrace t;
  const auto n = r.u64();
  t.eps_calls = static_cast<int>(r.u32());
  const auto rows = static_cast<Eigen::Index>(r.u64());
  const auto cols = static_cast<Eigen::Index>(r.u64());
  if (rows * cols != 0 && n > r.remaining() / static_cast<std::size_t>(8 * rows * cols)) {
    throw CorruptionError("trace length exceeds payload");
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    t.steps.push_back(static_cast<int>(r.i64()));
    Mat m(rows, cols);
    r.f64s(std::span<double>(m.data(), static_cast<std::size_t>(rows * cols)));
    t.states.push_back(std::move(m));
  }
  r.expect_end();
  return t;
}

void dump_trace(const std::filesystem::path& path, const SampleTrace& trace) {
  write_file_atomic(path, encode_trace(trace));
}

nlohmann::json trace_summary(const SampleTrace& trace) {
  nlohmann::json final = nlohmann::json::array();
  if (!trace.states.empty()) {
    const Mat& x = trace.states.back();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      std::vector<double> col(x.col(j).data(), x.col(j).data() + x.rows());
      final.push_back(col);
    }
  }
  return {{"final", final},
          {"steps", trace.states.empty() ? 0 : static_cast<int>(trace.states.size()) - 1},
          {"eps_calls", trace.eps_calls}};
}

}  // namespace fdp
