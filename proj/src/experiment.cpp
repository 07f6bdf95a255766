#include "fdp/experiment.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "fdp/checkpoint.hpp"
#include "fdp/errors.hpp"

namespace fdp {

namespace {

template <class T>
std::vector<T> list_or(const nlohmann::json& j, const char* key, std::vector<T> fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<std::vector<T>>();
}

TrainingConfig merged_training(const TrainingConfig& base, const nlohmann::json& overrides) {
  nlohmann::json merged = to_json(base);
  merged.update(overrides);
  return training_config_from_json(merged);
}

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, const std::string& salt) {
  std::uint64_t h = mix64(a ^ mix64(b + 0x9E3779B97F4A7C15ULL));
  for (char ch : salt) h = mix64(h ^ static_cast<unsigned char>(ch));
  return h;
}

EnvConfig cell_env(const ExperimentConfig& c, const std::string& scale, const std::string& perturbation) {
  EnvConfig env = c.env;
  env.scale = parse_arena_scale(scale);
  env.perturbation.kind = parse_perturbation_kind(perturbation);
  return env;
}

std::string model_key(const ExperimentConfig& c, const DemoDataset& data, const std::string& scale, int demos,
                      std::uint64_t seed, const std::string& priority, const std::string& role) {
  nlohmann::json j = {{"scale", scale},
                      {"demos", demos},
                      {"seed", seed},
                      {"priority", priority},
                      {"role", role},
                      {"data", data.provenance.content_hash},
                      {"training", to_json(role.rfind("residual", 0) == 0 ? c.residual_config() : c.training)},
                      {"base_training", to_json(c.training)},
                      {"hidden", c.hidden},
                      {"blocks", c.blocks},
                      {"diffusion_steps", c.diffusion_steps},
                      {"schedule", to_string(c.schedule)},
                      {"version", FDP_VERSION}};
  return role + "_" + content_hash(j.dump());
}

void write_log(const std::filesystem::path& path, const std::vector<LossReport>& reports) {
  std::string text;
  for (const auto& r : reports) text += to_jsonl(r) + "\n";
  write_text_atomic(path, text);
}

}  // namespace

void ExperimentConfig::validate() const {
  env.validate();
  training.validate();
  if (residual_training) residual_training->validate();
  if (methods.empty() || seeds.empty() || demos.empty() || scales.empty() || perturbations.empty() ||
      priorities.empty()) {
    throw ConfigError("methods, seeds, demos, scales, perturbations and priorities must be nonempty");
  }
  for (const auto& m : methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) throw ConfigError("unknown method: " + m);
  }
  for (const auto& p : priorities) {
    if (std::find(kPriorities.begin(), kPriorities.end(), p) == kPriorities.end()) {
      throw ConfigError("priority order must name env modalities: " + p);
    }
  }
  for (const auto& s : scales) parse_arena_scale(s);
  for (const auto& p : perturbations) parse_perturbation_kind(p);
  for (int d : demos) {
    if (d < 1) throw ConfigError("demo counts must be positive");
  }
  if (episodes < 1 || hidden < 1 || blocks < 1) throw ConfigError("episodes, hidden and blocks must be positive");
  if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be positive");
  try {
    sampler.validate(build_schedule(schedule, diffusion_steps));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json env = to_json(c.env);
  env.erase("scale");
  env.erase("perturbation");
  env["scales"] = c.scales;
  env["perturbations"] = c.perturbations;
  nlohmann::json j = {{"env", env},
                      {"demos", c.demos},
                      {"methods", c.methods},
                      {"priorities", c.priorities},
                      {"seeds", c.seeds},
                      {"training", to_json(c.training)},
                      {"sampler", to_json(c.sampler)},
                      {"net", {{"hidden", c.hidden}, {"blocks", c.blocks}}},
                      {"episodes", c.episodes},
                      {"diffusion_steps", c.diffusion_steps},
                      {"schedule", to_string(c.schedule)}};
  if (c.residual_training) j["residual_training"] = to_json(*c.residual_training);
  return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    const nlohmann::json env = j.value("env", nlohmann::json::object());
    nlohmann::json env_base = env;
    env_base.erase("scales");
    env_base.erase("perturbations");
    if (env.contains("scale")) c.scales = {env.at("scale").get<std::string>()};
    c.env = env_config_from_json(env_base);
    c.scales = list_or(env, "scales", c.scales);
    c.perturbations = list_or(env, "perturbations", c.perturbations);
    c.demos = list_or(j, "demos", c.demos);
    c.methods = list_or(j, "methods", c.methods);
    c.priorities = list_or(j, "priorities", c.priorities);
    if (j.contains("priority")) c.priorities = {j.at("priority").get<std::string>()};
    c.seeds = list_or(j, "seeds", c.seeds);
    if (j.contains("training")) c.training = merged_training(c.training, j.at("training"));
    if (j.contains("residual_training")) c.residual_training = merged_training(c.training, j.at("residual_training"));
    if (j.contains("sampler")) {
      nlohmann::json sampler = j.at("sampler");
      if (!sampler.contains("clip_sample")) sampler["clip_sample"] = c.sampler.clip_sample;
      c.sampler = sampler_config_from_json(sampler);
    }
    if (j.contains("net")) {
      c.hidden = j.at("net").value("hidden", c.hidden);
      c.blocks = j.at("net").value("blocks", c.blocks);
    }
    c.episodes = j.value("episodes", c.episodes);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    if (j.contains("schedule")) c.schedule = parse_schedule_kind(j.at("schedule").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string experiment_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  for (const char* k : {"demos", "methods", "priorities", "seeds"}) j.erase(k);
  j["env"].erase("scales");
  j["env"].erase("perturbations");
  return content_hash(j.dump());
}

std::filesystem::path ArtifactPaths::dataset(const std::string& scale, int demos, std::uint64_t seed) const {
  return root / "data" / (scale + "_" + std::to_string(demos) + "demos_seed" + std::to_string(seed) + ".fdpd");
}
std::filesystem::path ArtifactPaths::model(const std::string& key) const { return root / "models" / (key + ".fdpc"); }
std::filesystem::path ArtifactPaths::log(const std::string& key) const { return root / "logs" / (key + ".jsonl"); }
std::filesystem::path ArtifactPaths::cell(const std::string& key) const { return root / "cells" / (key + ".json"); }

std::vector<std::string> roles_for_method(const std::string& method) {
  if (method == "joint") return {"joint"};
  if (method == "base_only") return {"base"};
  if (method == "fdp_output") return {"base", "residual_output"};
  if (method == "fdp_blockwise") return {"base", "residual_blockwise"};
  if (method == "poco") return {"base", "joint"};
  if (method == "cfg") return {"cfg"};
  throw ConfigError("unknown method: " + method);
}

NetConfig toy_net_config(const ExperimentConfig& c, const std::vector<ModalitySpec>& specs, bool nullable_tail) {
  NetConfig n;
  n.action_dim = kActionDim * c.env.action_horizon;
  n.hidden = c.hidden;
  n.blocks = c.blocks;
  n.obs_horizon = c.env.obs_horizon;
  n.cond_specs = specs;
  if (nullable_tail) {
    n.nullable.assign(specs.size(), false);
    for (std::size_t m = 1; m < specs.size(); ++m) n.nullable[m] = true;
  }
  return n;
}

DemoDataset prepare_dataset(const ExperimentConfig& c, const ArtifactPaths& paths, const std::string& scale,
                            int demos, std::uint64_t seed, bool generate) {
  const auto path = paths.dataset(scale, demos, seed);
  const EnvConfig env = cell_env(c, scale, "none");
  if (std::filesystem::exists(path)) {
    try {
      DemoDataset d = load_dataset(path);
      if (d.provenance.env_hash == env_config_hash(env) && d.provenance.count == demos &&
          d.provenance.expert_seed == seed) {
        return d;
      }
      if (!generate) throw DependencyError("dataset " + path.string() + " was generated for another config");
    } catch (const FormatError&) {
      if (!generate) throw;
    } catch (const CorruptionError&) {
      if (!generate) throw;
    }
  } else if (!generate) {
    throw DependencyError("missing dataset " + path.string() + " (run gen-data first)");
  }
  DemoDataset d = generate_demos(env, demos, seed);
  save_dataset(path, d);
  return d;
}

ModelBundle prepare_models(const ExperimentConfig& c, const ArtifactPaths& paths, const DemoDataset& data,
                           const std::string& scale, int demos, std::uint64_t seed, const std::string& priority,
                           const std::vector<std::string>& roles, bool train) {
  const NoiseSchedule schedule = build_schedule(c.schedule, c.diffusion_steps);
  std::optional<TrainingSet> set;
  auto training_set = [&]() -> const TrainingSet& {
    if (!set) set = make_training_set(data, priority);
    return *set;
  };
  const auto specs = toy_modality_specs(c.env, priority);
  const std::vector<ModalitySpec> prior(specs.begin(), specs.begin() + 1);
  ModelBundle out;

  auto policy_role = [&](const std::string& role, const std::vector<ModalitySpec>& net_specs, bool nullable,
                         LossKind kind) {
    const std::string key = model_key(c, data, scale, demos, seed, priority, role);
    const auto path = paths.model(key);
    if (std::filesystem::exists(path)) {
      try {
        return load_policy(path);
      } catch (const std::runtime_error&) {
        if (!train) throw;
      }
    } else if (!train) {
      throw DependencyError("missing checkpoint " + path.string() + " (run train first)");
    }
    PolicyNet net(toy_net_config(c, net_specs, nullable), derive_seed(seed, c.training.seed, role + "/init"));
    TrainingConfig tc = c.training;
    tc.seed = derive_seed(seed, c.training.seed, role + "/train");
    const TrainResult r = train_policy(net, training_set(), tc, kind, schedule);
    write_log(paths.log(key), r.reports);
    save_checkpoint(path, net, {role, experiment_hash(c), FDP_VERSION, r.best_epoch});
    return net;
  };

  std::set<std::string> want(roles.begin(), roles.end());
  const bool need_base = want.count("base") || want.count("residual_output") || want.count("residual_blockwise");
  if (want.count("joint")) out.joint = policy_role("joint", specs, false, LossKind::joint);
  if (need_base) out.base = policy_role("base", prior, false, LossKind::base);
  if (want.count("cfg")) out.cfg = policy_role("cfg", specs, true, LossKind::cfg);
  for (const auto mode : {ComposeMode::output_compose, ComposeMode::blockwise_compose}) {
    const std::string role = mode == ComposeMode::output_compose ? "residual_output" : "residual_blockwise";
    if (!want.count(role)) continue;
    const std::string key = model_key(c, data, scale, demos, seed, priority, role);
    const auto path = paths.model(key);
    std::optional<ComposedPolicy> composed;
    if (std::filesystem::exists(path)) {
      try {
        composed = ComposedPolicy(*out.base, load_residual(path), true);
      } catch (const std::runtime_error&) {
        if (!train) throw;
      }
    } else if (!train) {
      throw DependencyError("missing checkpoint " + path.string() + " (run train first)");
    }
    if (!composed) {
      ResidualNet res(toy_net_config(c, specs, false), mode, derive_seed(seed, c.training.seed, role + "/init"));
      composed = ComposedPolicy(*out.base, std::move(res), true);
      TrainingConfig tc = c.residual_config();
      tc.seed = derive_seed(seed, c.training.seed, role + "/train");
      const TrainResult r = train_residual(*composed, training_set(), tc, schedule);
      write_log(paths.log(key), r.reports);
      save_checkpoint(path, composed->residual(), {role, experiment_hash(c), FDP_VERSION, r.best_epoch});
    }
    (mode == ComposeMode::output_compose ? out.fdp_output : out.fdp_blockwise) = std::move(composed);
  }
  return out;
}

ChunkPolicy diffusion_chunk_policy(const ModelBundle& models, const DemoDataset& stats, const std::string& method,
                                   const std::string& priority, const SamplerConfig& sampler,
                                   const NoiseSchedule& schedule) {
  PolicySet set;
  set.priority_k = 1;
  SamplerConfig sc = sampler;
  auto need = [&](bool ok) {
    if (!ok) throw ArgumentError("models for method '" + method + "' are not loaded");
  };
  if (method == "joint") {
    need(models.joint.has_value());
    set.joint = &*models.joint;
    sc.composition = Composition::joint;
  } else if (method == "base_only") {
    need(models.base.has_value());
    set.base = &*models.base;
    sc.composition = Composition::base;
  } else if (method == "fdp_output") {
    need(models.fdp_output.has_value());
    set.fdp = &*models.fdp_output;
    sc.composition = Composition::fdp_output;
  } else if (method == "fdp_blockwise") {
    need(models.fdp_blockwise.has_value());
    set.fdp = &*models.fdp_blockwise;
    sc.composition = Composition::fdp_blockwise;
  } else if (method == "poco") {
    need(models.base.has_value() && models.joint.has_value());
    set.base = &*models.base;
    set.independent = &*models.joint;
    sc.composition = Composition::poco;
  } else if (method == "cfg") {
    need(models.cfg.has_value());
    set.cfg = &*models.cfg;
    sc.composition = Composition::cfg;
  } else {
    throw ConfigError("unknown method: " + method);
  }
  const int horizon = stats.action_horizon;
  return [set, sc, &stats, priority, schedule, horizon](std::span<const RolloutView> views) {
    const auto b = static_cast<Eigen::Index>(views.size());
    CondBatch cond;
    std::vector<CounterRng> rngs;
    for (Eigen::Index j = 0; j < b; ++j) {
      const auto& v = views[static_cast<std::size_t>(j)];
      const auto enc = encode_history(stats, *v.history, priority);
      if (cond.modalities.empty()) {
        for (const auto& e : enc) cond.modalities.emplace_back(e.size(), b);
      }
      for (std::size_t m = 0; m < enc.size(); ++m) cond.modalities[m].col(j) = enc[m];
      rngs.push_back(*v.rng);
    }
    const Mat actions =
        sample_action(set, cond, sc, schedule, kActionDim * horizon, rngs, nullptr, &stats.action_stats);
    std::vector<std::vector<Action>> out(views.size());
    for (Eigen::Index j = 0; j < b; ++j) {
      *views[static_cast<std::size_t>(j)].rng = rngs[static_cast<std::size_t>(j)];
      for (int s = 0; s < horizon; ++s) {
        out[static_cast<std::size_t>(j)].push_back(
            {actions(s * kActionDim, j), actions(s * kActionDim + 1, j), actions(s * kActionDim + 2, j)});
      }
    }
    return out;
  };
}

std::string cell_hash(const ExperimentConfig& c, const CellKey& k) {
  nlohmann::json j = {{"config", experiment_hash(c)}, {"method", k.method},           {"priority", k.priority},
                      {"demos", k.demos},             {"scale", k.scale},             {"perturbation", k.perturbation},
                      {"seed", k.seed},               {"version", FDP_VERSION}};
  return content_hash(j.dump());
}

ResultRow evaluate_cell(const ExperimentConfig& c, const ModelBundle& models, const DemoDataset& data,
                        const CellKey& k) {
  const NoiseSchedule schedule = build_schedule(c.schedule, c.diffusion_steps);
  const EnvConfig env = cell_env(c, k.scale, k.perturbation);
  const ChunkPolicy policy = diffusion_chunk_policy(models, data, k.method, k.priority, c.sampler, schedule);
  const RolloutResult r = rollout(policy, env, c.episodes, derive_seed(k.seed, 0, "eval"), false, c.episodes);
  ResultRow row;
  row.method = k.method;
  row.priority = k.priority;
  row.demos = k.demos;
  row.scale = k.scale;
  row.perturbation = k.perturbation;
  row.seed = k.seed;
  row.success_rate = r.success_rate;
  row.episodes = c.episodes;
  row.config_hash = experiment_hash(c);
  return row;
}

int worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FDP_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return static_cast<int>(std::max<std::size_t>(1, std::min<std::size_t>(n, jobs)));
}

namespace {

std::optional<ResultRow> load_cell(const std::filesystem::path& path, const std::string& hash) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const Bytes b = read_file(path);
    const auto j = nlohmann::json::parse(std::string(b.begin(), b.end()));
    if (j.at("hash").get<std::string>() != hash) return std::nullopt;
    const auto rows = results_from_csv(j.at("csv").get<std::string>());
    if (rows.size() != 1) return std::nullopt;
    return rows.front();
  } catch (const std::exception&) {
    return std::nullopt;  // partial or corrupt: rerun
  }
}

void store_cell(const std::filesystem::path& path, const std::string& hash, const ResultRow& row) {
  const nlohmann::json j = {{"hash", hash}, {"csv", results_to_csv({row})}};
  write_text_atomic(path, j.dump() + "\n");
}

struct Unit {
  std::string scale;
  int demos;
  std::uint64_t seed;
};

}  // namespace

std::vector<ResultRow> run_stage(const ExperimentConfig& c, const std::filesystem::path& out, Stage stage) {
  c.validate();
  const ArtifactPaths paths{out};
  for (const char* d : {"data", "models", "logs", "cells"}) std::filesystem::create_directories(out / d);
  write_text_atomic(out / "config.json", to_json(c).dump(2) + "\n");

  std::vector<Unit> units;
  for (const auto& s : c.scales) {
    for (int d : c.demos) {
      for (auto seed : c.seeds) units.push_back({s, d, seed});
    }
  }
  std::vector<std::vector<ResultRow>> unit_rows(units.size());
  std::vector<std::exception_ptr> errors(units.size());
  std::atomic<std::size_t> next{0};

  auto work = [&](const Unit& u) -> std::vector<ResultRow> {
    const bool generate = stage == Stage::gen_data || stage == Stage::sweep;
    const DemoDataset data = prepare_dataset(c, paths, u.scale, u.demos, u.seed, generate);
    if (stage == Stage::gen_data) return {};
    std::vector<ResultRow> rows;
    for (const auto& priority : c.priorities) {
      std::vector<std::string> roles;
      for (const auto& m : c.methods) {
        for (const auto& r : roles_for_method(m)) roles.push_back(r);
      }
      std::optional<ModelBundle> models;
      auto ensure_models = [&] {
        if (!models) {
          models = prepare_models(c, paths, data, u.scale, u.demos, u.seed, priority, roles, stage != Stage::eval);
        }
      };
      if (stage == Stage::train) {
        ensure_models();
        continue;
      }
      for (const auto& method : c.methods) {
        for (const auto& pert : c.perturbations) {
          const CellKey key{method, priority, u.demos, u.scale, pert, u.seed};
          const std::string hash = cell_hash(c, key);
          const auto path = paths.cell(hash);
          if (stage == Stage::sweep) {
            if (auto cached = load_cell(path, hash)) {
              rows.push_back(*cached);
              continue;
            }
          }
          ensure_models();
          const ResultRow row = evaluate_cell(c, *models, data, key);
          store_cell(path, hash, row);
          rows.push_back(row);
        }
      }
    }
    return rows;
  };

  const int workers = worker_count(units.size());
  auto loop = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= units.size()) return;
      try {
        unit_rows[i] = work(units[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(loop);
  loop();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<ResultRow> rows;
  for (auto& r : unit_rows) rows.insert(rows.end(), r.begin(), r.end());
  if (stage == Stage::eval || stage == Stage::sweep) save_results(paths.results_csv(), rows);
  return rows;
}

FinetuneOutcome run_finetune(const ExperimentConfig& c, const std::filesystem::path& out, const std::string& scale,
                             int demos, std::uint64_t seed, const std::string& priority, const std::string& method,
                             int ood_demos, const TrainingConfig& finetune_config) {
  if (method != "fdp_output" && method != "fdp_blockwise") {
    throw ConfigError("fine-tuning applies to fdp_output or fdp_blockwise");
  }
  const ArtifactPaths paths{out};
  for (const char* d : {"data", "models", "logs", "cells"}) std::filesystem::create_directories(out / d);
  const DemoDataset data = prepare_dataset(c, paths, scale, demos, seed, true);
  ModelBundle models = prepare_models(c, paths, data, scale, demos, seed, priority, roles_for_method(method), true);
  const NoiseSchedule schedule = build_schedule(c.schedule, c.diffusion_steps);
  const CellKey key{method, priority, demos, scale, "distractor", seed};

  FinetuneOutcome outcome;
  auto& composed = method == "fdp_output" ? *models.fdp_output : *models.fdp_blockwise;
  outcome.base_checksum_before = parameter_checksum(composed.base().params());
  outcome.before = evaluate_cell(c, models, data, key).success_rate;

  DemoDataset ood = data;
  const DemoDataset fresh = generate_demos(cell_env(c, scale, "distractor"), ood_demos, derive_seed(seed, 0, "ood"));
  ood.episodes = fresh.episodes;
  const TrainingSet set = make_training_set(ood, priority);
  TrainingConfig tc = finetune_config;
  tc.seed = derive_seed(seed, finetune_config.seed, "finetune");
  finetune_residual(composed, set, tc, schedule);

  outcome.base_checksum_after = parameter_checksum(composed.base().params());
  outcome.after = evaluate_cell(c, models, data, key).success_rate;
  return outcome;
}

}  // namespace fdp
