#include "fdp/datastore.hpp"

#include <charconv>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

void write_vec(ByteWriter& w, const Vec& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  w.f64s(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

Vec read_vec(ByteReader& r) {
  const auto n = r.u32();
  if (n > r.remaining() / 8) throw CorruptionError("vector length exceeds payload");
  Vec v(n);
  r.f64s(std::span<double>(v.data(), n));
  return v;
}

void write_body(ByteWriter& w, const DemoDataset& d) {
  w.u32(static_cast<std::uint32_t>(d.obs_horizon));
  w.u32(static_cast<std::uint32_t>(d.action_horizon));
  w.u32(static_cast<std::uint32_t>(d.specs.size()));
  for (const auto& s : d.specs) {
    w.str(s.name);
    w.u32(static_cast<std::uint32_t>(s.dim));
    w.str(to_string(s.kind));
  }
  d.action_stats.write(w);
  d.obs_stats.write(w);
  w.u64(d.episodes.size());
  for (const auto& e : d.episodes) {
    w.u64(e.seed);
    w.str(e.perturbation);
    w.u8(e.success ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.steps));
    w.u32(static_cast<std::uint32_t>(e.actions.size()));
    for (std::size_t i = 0; i < e.actions.size(); ++i) {
      write_vec(w, e.proprio[i]);
      write_vec(w, e.vision[i]);
      w.f64s(e.actions[i]);
    }
  }
}

void read_body(ByteReader& r, DemoDataset& d) {
  d.obs_horizon = static_cast<int>(r.u32());
  d.action_horizon = static_cast<int>(r.u32());
  const auto n_specs = r.u32();
  if (n_specs > 64) throw CorruptionError("implausible modality count");
  for (std::uint32_t m = 0; m < n_specs; ++m) {
    ModalitySpec s;
    s.name = r.str();
    s.dim = static_cast<int>(r.u32());
    s.kind = parse_modality_kind(r.str());
    d.specs.push_back(s);
  }
  d.action_stats = ActionNormalizer::read(r);
  d.obs_stats = ObsNormalizer::read(r);
  const auto n_eps = r.u64();
  if (n_eps > r.remaining()) throw CorruptionError("episode count exceeds payload");
  for (std::uint64_t i = 0; i < n_eps; ++i) {
    EpisodeRecord e;
    e.seed = r.u64();
    e.perturbation = r.str();
    e.success = r.u8() != 0;
    e.steps = static_cast<int>(r.u32());
    const auto n = r.u32();
    if (n > r.remaining()) throw CorruptionError("step count exceeds payload");
    for (std::uint32_t s = 0; s < n; ++s) {
      e.proprio.push_back(read_vec(r));
      e.vision.push_back(read_vec(r));
      Action a{};
      r.f64s(a);
      e.actions.push_back(a);
    }
    d.episodes.push_back(std::move(e));
  }
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string format_rate(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string env_config_hash(const EnvConfig& config) { return content_hash(to_json(config).dump()); }

void fit_statistics(DemoDataset& d) {
  std::size_t total = 0;
  for (const auto& e : d.episodes) total += e.actions.size();
  if (total == 0) throw ArgumentError("dataset has no steps");
  Mat actions(kActionDim, static_cast<Eigen::Index>(total));
  std::vector<Mat> obs = {Mat(d.specs[0].dim, static_cast<Eigen::Index>(total)),
                          Mat(d.specs[1].dim, static_cast<Eigen::Index>(total))};
  Eigen::Index col = 0;
  for (const auto& e : d.episodes) {
    for (std::size_t i = 0; i < e.actions.size(); ++i, ++col) {
      for (int k = 0; k < kActionDim; ++k) actions(k, col) = e.actions[i][static_cast<std::size_t>(k)];
      obs[0].col(col) = e.proprio[i];
      obs[1].col(col) = e.vision[i];
    }
  }
  d.action_stats = ActionNormalizer::fit(actions);
  d.obs_stats = ObsNormalizer::fit(d.specs, obs);
}

DemoDataset generate_demos(const EnvConfig& config, int count, std::uint64_t seed) {
  if (count < 1) throw ArgumentError("demo count must be at least 1");
  DemoDataset d;
  d.specs = toy_modality_specs(config, "prop>vision");
  d.obs_horizon = config.obs_horizon;
  d.action_horizon = config.action_horizon;
  const auto policy = expert_policy();
  int attempts = 0, failures = 0;
  while (static_cast<int>(d.episodes.size()) < count) {
    const int want = count - static_cast<int>(d.episodes.size());
    // Episode indices continue past earlier attempts so reruns are identical.
    RolloutResult r = rollout(policy, config, attempts + want, seed, true, attempts + want);
    for (int i = attempts; i < attempts + want; ++i) {
      auto& e = r.episodes[static_cast<std::size_t>(i)];
      if (e.success) {
        d.episodes.push_back(std::move(e));
      } else {
        ++failures;
      }
    }
    attempts += want;
    if (failures > 0 && static_cast<double>(failures) > 0.1 * attempts) {
      throw EnvironmentError("expert failed " + std::to_string(failures) + " of " + std::to_string(attempts) +
                             " episodes; check the environment configuration");
    }
  }
  fit_statistics(d);
  d.provenance.env_config = to_json(config).dump();
  d.provenance.env_hash = env_config_hash(config);
  d.provenance.expert_seed = seed;
  d.provenance.count = count;
  d.provenance.content_hash = dataset_content_hash(d);
  return d;
}

TrainingSet make_training_set(const DemoDataset& data, const std::string& priority) {
  const auto order = toy_modality_order(priority);
  const int o = data.obs_horizon, h = data.action_horizon;
  std::size_t total = 0;
  for (const auto& e : data.episodes) total += e.actions.size();
  TrainingSet set;
  for (int idx : order) set.specs.push_back(data.specs[static_cast<std::size_t>(idx)]);
  set.horizon = o;
  set.priority_k = 1;
  const auto n = static_cast<Eigen::Index>(total);
  set.x0.resize(kActionDim * h, n);
  for (const auto& s : set.specs) set.cond.emplace_back(s.dim * o, n);
  set.episode.reserve(total);

  Eigen::Index col = 0;
  for (std::size_t ep = 0; ep < data.episodes.size(); ++ep) {
    const auto& e = data.episodes[ep];
    const int len = static_cast<int>(e.actions.size());
    std::vector<Vec> norm_prop(e.proprio.size()), norm_vis(e.vision.size());
    for (int i = 0; i < len; ++i) {
      norm_prop[static_cast<std::size_t>(i)] = data.obs_stats.normalize(0, e.proprio[static_cast<std::size_t>(i)]);
      norm_vis[static_cast<std::size_t>(i)] = data.obs_stats.normalize(1, e.vision[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < len; ++i, ++col) {
      Vec chunk(kActionDim * h);
      for (int j = 0; j < h; ++j) {
        const auto& a = e.actions[static_cast<std::size_t>(std::min(i + j, len - 1))];
        for (int k = 0; k < kActionDim; ++k) chunk[j * kActionDim + k] = a[static_cast<std::size_t>(k)];
      }
      set.x0.col(col) = data.action_stats.normalize(chunk);
      for (std::size_t m = 0; m < order.size(); ++m) {
        const auto& src = order[m] == 0 ? norm_prop : norm_vis;
        const int dim = set.specs[m].dim;
        for (int j = 0; j < o; ++j) {
          const int step = std::max(0, i - (o - 1) + j);
          set.cond[m].block(j * dim, col, dim, 1) = src[static_cast<std::size_t>(step)];
        }
      }
      set.episode.push_back(static_cast<int>(ep));
    }
  }
  return set;
}

std::vector<Vec> encode_history(const DemoDataset& stats, const std::deque<RenderedObs>& history,
                                const std::string& priority) {
  const auto order = toy_modality_order(priority);
  std::vector<Vec> out;
  for (int idx : order) {
    const int dim = stats.specs[static_cast<std::size_t>(idx)].dim;
    Vec v(dim * static_cast<Eigen::Index>(history.size()));
    for (std::size_t j = 0; j < history.size(); ++j) {
      const Vec& raw = idx == 0 ? history[j].proprio : history[j].vision;
      v.segment(static_cast<Eigen::Index>(j) * dim, dim) = stats.obs_stats.normalize(static_cast<std::size_t>(idx), raw);
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::string dataset_content_hash(const DemoDataset& data) {
  ByteWriter w;
  write_body(w, data);
  return content_hash(w.bytes());
}

Bytes encode_dataset(const DemoDataset& d) {
  ByteWriter w;
  w.str(d.provenance.env_config);
  w.str(d.provenance.env_hash);
  w.u64(d.provenance.expert_seed);
  w.u32(static_cast<std::uint32_t>(d.provenance.count));
  w.str(dataset_content_hash(d));
  w.str(FDP_VERSION);
  write_body(w, d);
  return frame_container(kDatasetMagic, kDatasetVersion, w.bytes());
}

DemoDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  const Bytes payload = unframe_container(bytes, kDatasetMagic, kDatasetVersion);
  ByteReader r(payload);
  DemoDataset d;
  d.provenance.env_config = r.str();
  d.provenance.env_hash = r.str();
  d.provenance.expert_seed = r.u64();
  d.provenance.count = static_cast<int>(r.u32());
  d.provenance.content_hash = r.str();
  (void)r.str();
  read_body(r, d);
  r.expect_end();
  if (dataset_content_hash(d) != d.provenance.content_hash) {
    throw CorruptionError("dataset content hash does not match its payload");
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const DemoDataset& data) {
  write_file_atomic(path, encode_dataset(data));
}

DemoDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

std::string results_to_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream out;
  out << kResultCsvHeader << '\n';
  for (const auto& r : rows) {
    out << csv_escape(r.method) << ',' << csv_escape(r.priority) << ',' << r.demos << ',' << csv_escape(r.scale)
        << ',' << csv_escape(r.perturbation) << ',' << r.seed << ',' << format_rate(r.success_rate) << ','
        << r.episodes << ',' << csv_escape(r.config_hash) << ',' << csv_escape(r.code_version) << '\n';
  }
  return out.str();
}

std::vector<ResultRow> results_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kResultCsvHeader) throw FormatError("unexpected results CSV header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 10) throw FormatError("results CSV row has " + std::to_string(f.size()) + " fields");
    try {
      ResultRow r;
      r.method = f[0];
      r.priority = f[1];
      r.demos = std::stoi(f[2]);
      r.scale = f[3];
      r.perturbation = f[4];
      r.seed = std::stoull(f[5]);
      r.success_rate = std::stod(f[6]);
      r.episodes = std::stoi(f[7]);
      r.config_hash = f[8];
      r.code_version = f[9];
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("malformed results CSV row: " + line);
    }
  }
  return rows;
}

nlohmann::json results_to_json(const std::vector<ResultRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"method", r.method},
                   {"priority", r.priority},
                   {"demos", r.demos},
                   {"scale", r.scale},
                   {"perturbation", r.perturbation},
                   {"seed", r.seed},
                   {"success_rate", r.success_rate},
                   {"episodes", r.episodes},
                   {"config_hash", r.config_hash},
                   {"code_version", r.code_version}});
  }
  return arr;
}

void save_results(const std::filesystem::path& csv_path, const std::vector<ResultRow>& rows) {
  write_text_atomic(csv_path, results_to_csv(rows));
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  write_text_atomic(json_path, results_to_json(rows).dump(2) + "\n");
}

std::vector<ResultRow> load_results(const std::filesystem::path& csv_path) {
  const Bytes b = read_file(csv_path);
  return results_from_csv(std::string(b.begin(), b.end()));
}

}  // namespace fdp
