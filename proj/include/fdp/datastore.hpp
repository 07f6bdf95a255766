#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdp/binary_io.hpp"
#include "fdp/normalization.hpp"
#include "fdp/toyenv.hpp"
#include "fdp/training.hpp"

namespace fdp {

inline constexpr std::uint32_t kDatasetVersion = 1;

struct Provenance {
  std::string env_config;  // canonical JSON
  std::string env_hash;
  std::uint64_t expert_seed = 0;
  int count = 0;
  std::string content_hash;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Demonstrations with raw per-step streams; modalities in canonical order
/// (proprio, vision).
struct DemoDataset {
  std::vector<EpisodeRecord> episodes;
  std::vector<ModalitySpec> specs;
  ActionNormalizer action_stats;
  ObsNormalizer obs_stats;
  Provenance provenance;
  int obs_horizon = 2;
  int action_horizon = 8;

  friend bool operator==(const DemoDataset&, const DemoDataset&) = default;
};

std::string env_config_hash(const EnvConfig& config);

/// Runs the expert until `count` successful episodes exist. Throws
/// EnvironmentError when more than 10% of attempts fail.
DemoDataset generate_demos(const EnvConfig& config, int count, std::uint64_t seed);

/// Fits action and observation statistics to exactly the stored episodes.
void fit_statistics(DemoDataset& data);

/// Pairs (observation history, normalized action chunk), one per step, with
/// repeat-first history padding and repeat-last chunk padding. Modalities are
/// reordered for the priority order.
TrainingSet make_training_set(const DemoDataset& data, const std::string& priority);

/// Normalized, flattened observation history in priority order.
std::vector<Vec> encode_history(const DemoDataset& stats, const std::deque<RenderedObs>& history,
                                const std::string& priority);

Bytes encode_dataset(const DemoDataset& data);
DemoDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const DemoDataset& data);
DemoDataset load_dataset(const std::filesystem::path& path);

/// Hash of the serialized episodes and statistics.
std::string dataset_content_hash(const DemoDataset& data);

struct ResultRow {
  std::string method;
  std::string priority;
  int demos = 0;
  std::string scale;
  std::string perturbation;
  std::uint64_t seed = 0;
  double success_rate = 0.0;
  int episodes = 0;
  std::string config_hash;
  std::string code_version = FDP_VERSION;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline constexpr const char* kResultCsvHeader =
    "method,priority,demos,scale,perturbation,seed,success_rate,episodes,config_hash,code_version";

std::string results_to_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> results_from_csv(const std::string& text);
nlohmann::json results_to_json(const std::vector<ResultRow>& rows);
void save_results(const std::filesystem::path& csv_path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> load_results(const std::filesystem::path& csv_path);

}  // namespace fdp
