#pragma once

#include <filesystem>
#include <string>

#include "fdp/binary_io.hpp"
#include "fdp/policy_nets.hpp"

namespace fdp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Free-form provenance stored next to the parameters (config hash, version).
struct CheckpointMeta {
  std::string role;         // "base", "joint", "cfg", "residual"
  std::string config_hash;
  std::string code_version = FDP_VERSION;
  int epoch = -1;
};

Bytes encode_checkpoint(const PolicyNet& net, const CheckpointMeta& meta);
Bytes encode_checkpoint(const ResidualNet& net, const CheckpointMeta& meta);

/// Decoding rebuilds the architecture from the header and copies parameters
/// in layout order. A residual file given to the policy reader (or the
/// reverse) throws FormatError.
PolicyNet decode_policy(std::span<const std::uint8_t> bytes, CheckpointMeta* meta = nullptr);
ResidualNet decode_residual(std::span<const std::uint8_t> bytes, CheckpointMeta* meta = nullptr);

void save_checkpoint(const std::filesystem::path& path, const PolicyNet& net, const CheckpointMeta& meta);
void save_checkpoint(const std::filesystem::path& path, const ResidualNet& net, const CheckpointMeta& meta);
PolicyNet load_policy(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
ResidualNet load_residual(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace fdp
