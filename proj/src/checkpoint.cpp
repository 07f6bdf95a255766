#include "fdp/checkpoint.hpp"

#include <algorithm>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

void write_config(ByteWriter& w, const NetConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.blocks));
  w.u32(static_cast<std::uint32_t>(c.action_dim));
  w.u32(static_cast<std::uint32_t>(c.hidden));
  w.u32(static_cast<std::uint32_t>(c.time_features));
  w.u32(static_cast<std::uint32_t>(c.time_embed));
  w.u32(static_cast<std::uint32_t>(c.obs_horizon));
  w.u32(static_cast<std::uint32_t>(c.cond_specs.size()));
  for (std::size_t m = 0; m < c.cond_specs.size(); ++m) {
    w.str(c.cond_specs[m].name);
    w.u32(static_cast<std::uint32_t>(c.cond_specs[m].dim));
    w.str(to_string(c.cond_specs[m].kind));
    w.u32(static_cast<std::uint32_t>(c.embed_dim(m)));
    w.u8(c.is_nullable(m) ? 1 : 0);
  }
}

NetConfig read_config(ByteReader& r) {
  NetConfig c;
  c.blocks = static_cast<int>(r.u32());
  c.action_dim = static_cast<int>(r.u32());
  c.hidden = static_cast<int>(r.u32());
  c.time_features = static_cast<int>(r.u32());
  c.time_embed = static_cast<int>(r.u32());
  c.obs_horizon = static_cast<int>(r.u32());
  const auto n = r.u32();
  if (n > 64) throw CorruptionError("implausible modality count in checkpoint");
  for (std::uint32_t m = 0; m < n; ++m) {
    ModalitySpec spec;
    spec.name = r.str();
    spec.dim = static_cast<int>(r.u32());
    spec.kind = parse_modality_kind(r.str());
    c.cond_specs.push_back(spec);
    c.embed_dims.push_back(static_cast<int>(r.u32()));
    c.nullable.push_back(r.u8() != 0);
  }
  return c;
}

Bytes encode(const std::string& kind, const std::string& mode, const NetConfig& config,
             std::span<const double> params, const CheckpointMeta& meta) {
  ByteWriter w;
  w.str(kind);
  w.str(mode);
  w.str(meta.role);
  w.str(meta.config_hash);
  w.str(meta.code_version);
  w.i64(meta.epoch);
  write_config(w, config);
  w.u64(params.size());
  w.f64s(params);
  return frame_container(kCheckpointMagic, kCheckpointVersion, w.bytes());
}

struct Decoded {
  std::string kind;
  std::string mode;
  CheckpointMeta meta;
  NetConfig config;
  std::vector<double> params;
};

Decoded decode(std::span<const std::uint8_t> bytes) {
  const Bytes payload = unframe_container(bytes, kCheckpointMagic, kCheckpointVersion);
  ByteReader r(payload);
  Decoded d;
  d.kind = r.str();
  d.mode = r.str();
  d.meta.role = r.str();
  d.meta.config_hash = r.str();
  d.meta.code_version = r.str();
  d.meta.epoch = static_cast<int>(r.i64());
  d.config = read_config(r);
  const auto n = r.u64();
  if (n > r.remaining() / 8) throw CorruptionError("parameter count exceeds payload");
  d.params.resize(n);
  r.f64s(d.params);
  r.expect_end();
  return d;
}

template <class Net>
void copy_params(Net& net, const std::vector<double>& params) {
  if (params.size() != net.num_params()) {
    throw FormatError("checkpoint parameter count does not match its architecture");
  }
  std::copy(params.begin(), params.end(), net.params().begin());
}

}  // namespace

Bytes encode_checkpoint(const PolicyNet& net, const CheckpointMeta& meta) {
  return encode("policy", "", net.config(), net.params(), meta);
}

Bytes encode_checkpoint(const ResidualNet& net, const CheckpointMeta& meta) {
  return encode("residual", to_string(net.mode()), net.config(), net.params(), meta);
}

PolicyNet decode_policy(std::span<const std::uint8_t> bytes, CheckpointMeta* meta) {
  Decoded d = decode(bytes);
  if (d.kind != "policy") throw FormatError("checkpoint holds a " + d.kind + " network, not a policy");
  PolicyNet net(d.config, 0);
  copy_params(net, d.params);
  if (meta != nullptr) *meta = d.meta;
  return net;
}

ResidualNet decode_residual(std::span<const std::uint8_t> bytes, CheckpointMeta* meta) {
  Decoded d = decode(bytes);
  if (d.kind != "residual") throw FormatError("checkpoint holds a " + d.kind + " network, not a residual");
  ResidualNet net(d.config, parse_compose_mode(d.mode), 0);
  copy_params(net, d.params);
  if (meta != nullptr) *meta = d.meta;
  return net;
}

void save_checkpoint(const std::filesystem::path& path, const PolicyNet& net, const CheckpointMeta& meta) {
  write_file_atomic(path, encode_checkpoint(net, meta));
}

void save_checkpoint(const std::filesystem::path& path, const ResidualNet& net, const CheckpointMeta& meta) {
  write_file_atomic(path, encode_checkpoint(net, meta));
}

PolicyNet load_policy(const std::filesystem::path& path, CheckpointMeta* meta) {
  return decode_policy(read_file(path), meta);
}

ResidualNet load_residual(const std::filesystem::path& path, CheckpointMeta* meta) {
  return decode_residual(read_file(path), meta);
}

}  // namespace fdp
