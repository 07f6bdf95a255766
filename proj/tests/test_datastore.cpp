#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fdp/checkpoint.hpp"
#include "fdp/datastore.hpp"
#include "fdp/errors.hpp"
#include "test_support.hpp"

using namespace fdp;
using namespace fdp::test;

namespace {

EpisodeRecord hand_built_episode(int length) {
  EpisodeRecord e;
  for (int s = 0; s < length; ++s) {
    e.proprio.push_back(Vec::Constant(3, s));
    e.vision.push_back(Vec::Constant(256, 0.1 * s));
    e.actions.push_back({0.01 * s, -0.01 * s, s % 2 ? 1.0 : 0.0});
  }
  e.success = true;
  e.steps = length;
  return e;
}

}  // namespace

TEST_CASE("binary writer and reader agree") {
  ByteWriter w;
  w.u8(7);
  w.u32(0xDEADBEEF);
  w.u64(1ULL << 60);
  w.f64(-0.1);
  w.str("fdp");
  const std::vector<double> v = {1.5, -2.25};
  w.f64s(v);
  ByteReader r(w.bytes());
  CHECK(r.u8() == 7);
  CHECK(r.u32() == 0xDEADBEEF);
  CHECK(r.u64() == (1ULL << 60));
  CHECK(r.f64() == -0.1);
  CHECK(r.str() == "fdp");
  std::vector<double> back(2);
  r.f64s(back);
  CHECK(back == v);
  CHECK_NOTHROW(r.expect_end());
  CHECK_THROWS_AS(r.u8(), CorruptionError);
  CHECK(w.bytes()[1] == 0xEF);  // little-endian
}

TEST_CASE("crc32 and content hash reference values") {
  const std::string text = "123456789";
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  CHECK(crc32(bytes) == 0xCBF43926u);
  CHECK(content_hash(std::string_view("")) == "cbf29ce484222325");
  CHECK(content_hash(std::string_view("a")) == "af63dc4c8601ec8c");
}

TEST_CASE("container framing rejects wrong magic, version and corruption") {
  const std::vector<std::uint8_t> payload = {1, 2, 3, 4, 5};
  const auto file = frame_container(kDatasetMagic, 1, payload);
  CHECK(unframe_container(file, kDatasetMagic, 1) == payload);
  CHECK_THROWS_AS(unframe_container(file, kCheckpointMagic, 1), FormatError);
  CHECK_THROWS_AS(unframe_container(file, kDatasetMagic, 2), FormatError);
  auto flipped = file;
  flipped[9] ^= 1;
  CHECK_THROWS_AS(unframe_container(flipped, kDatasetMagic, 1), CorruptionError);
  const std::vector<std::uint8_t> truncated(file.begin(), file.end() - 3);
  CHECK_THROWS_AS(unframe_container(truncated, kDatasetMagic, 1), CorruptionError);
}

TEST_CASE("action normalization maps onto [-1, 1] and back") {
  CounterRng rng(1);
  const Mat raw = random_mat(3, 50, rng, 0.3);
  const auto norm = ActionNormalizer::fit(raw);
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const Vec n = norm.normalize(raw.col(j));
    CHECK(n.maxCoeff() <= 1.0 + 1e-12);
    CHECK(n.minCoeff() >= -1.0 - 1e-12);
    CHECK((norm.denormalize(n) - raw.col(j)).cwiseAbs().maxCoeff() < 1e-12);
  }
  Vec chunk(6);
  chunk << raw.col(0), raw.col(1);
  CHECK((norm.denormalize(norm.normalize(chunk)) - chunk).cwiseAbs().maxCoeff() < 1e-12);
  Mat flat(3, 4);
  flat.setConstant(0.2);
  const auto degenerate = ActionNormalizer::fit(flat);
  CHECK(std::isfinite(degenerate.normalize(flat.col(0))(0)));
}

TEST_CASE("chunking pads history at the start and actions at the end") {
  DemoDataset d;
  d.specs = {{"proprio", 3, ModalityKind::proprio}, {"vision", 256, ModalityKind::vision_grid}};
  d.episodes = {hand_built_episode(5)};
  fit_statistics(d);
  const auto set = make_training_set(d, "prop>vision");
  REQUIRE(set.size() == 5);
  CHECK(set.x0.rows() == 24);
  CHECK(set.cond[0].rows() == 6);
  // step 0: history repeats the first observation
  const Vec h0 = set.cond[0].col(0);
  CHECK(h0.head(3) == h0.tail(3));
  // step 4: chunk repeats the last action for the remaining slots
  const Vec last = set.x0.col(4);
  for (int s = 1; s < 8; ++s) CHECK(last.segment(3 * s, 3) == last.head(3));
  // step 2: chunk starts with action 2 and history ends with observation 2
  const Vec raw = d.action_stats.denormalize(Vec(set.x0.col(2)));
  CHECK(raw(0) == doctest::Approx(0.02).epsilon(1e-12));
  const auto swapped = make_training_set(d, "vision>prop");
  CHECK(swapped.cond[0].rows() == 512);
  CHECK(swapped.cond[1] == set.cond[0]);
}

TEST_CASE("generated demos succeed and round trip bit-exactly") {
  TempDir dir("datastore");
  EnvConfig env;
  const auto d = generate_demos(env, 10, 5);
  CHECK(d.episodes.size() == 10);
  for (const auto& e : d.episodes) CHECK(e.success);
  save_dataset(dir.path / "a.fdpd", d);
  const auto back = load_dataset(dir.path / "a.fdpd");
  CHECK(back == d);
  CHECK(dataset_content_hash(back) == d.provenance.content_hash);

  save_dataset(dir.path / "b.fdpd", generate_demos(env, 10, 5));
  CHECK(read_file(dir.path / "a.fdpd") == read_file(dir.path / "b.fdpd"));

  auto bytes = read_file(dir.path / "a.fdpd");
  bytes.resize(bytes.size() / 2);
  std::ofstream(dir.path / "c.fdpd", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                               static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_AS(load_dataset(dir.path / "c.fdpd"), CorruptionError);
}

TEST_CASE("training actions normalize into [-1, 1]") {
  const auto d = generate_demos(EnvConfig{}, 5, 6);
  const auto set = make_training_set(d, "prop>vision");
  CHECK(set.x0.maxCoeff() <= 1.0 + 1e-12);
  CHECK(set.x0.minCoeff() >= -1.0 - 1e-12);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  TempDir dir("checkpoint");
  auto specs = small_specs();
  auto cfg = small_net(specs);
  cfg.nullable = {false, true};
  PolicyNet net(cfg, 3);
  save_checkpoint(dir.path / "p.fdpc", net, {"cfg", "abc", FDP_VERSION, 7});
  CheckpointMeta meta;
  const auto back = load_policy(dir.path / "p.fdpc", &meta);
  CHECK(std::vector<double>(back.params().begin(), back.params().end()) ==
        std::vector<double>(net.params().begin(), net.params().end()));
  CHECK(meta.role == "cfg");
  CHECK(meta.epoch == 7);
  CHECK(back.config().nullable == cfg.nullable);

  ResidualNet res(small_net(specs), ComposeMode::blockwise_compose, 4);
  save_checkpoint(dir.path / "r.fdpc", res, {"residual", "abc", FDP_VERSION, 1});
  const auto rback = load_residual(dir.path / "r.fdpc");
  CHECK(rback.mode() == ComposeMode::blockwise_compose);
  CHECK(parameter_checksum(rback.params()) == parameter_checksum(res.params()));
  CHECK_THROWS_AS(load_policy(dir.path / "r.fdpc"), FormatError);
  CHECK(encode_checkpoint(net, {"cfg", "abc", FDP_VERSION, 7}) == read_file(dir.path / "p.fdpc"));

  auto bytes = read_file(dir.path / "p.fdpc");
  bytes[bytes.size() / 3] ^= 0x40;
  CHECK_THROWS_AS(decode_policy(bytes), CorruptionError);
}

TEST_CASE("result csv round trip with quoting") {
  ResultRow r;
  r.method = "fdp_blockwise";
  r.priority = "prop>vision";
  r.demos = 10;
  r.scale = "S";
  r.perturbation = "none";
  r.seed = 3;
  r.success_rate = 0.7366666666666667;
  r.episodes = 300;
  r.config_hash = "0123456789abcdef";
  ResultRow q = r;
  q.method = "odd,\"name\"";
  const auto back = results_from_csv(results_to_csv({r, q}));
  REQUIRE(back.size() == 2);
  CHECK(back[0] == r);
  CHECK(back[1] == q);
  CHECK(results_to_csv({r}).rfind(kResultCsvHeader, 0) == 0);
}
