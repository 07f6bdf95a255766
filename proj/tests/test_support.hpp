#pragma once

#include <filesystem>
#include <string>

#include "fdp/policy_nets.hpp"
#include "fdp/training.hpp"

namespace fdp::test {

inline std::vector<ModalitySpec> small_specs() {
  return {{"proprio", 3, ModalityKind::proprio}, {"vision", 16, ModalityKind::vision_grid}};
}

inline NetConfig small_net(const std::vector<ModalitySpec>& specs, int action_dim = 4, int horizon = 2) {
  NetConfig c;
  c.action_dim = action_dim;
  c.hidden = 12;
  c.blocks = 2;
  c.time_features = 8;
  c.time_embed = 10;
  c.obs_horizon = horizon;
  c.cond_specs = specs;
  c.embed_dims.assign(specs.size(), 6);
  return c;
}

inline CondBatch random_cond(const std::vector<ModalitySpec>& specs, int horizon, Eigen::Index batch,
                             CounterRng& rng) {
  CondBatch c;
  for (const auto& s : specs) {
    Mat m(s.dim * horizon, batch);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    c.modalities.push_back(m);
  }
  return c;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, CounterRng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline void perturb(std::span<double> params, CounterRng& rng, double scale) {
  for (double& p : params) p += scale * rng.normal();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("fdp_test_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace fdp::test
