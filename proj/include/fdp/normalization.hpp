#pragma once

#include <vector>

#include "fdp/binary_io.hpp"
#include "fdp/diffusion.hpp"
#include "fdp/observation.hpp"

namespace fdp {

/// Min/max map of each raw action dimension onto [-1, 1], tiled over the
/// chunk horizon. Dimensions with no spread map through x - min.
struct ActionNormalizer {
  Vec min;
  Vec max;

  [[nodiscard]] int action_dim() const { return static_cast<int>(min.size()); }
  /// Columns of `raw` are actions (action_dim rows).
  static ActionNormalizer fit(const Mat& raw);
  /// Works on single actions or whole chunks (multiples of action_dim).
  [[nodiscard]] Vec normalize(const Vec& x) const;
  [[nodiscard]] Vec denormalize(const Vec& x) const;
  [[nodiscard]] Mat denormalize(const Mat& x) const;

  void write(ByteWriter& w) const;
  static ActionNormalizer read(ByteReader& r);
  friend bool operator==(const ActionNormalizer&, const ActionNormalizer&) = default;
};

/// Per-modality standardization: elementwise for proprio and state, one pooled
/// scalar for vision grids. Statistics are per observation step and tiled
/// over the history.
struct ObsNormalizer {
  std::vector<ModalitySpec> specs;
  std::vector<Vec> mean;
  std::vector<Vec> stddev;

  /// samples[m] holds one raw per-step observation per column.
  static ObsNormalizer fit(const std::vector<ModalitySpec>& specs, const std::vector<Mat>& samples);
  [[nodiscard]] Vec normalize(std::size_t m, const Vec& x) const;
  [[nodiscard]] Vec denormalize(std::size_t m, const Vec& x) const;

  void write(ByteWriter& w) const;
  static ObsNormalizer read(ByteReader& r);
  friend bool operator==(const ObsNormalizer&, const ObsNormalizer&) = default;
};

}  // namespace fdp
