#pragma once

#include <span>
#include <string>
#include <vector>

#include "fdp/diffusion.hpp"

namespace fdp {

enum class ModalityKind { proprio, vision_grid, state };

std::string to_string(ModalityKind kind);
ModalityKind parse_modality_kind(const std::string& name);

struct ModalitySpec {
  std::string name;
  int dim = 0;  // per observation step
  ModalityKind kind = ModalityKind::state;

  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

/// One conditioning sample: M modalities, each flattened over `horizon` steps,
/// ordered so that the first `priority_k` are the prioritized ones.
struct ObservationBundle {
  std::vector<ModalitySpec> specs;
  std::vector<Vec> values;
  int horizon = 1;
  int priority_k = 1;

  [[nodiscard]] int num_modalities() const { return static_cast<int>(specs.size()); }
  [[nodiscard]] std::span<const Vec> prioritized() const {
    return std::span<const Vec>(values).first(static_cast<std::size_t>(priority_k));
  }
  /// Throws ArgumentError when any invariant fails.
  void validate() const;
};

/// Checks specs for positive dims and unique names.
void validate_specs(std::span<const ModalitySpec> specs);

}  // namespace fdp
