#pragma once

#include <cmath>
#include <cstddef>

#include "bscst/gradcore.hpp"

namespace bscst {

/// K region-feature slots of dimension D, one slot per row.
struct SceneFeatures {
  grad::Tensor slots;

  std::size_t num_slots() const { return slots.rows; }
  std::size_t dim() const { return slots.cols; }
  bool finite() const {
    for (double v : slots.data)
      if (!std::isfinite(v)) return false;
    return true;
  }
  friend bool operator==(const SceneFeatures& a, const SceneFeatures& b) {
    return a.slots.rows == b.slots.rows && a.slots.cols == b.slots.cols && a.slots.data == b.slots.data;
  }
};

}  // namespace bscst
