#pragma once

#include <cstdint>

#include "rock/tensor.hpp"

namespace rock {

/// One labelled image: (3,H,W) pixels in [0,1], category index and the H×W
/// ground-truth part grid.
struct Sample {
  std::uint64_t id = 0;
  int category = 0;
  Tensor image;
  LabelGrid parts;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace rock
