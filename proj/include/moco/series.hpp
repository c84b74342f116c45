#pragma once

// A dynamic image: T frames of one 3-D grid with per-frame timing.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

struct FrameSeries {
  Extent3 extent{};
  std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};  // d, h, w spacing
  std::vector<double> mid_times;                  // minutes
  std::vector<double> durations;                  // minutes
  std::vector<Tensor<double>> frames;             // each [D,H,W]; stored as 32-bit on disk
  std::string units = "SUV";

  std::size_t size() const { return frames.size(); }

  // Frame times strictly increasing, durations positive, every frame on the grid.
  void validate() const {
    if (extent.d == 0 || extent.h == 0 || extent.w == 0) throw DimensionError("frame series has an empty grid");
    if (mid_times.size() != frames.size() || durations.size() != frames.size())
      throw ConfigError("frame series: " + std::to_string(frames.size()) + " frames but " +
                        std::to_string(mid_times.size()) + " mid-times and " + std::to_string(durations.size()) +
                        " durations");
    for (std::size_t k = 0; k < frames.size(); ++k) {
      if (frames[k].shape() != extent.shape())
        throw DimensionError("frame " + std::to_string(k) + " has shape " + shape_str(frames[k].shape()) +
                             ", expected " + shape_str(extent.shape()));
      if (!std::isfinite(mid_times[k]) || !(durations[k] > 0.0))
        throw ConfigError("frame " + std::to_string(k) + " has invalid timing");
      if (k > 0 && !(mid_times[k] > mid_times[k - 1]))
        throw ConfigError("frame mid-times must be strictly increasing");
    }
    for (double s : voxel_mm)
      if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("voxel spacing must be positive");
  }
};

}  // namespace moco
