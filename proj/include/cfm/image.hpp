#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfm/errors.hpp"

namespace cfm {

// Planar CHW image with real-valued intensities, nominally in [0,1].
// Noisy images may exceed the range; clipping happens only on file export.
struct Image {
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<double> data;  // channels * height * width, row-major planes

    Image() = default;
    Image(std::int64_t c, std::int64_t h, std::int64_t w)
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c * h * w), 0.0) {}

    std::int64_t numel() const { return channels * height * width; }

    double& at(std::int64_t c, std::int64_t i, std::int64_t j) {
        return data[static_cast<std::size_t>((c * height + i) * width + j)];
    }
    double at(std::int64_t c, std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>((c * height + i) * width + j)];
    }
};

}  // namespace cfm
