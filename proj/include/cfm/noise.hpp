#pragma once

#include <cstdint>
#include <vector>

#include "cfm/image.hpp"
#include "cfm/rng.hpp"

namespace cfm {

// Per-pixel noise standard deviation field, in normalized intensity units
// (a sigma quoted on the 0-255 scale enters as sigma/255).
struct NoiseLevelMap {
    enum class Provenance { uniform, peaks, custom };

    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<double> values;  // height * width, all >= 0
    Provenance provenance = Provenance::custom;
    double sigma = 0.0;  // the defining sigma for uniform/peaks maps

    double at(std::int64_t i, std::int64_t j) const {
        return values[static_cast<std::size_t>(i * width + j)];
    }
};

// Constant map with every element sigma.
NoiseLevelMap uniform_map(double sigma, std::int64_t height, std::int64_t width);

// The two-bump surface used for spatially variant maps.
double peaks_function(double x, double y);

// peaks surface sampled at (6 i/H - 3, 6 j/W - 3), then min-max normalized to
// [0, sigma]. i indexes rows and feeds the first argument.
NoiseLevelMap peaks_map(double sigma, std::int64_t height, std::int64_t width);

// Custom map from raw values (validated non-negative).
NoiseLevelMap custom_map(std::vector<double> values, std::int64_t height, std::int64_t width);

// n = n0 o M with n0 i.i.d. standard normal; one independent field per
// channel, all scaled by the same map. Deterministic in (map shape, seed).
Image synthesize_noise(const NoiseLevelMap& map, std::int64_t channels, std::uint64_t seed);

// y = x + n. The result is intentionally not clipped to [0,1].
Image add_noise(const Image& clean, const NoiseLevelMap& map, std::uint64_t seed);

}  // namespace cfm
