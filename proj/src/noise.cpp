#include "cfm/noise.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cfm {

NoiseLevelMap uniform_map(double sigma, std::int64_t height, std::int64_t width) {
    if (sigma < 0.0) throw DomainError("uniform_map: sigma must be >= 0, got " + std::to_string(sigma));
    if (height <= 0 || width <= 0) throw DomainError("uniform_map: empty map");
    NoiseLevelMap m;
    m.height = height;
    m.width = width;
    m.values.assign(static_cast<std::size_t>(height * width), sigma);
    m.provenance = NoiseLevelMap::Provenance::uniform;
    m.sigma = sigma;
    return m;
}

double peaks_function(double x, double y) {
    const double a = 3.0 * (1.0 - x) * (1.0 - x) * std::exp(-x * x - (y + 1.0) * (y + 1.0));
    const double b = 10.0 * (x / 5.0 - x * x * x - std::pow(y, 5)) * std::exp(-x * x - y * y);
    return a - b;
}

NoiseLevelMap peaks_map(double sigma, std::int64_t height, std::int64_t width) {
    if (sigma <= 0.0) throw DomainError("peaks_map: sigma must be > 0");
    if (height < 2 || width < 2) throw DomainError("peaks_map: needs H, W >= 2");

    NoiseLevelMap m;
    m.height = height;
    m.width = width;
    m.values.resize(static_cast<std::size_t>(height * width));
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < height; ++i) {
        const double x = 6.0 * static_cast<double>(i) / static_cast<double>(height) - 3.0;
        for (std::int64_t j = 0; j < width; ++j) {
            const double y = 6.0 * static_cast<double>(j) / static_cast<double>(width) - 3.0;
            const double v = peaks_function(x, y);
            m.values[static_cast<std::size_t>(i * width + j)] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi == lo) throw DomainError("peaks_map: degenerate surface (max == min)");
    const double scale = sigma / (hi - lo);
    for (auto& v : m.values) v = (v - lo) * scale;
    m.provenance = NoiseLevelMap::Provenance::peaks;
    m.sigma = sigma;
    return m;
}

NoiseLevelMap custom_map(std::vector<double> values, std::int64_t height, std::int64_t width) {
    if (static_cast<std::int64_t>(values.size()) != height * width) {
        throw DomainError("custom_map: value count does not match dimensions");
    }
    for (double v : values) {
        if (!(v >= 0.0)) throw DomainError("custom_map: negative or non-finite noise level");
    }
    NoiseLevelMap m;
    m.height = height;
    m.width = width;
    m.values = std::move(values);
    m.provenance = NoiseLevelMap::Provenance::custom;
    m.sigma = *std::max_element(m.values.begin(), m.values.end());
    return m;
}

Image synthesize_noise(const NoiseLevelMap& map, std::int64_t channels, std::uint64_t seed) {
    Image n(channels, map.height, map.width);
    CounterRng rng(seed);
    const std::int64_t plane = map.height * map.width;
    for (std::int64_t c = 0; c < channels; ++c) {
        double* np = n.data.data() + c * plane;
        for (std::int64_t t = 0; t < plane; ++t) {
            np[t] = rng.normal() * map.values[static_cast<std::size_t>(t)];
        }
    }
    return n;
}

Image add_noise(const Image& clean, const NoiseLevelMap& map, std::uint64_t seed) {
    if (clean.height != map.height || clean.width != map.width) {
        throw DomainError("add_noise: map dimensions do not match the image");
    }
    Image noisy = clean;
    const Image n = synthesize_noise(map, clean.channels, seed);
    for (std::size_t t = 0; t < noisy.data.size(); ++t) noisy.data[t] += n.data[t];
    return noisy;
}

}  // namespace cfm
