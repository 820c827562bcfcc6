#include "cfm/metrics.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <vector>

namespace cfm {

double psnr(const Image& reference, const Image& test, double peak) {
    if (reference.channels != test.channels || reference.height != test.height ||
        reference.width != test.width) {
        throw ShapeError("psnr: image dimensions differ");
    }
    double mse = 0.0;
    for (std::size_t t = 0; t < reference.data.size(); ++t) {
        const double d = reference.data[t] - test.data[t];
        mse += d * d;
    }
    mse /= static_cast<double>(reference.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
    std::array<double, kWindow> w{};
    const double sigma = 1.5;
    double sum = 0.0;
    for (int k = 0; k < kWindow; ++k) {
        const double d = k - (kWindow - 1) / 2.0;
        w[static_cast<std::size_t>(k)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(k)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Separable valid-region Gaussian filter: (H,W) -> (H-10, W-10).
std::vector<double> filter_valid(const std::vector<double>& src, std::int64_t h, std::int64_t w,
                                 const std::array<double, kWindow>& win) {
    const std::int64_t wo = w - kWindow + 1;
    const std::int64_t ho = h - kWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h * wo));
    for (std::int64_t i = 0; i < h; ++i) {
        const double* row = src.data() + i * w;
        double* out = tmp.data() + i * wo;
        for (std::int64_t j = 0; j < wo; ++j) {
            double acc = 0.0;
            for (int k = 0; k < kWindow; ++k) acc += win[static_cast<std::size_t>(k)] * row[j + k];
            out[j] = acc;
        }
    }
    std::vector<double> dst(static_cast<std::size_t>(ho * wo));
    for (std::int64_t j = 0; j < wo; ++j) {
        for (std::int64_t i = 0; i < ho; ++i) {
            double acc = 0.0;
            for (int k = 0; k < kWindow; ++k) {
                acc += win[static_cast<std::size_t>(k)] * tmp[(i + k) * wo + j];
            }
            dst[static_cast<std::size_t>(i * wo + j)] = acc;
        }
    }
    return dst;
}

}  // namespace

double ssim(const Image& reference, const Image& test, double peak) {
    if (reference.channels != test.channels || reference.height != test.height ||
        reference.width != test.width) {
        throw ShapeError("ssim: image dimensions differ");
    }
    const std::int64_t h = reference.height, w = reference.width;
    if (h < kWindow || w < kWindow) {
        throw ShapeError("ssim: image smaller than the 11x11 window");
    }
    const auto win = gaussian_window();
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const std::int64_t plane = h * w;

    double channel_sum = 0.0;
    for (std::int64_t c = 0; c < reference.channels; ++c) {
        std::vector<double> x(reference.data.begin() + c * plane,
                              reference.data.begin() + (c + 1) * plane);
        std::vector<double> y(test.data.begin() + c * plane, test.data.begin() + (c + 1) * plane);
        std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t t = 0; t < x.size(); ++t) {
            xx[t] = x[t] * x[t];
            yy[t] = y[t] * y[t];
            xy[t] = x[t] * y[t];
        }
        const auto mu_x = filter_valid(x, h, w, win);
        const auto mu_y = filter_valid(y, h, w, win);
        const auto sxx = filter_valid(xx, h, w, win);
        const auto syy = filter_valid(yy, h, w, win);
        const auto sxy = filter_valid(xy, h, w, win);

        double acc = 0.0;
        for (std::size_t t = 0; t < mu_x.size(); ++t) {
            const double vx = sxx[t] - mu_x[t] * mu_x[t];
            const double vy = syy[t] - mu_y[t] * mu_y[t];
            const double cov = sxy[t] - mu_x[t] * mu_y[t];
            const double num = (2.0 * mu_x[t] * mu_y[t] + c1) * (2.0 * cov + c2);
            const double den = (mu_x[t] * mu_x[t] + mu_y[t] * mu_y[t] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        channel_sum += acc / static_cast<double>(mu_x.size());
    }
    return channel_sum / static_cast<double>(reference.channels);
}

}  // namespace cfm
