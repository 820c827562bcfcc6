#pragma once

#include "cfm/image.hpp"

namespace cfm {

// 10 log10(peak^2 / MSE) with plain per-element MSE; +infinity when the
// images are identical.
double psnr(const Image& reference, const Image& test, double peak = 1.0);

// Structural similarity with the standard constants: 11x11 Gaussian window
// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range = peak, averaged over
// valid window positions and over channels.
double ssim(const Image& reference, const Image& test, double peak = 1.0);

}  // namespace cfm
