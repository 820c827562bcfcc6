#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfm/image.hpp"
#include "cfm/noise.hpp"
#include "cfm/optim.hpp"
#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

struct Corpus {
    std::vector<Image> images;
    std::vector<std::string> names;
    std::vector<std::string> warnings;  // skipped files, size mismatches

    bool empty() const { return images.empty(); }
};

// Loads every .pgm/.ppm in a directory (sorted by name) whose channel count
// matches; anything unreadable or mismatched is skipped with a warning.
Corpus load_corpus(const std::string& dir, std::int64_t channels);

// Deterministic synthetic test image: smooth gradients, soft-edged shapes
// and mild texture, values in [0,1].
Image synth_image(std::uint64_t seed, std::int64_t channels, std::int64_t height,
                  std::int64_t width);

Image resize_bilinear(const Image& src, std::int64_t new_height, std::int64_t new_width);

// One supervised denoising example: clean patch, uniform noise level map and
// the matching noisy observation.
struct PatchSample {
    Image clean;
    Image noisy;
    double sigma = 0.0;  // normalized units
};

// Crop + augment + noise-synthesis pipeline for one patch. Deterministic in
// (corpus contents, config, seed).
PatchSample sample_patch(const Corpus& corpus, const TrainConfig& config, std::uint64_t seed);

template <typename T>
struct Batch {
    Tensor<T> noisy;      // (B, C, P, P)
    Tensor<T> noise_map;  // (B, 1, P, P)
    Tensor<T> clean;      // (B, C, P, P)
};

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    std::vector<T> d(img.data.size());
    for (std::size_t t = 0; t < d.size(); ++t) d[t] = static_cast<T>(img.data[t]);
    return Tensor<T>::from_data(Shape4{1, img.channels, img.height, img.width}, std::move(d));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, std::int64_t batch_index = 0) {
    const Shape4 s = t.shape();
    Image img(s.c, s.h, s.w);
    const std::size_t off = static_cast<std::size_t>(batch_index * s.c * s.h * s.w);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = static_cast<double>(t.data()[off + i]);
    }
    return img;
}

// A batch of independently sampled patches; per-patch seeds derive from
// (batch_seed, patch index) so parallel synthesis stays reproducible.
template <typename T>
Batch<T> sample_patch_batch(const Corpus& corpus, const TrainConfig& config,
                            std::uint64_t batch_seed) {
    if (corpus.empty()) throw DataError("sample_patch_batch: empty corpus");
    const std::int64_t B = config.batch_size;
    const std::int64_t C = corpus.images.front().channels;
    const std::int64_t P = config.patch_size;

    Batch<T> batch;
    batch.noisy = Tensor<T>::zeros(Shape4{B, C, P, P});
    batch.noise_map = Tensor<T>::zeros(Shape4{B, 1, P, P});
    batch.clean = Tensor<T>::zeros(Shape4{B, C, P, P});

    const std::int64_t plane = P * P;
    for (std::int64_t b = 0; b < B; ++b) {
        PatchSample s = sample_patch(corpus, config,
                                     CounterRng::derive(batch_seed, static_cast<std::uint64_t>(b)));
        for (std::int64_t t = 0; t < C * plane; ++t) {
            batch.clean.data()[b * C * plane + t] = static_cast<T>(s.clean.data[static_cast<std::size_t>(t)]);
            batch.noisy.data()[b * C * plane + t] = static_cast<T>(s.noisy.data[static_cast<std::size_t>(t)]);
        }
        for (std::int64_t t = 0; t < plane; ++t) {
            batch.noise_map.data()[b * plane + t] = static_cast<T>(s.sigma);
        }
    }
    return batch;
}

}  // namespace cfm
