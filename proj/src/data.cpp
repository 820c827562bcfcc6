#include "cfm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cfm/image_io.hpp"

namespace cfm {

Corpus load_corpus(const std::string& dir, std::int64_t channels) {
    namespace fs = std::filesystem;
    Corpus corpus;
    if (!fs::is_directory(dir)) throw DataError("corpus directory '" + dir + "' does not exist");

    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        if (ext == ".pgm" || ext == ".ppm") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());

    for (const auto& path : paths) {
        try {
            Image img = load_image(path);
            if (img.channels != channels) {
                corpus.warnings.push_back(path + ": skipped, has " +
                                          std::to_string(img.channels) + " channels, expected " +
                                          std::to_string(channels));
                continue;
            }
            corpus.images.push_back(std::move(img));
            corpus.names.push_back(fs::path(path).filename().string());
        } catch (const DataError& e) {
            corpus.warnings.push_back(std::string("skipped: ") + e.what());
        }
    }
    return corpus;
}

Image synth_image(std::uint64_t seed, std::int64_t channels, std::int64_t height,
                  std::int64_t width) {
    CounterRng rng(seed);
    Image img(channels, height, width);

    // smooth base: a few low-frequency cosine plaids per channel
    for (std::int64_t c = 0; c < channels; ++c) {
        const double fx1 = rng.uniform(0.5, 2.5), fy1 = rng.uniform(0.5, 2.5);
        const double fx2 = rng.uniform(2.0, 5.0), fy2 = rng.uniform(2.0, 5.0);
        const double p1 = rng.uniform(0, 6.283), p2 = rng.uniform(0, 6.283);
        for (std::int64_t i = 0; i < height; ++i) {
            const double v = static_cast<double>(i) / static_cast<double>(height);
            for (std::int64_t j = 0; j < width; ++j) {
                const double u = static_cast<double>(j) / static_cast<double>(width);
                double val = 0.5 + 0.2 * std::cos(6.283 * (fx1 * u + fy1 * v) + p1) +
                             0.1 * std::cos(6.283 * (fx2 * u - fy2 * v) + p2);
                img.at(c, i, j) = val;
            }
        }
    }

    // soft-edged discs and rectangles shared across channels (structure)
    const int shapes = 4 + static_cast<int>(rng.uniform_index(4));
    for (int s = 0; s < shapes; ++s) {
        const bool disc = rng.uniform01() < 0.5;
        const double ci = rng.uniform(0.1, 0.9) * static_cast<double>(height);
        const double cj = rng.uniform(0.1, 0.9) * static_cast<double>(width);
        const double r = rng.uniform(0.08, 0.25) * static_cast<double>(std::min(height, width));
        const double soft = rng.uniform(0.5, 2.0);
        std::vector<double> amp(static_cast<std::size_t>(channels));
        for (auto& a : amp) a = rng.uniform(-0.35, 0.35);
        for (std::int64_t i = 0; i < height; ++i) {
            for (std::int64_t j = 0; j < width; ++j) {
                const double di = static_cast<double>(i) - ci;
                const double dj = static_cast<double>(j) - cj;
                const double d = disc ? std::sqrt(di * di + dj * dj)
                                      : std::max(std::abs(di), std::abs(dj));
                const double mask = 1.0 / (1.0 + std::exp((d - r) / soft));
                for (std::int64_t c = 0; c < channels; ++c) img.at(c, i, j) += amp[static_cast<std::size_t>(c)] * mask;
            }
        }
    }

    // mild texture
    for (auto& v : img.data) v += 0.02 * rng.normal();

    for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

Image resize_bilinear(const Image& src, std::int64_t new_height, std::int64_t new_width) {
    if (new_height < 1 || new_width < 1) throw DomainError("resize_bilinear: empty target");
    Image dst(src.channels, new_height, new_width);
    const double si = static_cast<double>(src.height) / static_cast<double>(new_height);
    const double sj = static_cast<double>(src.width) / static_cast<double>(new_width);
    for (std::int64_t i = 0; i < new_height; ++i) {
        const double fi = (static_cast<double>(i) + 0.5) * si - 0.5;
        const std::int64_t i0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(fi)),
                                                         0, src.height - 1);
        const std::int64_t i1 = std::min(i0 + 1, src.height - 1);
        const double wi = std::clamp(fi - static_cast<double>(i0), 0.0, 1.0);
        for (std::int64_t j = 0; j < new_width; ++j) {
            const double fj = (static_cast<double>(j) + 0.5) * sj - 0.5;
            const std::int64_t j0 = std::clamp<std::int64_t>(
                static_cast<std::int64_t>(std::floor(fj)), 0, src.width - 1);
            const std::int64_t j1 = std::min(j0 + 1, src.width - 1);
            const double wj = std::clamp(fj - static_cast<double>(j0), 0.0, 1.0);
            for (std::int64_t c = 0; c < src.channels; ++c) {
                const double top = (1.0 - wj) * src.at(c, i0, j0) + wj * src.at(c, i0, j1);
                const double bot = (1.0 - wj) * src.at(c, i1, j0) + wj * src.at(c, i1, j1);
                dst.at(c, i, j) = (1.0 - wi) * top + wi * bot;
            }
        }
    }
    return dst;
}

namespace {

Image crop(const Image& src, std::int64_t i0, std::int64_t j0, std::int64_t size) {
    Image out(src.channels, size, size);
    for (std::int64_t c = 0; c < src.channels; ++c)
        for (std::int64_t i = 0; i < size; ++i)
            for (std::int64_t j = 0; j < size; ++j) out.at(c, i, j) = src.at(c, i0 + i, j0 + j);
    return out;
}

Image flip_horizontal(const Image& src) {
    Image out(src.channels, src.height, src.width);
    for (std::int64_t c = 0; c < src.channels; ++c)
        for (std::int64_t i = 0; i < src.height; ++i)
            for (std::int64_t j = 0; j < src.width; ++j)
                out.at(c, i, j) = src.at(c, i, src.width - 1 - j);
    return out;
}

Image rotate90(const Image& src) {  // square patches only
    Image out(src.channels, src.width, src.height);
    for (std::int64_t c = 0; c < src.channels; ++c)
        for (std::int64_t i = 0; i < src.height; ++i)
            for (std::int64_t j = 0; j < src.width; ++j)
                out.at(c, j, src.height - 1 - i) = src.at(c, i, j);
    return out;
}

}  // namespace

PatchSample sample_patch(const Corpus& corpus, const TrainConfig& config, std::uint64_t seed) {
    if (corpus.empty()) throw DataError("sample_patch: empty corpus");
    CounterRng rng(seed);
    const std::int64_t P = config.patch_size;

    // choose a source image large enough for the crop
    const Image* src = nullptr;
    for (int attempt = 0; attempt < 64 && !src; ++attempt) {
        const auto& cand = corpus.images[rng.uniform_index(corpus.images.size())];
        if (cand.height >= P && cand.width >= P) src = &cand;
    }
    if (!src) throw DataError("sample_patch: no corpus image is at least patch-size large");

    Image scaled;
    const Image* source = src;
    if (config.augment_rescale) {
        const double factors[3] = {0.5, 1.0, 2.0};
        const double f = factors[rng.uniform_index(3)];
        if (f != 1.0) {
            const std::int64_t nh = static_cast<std::int64_t>(std::lround(src->height * f));
            const std::int64_t nw = static_cast<std::int64_t>(std::lround(src->width * f));
            if (nh >= P && nw >= P) {
                scaled = resize_bilinear(*src, nh, nw);
                source = &scaled;
            }
        }
    }

    const std::int64_t i0 = static_cast<std::int64_t>(
        rng.uniform_index(static_cast<std::uint64_t>(source->height - P + 1)));
    const std::int64_t j0 = static_cast<std::int64_t>(
        rng.uniform_index(static_cast<std::uint64_t>(source->width - P + 1)));
    Image patch = crop(*source, i0, j0, P);

    if (config.augment_flip && rng.uniform01() < 0.5) patch = flip_horizontal(patch);
    if (config.augment_rotate) {
        const std::uint64_t quarter_turns = rng.uniform_index(4);
        for (std::uint64_t k = 0; k < quarter_turns; ++k) patch = rotate90(patch);
    }

    PatchSample out;
    out.sigma = rng.uniform(config.sigma_min, config.sigma_max);
    const NoiseLevelMap map = uniform_map(out.sigma, P, P);
    out.noisy = add_noise(patch, map, rng.next_u64());
    out.clean = std::move(patch);
    return out;
}

}  // namespace cfm
