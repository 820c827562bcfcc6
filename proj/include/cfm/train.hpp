#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "cfm/data.hpp"
#include "cfm/metrics.hpp"
#include "cfm/net.hpp"
#include "cfm/optim.hpp"

namespace cfm {

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string train_config_digest_source(const CFMNetConfig& net_cfg,
                                              const TrainConfig& cfg) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "c%lld w%lld,%lld,%lld p%d o%d k%d v%d|P%lld B%lld N%lld s[%.17g,%.17g] "
                  "E%d/%d lr%.17g,%.17g,%.17g a%d%d%d seed%llu",
                  static_cast<long long>(net_cfg.in_channels),
                  static_cast<long long>(net_cfg.scale_widths[0]),
                  static_cast<long long>(net_cfg.scale_widths[1]),
                  static_cast<long long>(net_cfg.scale_widths[2]), net_cfg.cfm_per_position,
                  net_cfg.num_shifting_ops, static_cast<int>(net_cfg.kind),
                  static_cast<int>(net_cfg.variant), static_cast<long long>(cfg.patch_size),
                  static_cast<long long>(cfg.batch_size),
                  static_cast<long long>(cfg.patches_per_epoch), cfg.sigma_min, cfg.sigma_max,
                  cfg.epochs_main, cfg.epochs_finetune, cfg.lr_start, cfg.lr_end_main,
                  cfg.lr_end_finetune, cfg.augment_flip ? 1 : 0, cfg.augment_rotate ? 1 : 0,
                  cfg.augment_rescale ? 1 : 0, static_cast<unsigned long long>(cfg.seed));
    return buf;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

// Denoises one image: builds the (1,*) tensors, reflect-pads H/W up to a
// multiple of 4 when needed, and crops the result back.
template <typename T>
Image denoise_image(CFMNet<T>& net, const Image& noisy, const NoiseLevelMap& map) {
    if (noisy.height != map.height || noisy.width != map.width) {
        throw DomainError("denoise_image: map dimensions do not match the image");
    }
    const std::int64_t H = noisy.height, W = noisy.width;
    const std::int64_t Hp = (H + 3) / 4 * 4, Wp = (W + 3) / 4 * 4;

    Image padded_img = noisy;
    Image padded_map(1, map.height, map.width);
    padded_map.data = map.values;
    if (Hp != H || Wp != W) {
        if (H < 4 || W < 4) throw DomainError("denoise_image: image smaller than 4x4");
        auto reflect = [](std::int64_t idx, std::int64_t n) {
            return idx < n ? idx : 2 * n - 2 - idx;  // mirror without edge repeat
        };
        auto pad = [&](const Image& src) {
            Image dst(src.channels, Hp, Wp);
            for (std::int64_t c = 0; c < src.channels; ++c)
                for (std::int64_t i = 0; i < Hp; ++i)
                    for (std::int64_t j = 0; j < Wp; ++j)
                        dst.at(c, i, j) = src.at(c, reflect(i, H), reflect(j, W));
            return dst;
        };
        padded_img = pad(padded_img);
        padded_map = pad(padded_map);
    }

    NoGradGuard no_grad;
    auto y = image_to_tensor<T>(padded_img);
    auto m = image_to_tensor<T>(padded_map);
    auto out = net.forward(y, m, BatchNormMode::eval);
    Image denoised = tensor_to_image(out);

    if (Hp != H || Wp != W) {
        Image cropped(denoised.channels, H, W);
        for (std::int64_t c = 0; c < denoised.channels; ++c)
            for (std::int64_t i = 0; i < H; ++i)
                for (std::int64_t j = 0; j < W; ++j) cropped.at(c, i, j) = denoised.at(c, i, j);
        return cropped;
    }
    return denoised;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class MapKind { uniform, peaks };

struct EvalRow {
    std::string image;
    double sigma255 = 0.0;  // sigma on the 0-255 scale, as reported
    double psnr_noisy = 0.0;
    double psnr_denoised = 0.0;
    double ssim_denoised = 0.0;
};

struct EvalTable {
    std::vector<EvalRow> rows;
    EvalRow mean;
    std::vector<std::string> warnings;
};

// Per-image noise synthesis with seeds derived from (seed, image, sigma), so
// repeated runs are identical.
template <typename T>
EvalTable evaluate(CFMNet<T>& net, const Corpus& testset, const std::vector<double>& sigmas255,
                   MapKind map_kind, std::uint64_t seed) {
    EvalTable table;
    table.warnings = testset.warnings;
    for (std::size_t img_idx = 0; img_idx < testset.images.size(); ++img_idx) {
        const Image& clean = testset.images[img_idx];
        for (std::size_t s_idx = 0; s_idx < sigmas255.size(); ++s_idx) {
            const double sigma = sigmas255[s_idx] / 255.0;
            NoiseLevelMap map = map_kind == MapKind::uniform
                                    ? uniform_map(sigma, clean.height, clean.width)
                                    : peaks_map(sigma, clean.height, clean.width);
            const std::uint64_t noise_seed =
                CounterRng::derive(seed, img_idx * 1000 + s_idx);
            Image noisy = add_noise(clean, map, noise_seed);
            Image denoised = denoise_image(net, noisy, map);

            EvalRow row;
            row.image = testset.names[img_idx];
            row.sigma255 = sigmas255[s_idx];
            row.psnr_noisy = psnr(clean, noisy);
            row.psnr_denoised = psnr(clean, denoised);
            row.ssim_denoised = ssim(clean, denoised);
            table.rows.push_back(row);
        }
    }
    if (!table.rows.empty()) {
        table.mean.image = "mean";
        double s255 = 0;
        for (const auto& r : table.rows) {
            s255 += r.sigma255;
            table.mean.psnr_noisy += r.psnr_noisy;
            table.mean.psnr_denoised += r.psnr_denoised;
            table.mean.ssim_denoised += r.ssim_denoised;
        }
        const double n = static_cast<double>(table.rows.size());
        table.mean.sigma255 = s255 / n;
        table.mean.psnr_noisy /= n;
        table.mean.psnr_denoised /= n;
        table.mean.ssim_denoised /= n;
    }
    return table;
}

inline std::string format_metric(double v) {
    char buf[48];
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string to_csv(const EvalTable& table) {
    std::string out = "image,sigma,psnr_noisy,psnr,ssim\n";
    auto append = [&](const EvalRow& r) {
        out += r.image + "," + format_metric(r.sigma255) + "," + format_metric(r.psnr_noisy) +
               "," + format_metric(r.psnr_denoised) + "," + format_metric(r.ssim_denoised) + "\n";
    };
    for (const auto& r : table.rows) append(r);
    if (!table.rows.empty()) append(table.mean);
    for (const auto& w : table.warnings) out += "# warning," + w + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Position inside the three-phase recipe: phase 0 trains with batch norm on
// the main schedule, the norm is then folded, and phase 1 fine-tunes the
// fused network at the lower schedule.
struct TrainProgress {
    int phase = 0;
    int epoch_in_phase = 0;
    AdamState adam;
    std::uint64_t rng_cursor = 0;  // epochs consumed from the seed stream
};

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_mean_loss;
    std::vector<double> val_psnr;
    TrainProgress progress;
};

template <typename T>
void save_train_checkpoint(const std::string& path, CFMNet<T>& net, const TrainConfig& cfg,
                           const TrainProgress& progress) {
    NamedTensorStore store;
    put_net(store, net);
    store.add_scalar("train/phase", static_cast<float>(progress.phase));
    store.add_scalar("train/epoch", static_cast<float>(progress.epoch_in_phase));
    store.add_u64("train/step", static_cast<std::uint64_t>(progress.adam.step));
    store.add_u64("train/rng_cursor", progress.rng_cursor);
    store.add_u64("train/digest", fnv1a64(train_config_digest_source(net.config(), cfg)));
    // Adam slabs are stored in double as split hi/lo floats to keep the
    // resumed trajectory bitwise identical.
    for (std::size_t i = 0; i < progress.adam.m.size(); ++i) {
        auto split = [](const std::vector<double>& src) {
            std::vector<float> hi(src.size()), lo(src.size());
            for (std::size_t t = 0; t < src.size(); ++t) {
                hi[t] = static_cast<float>(src[t]);
                lo[t] = static_cast<float>(src[t] - static_cast<double>(hi[t]));
            }
            return std::make_pair(hi, lo);
        };
        auto [mh, ml] = split(progress.adam.m[i]);
        auto [vh, vl] = split(progress.adam.v[i]);
        const std::string tag = std::to_string(i);
        const auto n = static_cast<std::uint32_t>(mh.size());
        store.add("adam/m_hi/" + tag, {n}, std::move(mh));
        store.add("adam/m_lo/" + tag, {n}, std::move(ml));
        store.add("adam/v_hi/" + tag, {n}, std::move(vh));
        store.add("adam/v_lo/" + tag, {n}, std::move(vl));
    }
    store.save(path);
}

template <typename T>
CFMNet<T> load_train_checkpoint(const std::string& path, const CFMNetConfig& net_cfg,
                                const TrainConfig& cfg, TrainProgress& progress_out) {
    NamedTensorStore store = NamedTensorStore::load(path);
    CFMNet<T> net = net_from_store<T>(store, net_cfg);
    if (store.u64("train/digest") != fnv1a64(train_config_digest_source(net_cfg, cfg))) {
        throw LoadError("checkpoint '" + path + "' was produced with a different configuration");
    }
    progress_out = TrainProgress{};
    progress_out.phase = static_cast<int>(store.scalar("train/phase"));
    progress_out.epoch_in_phase = static_cast<int>(store.scalar("train/epoch"));
    progress_out.rng_cursor = store.u64("train/rng_cursor");
    progress_out.adam.step = static_cast<std::int64_t>(store.u64("train/step"));
    for (std::size_t i = 0; store.has("adam/m_hi/" + std::to_string(i)); ++i) {
        auto join = [&](const std::string& hi_name, const std::string& lo_name) {
            const auto& hi = store.get(hi_name).data;
            const auto& lo = store.get(lo_name).data;
            std::vector<double> out(hi.size());
            for (std::size_t t = 0; t < hi.size(); ++t) {
                out[t] = static_cast<double>(hi[t]) + static_cast<double>(lo[t]);
            }
            return out;
        };
        const std::string tag = std::to_string(i);
        progress_out.adam.m.push_back(join("adam/m_hi/" + tag, "adam/m_lo/" + tag));
        progress_out.adam.v.push_back(join("adam/v_hi/" + tag, "adam/v_lo/" + tag));
    }
    return net;
}

// Mean PSNR of the net against fixed validation noise at sigma 25/255.
template <typename T>
double validation_psnr(CFMNet<T>& net, const Corpus& validation, std::uint64_t seed) {
    if (validation.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double sigma = 25.0 / 255.0;
    double acc = 0;
    for (std::size_t i = 0; i < validation.images.size(); ++i) {
        const Image& clean = validation.images[i];
        const NoiseLevelMap map = uniform_map(sigma, clean.height, clean.width);
        const Image noisy = add_noise(clean, map, CounterRng::derive(seed, 0x5a11dULL + i));
        acc += psnr(clean, denoise_image(net, noisy, map));
    }
    return acc / static_cast<double>(validation.images.size());
}

// Full three-phase recipe (Adam on the residual MSE objective, geometric
// schedule per phase, norm folding between phases). Deterministic under a
// fixed seed; checkpoints land in checkpoint_dir after every epoch.
// stop_after_epochs > 0 ends the run early (for resume scenarios / budgets).
template <typename T>
TrainResult train(CFMNet<T>& net, const Corpus& corpus, const TrainConfig& cfg,
                  const Corpus* validation = nullptr, std::ostream* log = nullptr,
                  const std::string& checkpoint_dir = "", TrainProgress start = {},
                  int stop_after_epochs = -1) {
    cfg.validate();
    if (corpus.empty()) throw DataError("train: empty corpus");

    TrainResult result;
    result.progress = std::move(start);
    TrainProgress& prog = result.progress;

    const std::int64_t steps_per_epoch = cfg.patches_per_epoch / cfg.batch_size;
    bool first_loss_seen = false;
    int epochs_run = 0;

    auto run_phase = [&](int phase, int epochs, double lr_hi, double lr_lo) {
        // The parameter list changes when the norm is folded, so each phase
        // re-enumerates it; the optimizer state in prog.adam matches it.
        auto params = net.parameters();
        for (int e = prog.epoch_in_phase; e < epochs; ++e) {
            if (stop_after_epochs >= 0 && epochs_run >= stop_after_epochs) return false;
            const double lr = lr_schedule(e, epochs, lr_hi, lr_lo);
            const std::uint64_t epoch_seed = CounterRng::derive(cfg.seed, prog.rng_cursor);
            double loss_acc = 0;

            for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
                auto batch = sample_patch_batch<T>(corpus, cfg,
                                                   CounterRng::derive(epoch_seed, static_cast<std::uint64_t>(s)));
                net.zero_grad();
                auto prediction = net.forward(batch.noisy, batch.noise_map, BatchNormMode::train);
                auto loss = mse_loss(prediction, batch.clean);
                const double loss_v = static_cast<double>(loss.value());
                if (!std::isfinite(loss_v)) {
                    if (!checkpoint_dir.empty()) {
                        save_train_checkpoint(checkpoint_dir + "/abort.ckpt", net, cfg, prog);
                    }
                    throw DomainError("train: loss became non-finite at phase " +
                                      std::to_string(phase) + " epoch " + std::to_string(e) +
                                      " step " + std::to_string(s));
                }
                if (!first_loss_seen) {
                    result.initial_loss = loss_v;
                    first_loss_seen = true;
                }
                loss.backward();
                adam_step(params, prog.adam, lr);
                loss_acc += loss_v;
                result.final_loss = loss_v;
                if (log) {
                    *log << phase << ":" << e << "," << s << "," << format_metric(lr) << ","
                         << format_metric(loss_v) << ",\n";
                }
            }

            result.epoch_mean_loss.push_back(loss_acc / static_cast<double>(steps_per_epoch));
            const double val =
                validation ? validation_psnr(net, *validation, cfg.seed) : std::numeric_limits<double>::quiet_NaN();
            result.val_psnr.push_back(val);
            if (log) {
                *log << phase << ":" << e << ",end," << format_metric(lr) << ","
                     << format_metric(result.epoch_mean_loss.back()) << ","
                     << (std::isnan(val) ? std::string() : format_metric(val)) << "\n";
            }

            ++prog.epoch_in_phase;
            ++prog.rng_cursor;
            ++epochs_run;
            if (!checkpoint_dir.empty()) {
                save_train_checkpoint(checkpoint_dir + "/latest.ckpt", net, cfg, prog);
            }
        }
        return true;
    };

    if (prog.phase == 0) {
        if (!run_phase(0, cfg.epochs_main, cfg.lr_start, cfg.lr_end_main)) return result;
        if (!net.fused()) net.fuse_batch_norm();
        prog.phase = 1;
        prog.epoch_in_phase = 0;
        prog.adam = AdamState{};  // folded params are new optimizer variables
        if (!checkpoint_dir.empty()) {
            save_train_checkpoint(checkpoint_dir + "/latest.ckpt", net, cfg, prog);
        }
    }
    if (prog.phase == 1 && cfg.epochs_finetune > 0) {
        run_phase(1, cfg.epochs_finetune, cfg.lr_end_main, cfg.lr_end_finetune);
    }
    return result;
}

}  // namespace cfm
