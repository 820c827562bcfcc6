#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cfm/errors.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

// Adam with the default setting: beta1 0.9, beta2 0.999, eps 1e-8, bias
// correction on both moments.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;  // first moments, one slab per parameter
    std::vector<std::vector<double>> v;  // second moments
};

template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState& state,
               double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<std::size_t>(params[i].second.numel()), 0.0);
            state.v[i].assign(static_cast<std::size_t>(params[i].second.numel()), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ConfigError("adam_step: state does not match the parameter list");
    }

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = params[i].second;
        if (!p.has_grad()) continue;  // untouched parameter: no update
        auto g = p.grad();
        auto d = p.data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t t = 0; t < d.size(); ++t) {
            const double gt = static_cast<double>(g[t]);
            if (!std::isfinite(gt)) {
                throw DomainError("adam_step: non-finite gradient in parameter '" +
                                  params[i].first + "'");
            }
            m[t] = state.beta1 * m[t] + (1.0 - state.beta1) * gt;
            v[t] = state.beta2 * v[t] + (1.0 - state.beta2) * gt * gt;
            const double mhat = m[t] / bc1;
            const double vhat = v[t] / bc2;
            d[t] = static_cast<T>(static_cast<double>(d[t]) -
                                  lr * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

// Geometric interpolation between the phase endpoints:
// lr(e) = lr_start * (lr_end / lr_start)^(e / (E-1)), so lr(0) = lr_start and
// lr(E-1) = lr_end exactly.
inline double lr_schedule(int epoch, int epochs_in_phase, double lr_start, double lr_end) {
    if (epoch < 0 || epoch >= epochs_in_phase) {
        throw DomainError("lr_schedule: epoch " + std::to_string(epoch) + " outside phase of " +
                          std::to_string(epochs_in_phase));
    }
    if (epochs_in_phase <= 1) return lr_start;
    if (epoch == 0) return lr_start;
    if (epoch == epochs_in_phase - 1) return lr_end;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs_in_phase - 1);
    return lr_start * std::pow(lr_end / lr_start, t);
}

struct TrainConfig {
    std::int64_t patch_size = 32;     // paper-scale value is 64
    std::int64_t batch_size = 8;
    std::int64_t patches_per_epoch = 2048;
    double sigma_min = 0.0;           // normalized units (sigma/255)
    double sigma_max = 75.0 / 255.0;
    int epochs_main = 4;              // paper-scale value is 75
    int epochs_finetune = 1;          // paper-scale value is 10
    double lr_start = 1e-4;
    double lr_end_main = 1e-6;
    double lr_end_finetune = 1e-7;
    bool augment_flip = true;
    bool augment_rotate = true;
    bool augment_rescale = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (patch_size < 8 || patch_size % 4 != 0) {
            throw ConfigError("TrainConfig: patch_size must be >= 8 and divisible by 4");
        }
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be positive");
        if (patches_per_epoch < batch_size) {
            throw ConfigError("TrainConfig: patches_per_epoch must cover at least one batch");
        }
        if (sigma_min < 0.0 || sigma_max < sigma_min) {
            throw ConfigError("TrainConfig: need 0 <= sigma_min <= sigma_max");
        }
        if (epochs_main < 1 || epochs_finetune < 0) {
            throw ConfigError("TrainConfig: bad epoch counts");
        }
        if (!(lr_start > lr_end_main && lr_end_main > lr_end_finetune && lr_end_finetune > 0)) {
            throw ConfigError("TrainConfig: learning rates must strictly decrease across phases");
        }
    }
};

}  // namespace cfm
