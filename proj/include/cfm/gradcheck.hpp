#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

struct GradCheckReport {
    bool pass = false;
    bool finite = true;          // false if any probe produced NaN/Inf
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
    std::string worst_coord;     // "<tensor>[i]" of the worst coordinate
    std::string note;
};

// Central-difference verification of reverse-mode gradients.
//
// f() must rebuild and evaluate the recorded scalar from the current values
// of the watched leaf tensors. When total_coords > 0, that many coordinates
// are sampled (with replacement) across the concatenated parameter space;
// otherwise every coordinate is probed. Relative error uses
// |a - n| / max(|a|, |n|, 1e-6). Intended for double-precision tensors:
// central differences at step ~1e-4 are unreliable in single precision.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           std::vector<std::pair<std::string, Tensor<T>>> watched, double step,
                           double tolerance, CounterRng& rng, std::int64_t total_coords = 0) {
    GradCheckReport report;

    for (auto& [name, t] : watched) t.zero_grad();
    Tensor<T> loss = f();
    if (!std::isfinite(static_cast<double>(loss.value()))) {
        report.finite = false;
        report.note = "loss not finite at the base point";
        return report;
    }
    loss.backward();

    std::vector<std::vector<T>> analytic;
    analytic.reserve(watched.size());
    for (auto& [name, t] : watched) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), T(0));
        }
    }

    std::int64_t total = 0;
    for (auto& [name, t] : watched) total += t.numel();

    std::vector<std::pair<std::size_t, std::int64_t>> coords;  // (watched idx, flat idx)
    if (total_coords > 0 && total_coords < total) {
        for (std::int64_t s = 0; s < total_coords; ++s) {
            std::int64_t flat = static_cast<std::int64_t>(rng.uniform_index(
                static_cast<std::uint64_t>(total)));
            for (std::size_t wi = 0; wi < watched.size(); ++wi) {
                const std::int64_t n = watched[wi].second.numel();
                if (flat < n) {
                    coords.emplace_back(wi, flat);
                    break;
                }
                flat -= n;
            }
        }
    } else {
        for (std::size_t wi = 0; wi < watched.size(); ++wi) {
            for (std::int64_t i = 0; i < watched[wi].second.numel(); ++i) coords.emplace_back(wi, i);
        }
    }

    NoGradGuard no_grad;  // probes only need values
    for (const auto& [wi, idx] : coords) {
        Tensor<T>& t = watched[wi].second;
        T* slot = &t.data()[static_cast<std::size_t>(idx)];
        const T saved = *slot;

        *slot = saved + static_cast<T>(step);
        const double up = static_cast<double>(f().value());
        *slot = saved - static_cast<T>(step);
        const double down = static_cast<double>(f().value());
        *slot = saved;

        if (!std::isfinite(up) || !std::isfinite(down)) {
            report.finite = false;
            report.note = "non-finite value while probing " + watched[wi].first;
            return report;
        }

        const double numeric = (up - down) / (2.0 * step);
        const double analytic_v = static_cast<double>(analytic[wi][static_cast<std::size_t>(idx)]);
        const double denom = std::max({std::abs(numeric), std::abs(analytic_v), 1e-6});
        const double rel = std::abs(numeric - analytic_v) / denom;
        ++report.coords_checked;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_coord = watched[wi].first + "[" + std::to_string(idx) + "]";
        }
    }

    report.pass = report.finite && report.max_rel_err < tolerance;
    return report;
}

}  // namespace cfm
