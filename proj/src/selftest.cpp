#include "cfm/selftest.hpp"

#include <cmath>
#include <sstream>

#include "cfm/gradcheck.hpp"
#include "cfm/net.hpp"
#include "cfm/noise.hpp"
#include "cfm/train.hpp"

namespace cfm {

namespace {

Tensor<double> random_d(Shape4 s, CounterRng& rng, bool requires_grad = false,
                        double scale = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(s.numel()));
    for (auto& v : d) v = scale * rng.normal();
    return Tensor<double>::from_data(s, std::move(d), requires_grad);
}

struct Check {
    SelftestResult& result;
    std::ostream& out;

    void record(const std::string& name, bool pass, const std::string& detail = "") {
        result.checks.emplace_back(name, pass);
        result.all_pass = result.all_pass && pass;
        if (pass) {
            out << "ok " << name << "\n";
        } else {
            out << "FAIL " << name << (detail.empty() ? "" : " ") << detail << "\n";
        }
    }
};

CFMNetConfig tiny_config() {
    CFMNetConfig cfg;
    cfg.in_channels = 1;
    cfg.scale_widths = {8, 16, 32};
    return cfg;
}

}  // namespace

SelftestResult run_selftest(std::ostream& out) {
    SelftestResult result;
    Check check{result, out};
    CounterRng rng(0xC0FFEE);

    // gradient checks, high precision
    {
        auto x = random_d(Shape4{1, 2, 6, 6}, rng, true, 0.5);
        auto p = make_conv<double>(3, 2, 3, 3, rng);
        auto target = random_d(Shape4{1, 3, 6, 6}, rng);
        auto f = [&]() { return mse_loss(conv2d(x, p), target); };
        auto report = grad_check<double>(f, {{"w", p.weight}, {"b", p.bias}, {"x", x}}, 1e-4,
                                         1e-4, rng);
        check.record("grad_check/conv2d", report.pass,
                     "max_rel_err=" + format_metric(report.max_rel_err));
    }
    {
        auto x = random_d(Shape4{1, 2, 4, 4}, rng, true, 0.5);
        auto p = make_conv<double>(3, 2, 2, 2, rng);
        auto target = random_d(Shape4{1, 3, 8, 8}, rng);
        auto f = [&]() { return mse_loss(transposed_conv2x2(x, p), target); };
        auto report = grad_check<double>(f, {{"w", p.weight}, {"b", p.bias}, {"x", x}}, 1e-4,
                                         1e-4, rng);
        check.record("grad_check/transposed_conv2x2", report.pass,
                     "max_rel_err=" + format_metric(report.max_rel_err));
    }
    {
        auto x = random_d(Shape4{2, 2, 4, 4}, rng, true);
        auto bn = make_batch_norm<double>(2);
        auto target = random_d(Shape4{2, 2, 4, 4}, rng);
        auto f = [&]() {
            auto rm = bn.running_mean;
            auto rv = bn.running_var;
            auto loss = mse_loss(batch_norm(x, bn, BatchNormMode::train), target);
            bn.running_mean = rm;
            bn.running_var = rv;
            return loss;
        };
        auto report = grad_check<double>(
            f, {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}}, 1e-4, 1e-4, rng);
        check.record("grad_check/batch_norm", report.pass,
                     "max_rel_err=" + format_metric(report.max_rel_err));
    }
    {
        auto x = random_d(Shape4{1, 2, 8, 8}, rng, true);
        auto target = random_d(Shape4{1, 2, 4, 4}, rng);
        auto f = [&]() { return mse_loss(max_pool2x2(relu(x)), target); };
        auto report = grad_check<double>(f, {{"x", x}}, 1e-5, 1e-4, rng);
        check.record("grad_check/max_pool_relu", report.pass,
                     "max_rel_err=" + format_metric(report.max_rel_err));
    }
    {
        CFMNet<double> net(tiny_config(), 7);
        auto y = random_d(Shape4{1, 1, 16, 16}, rng, false, 0.3);
        auto m = Tensor<double>::full(Shape4{1, 1, 16, 16}, 25.0 / 255.0);
        auto target = random_d(Shape4{1, 1, 16, 16}, rng, false, 0.3);
        auto f = [&]() {
            return mse_loss(net.forward(y, m, BatchNormMode::eval), target);
        };
        auto report = grad_check<double>(f, net.parameters(), 1e-4, 1e-4, rng, 100);
        check.record("grad_check/cfmnet_tiny", report.pass,
                     "max_rel_err=" + format_metric(report.max_rel_err) + " coords=" +
                         std::to_string(report.coords_checked));
    }

    // Input-concatenation equivalence and its negative control
    {
        auto y = random_d(Shape4{1, 1, 16, 16}, rng, false, 0.3);
        auto p = make_conv<double>(4, 2, 3, 3, rng);
        const double uniform_dev =
            first_layer_equivalence_check(p, y, 50.0 / 255.0).max_abs_deviation;
        auto variant = Tensor<double>::zeros(Shape4{1, 1, 16, 16});
        const NoiseLevelMap pm = peaks_map(50.0 / 255.0, 16, 16);
        for (std::int64_t t = 0; t < 256; ++t) variant.data()[t] = pm.values[static_cast<std::size_t>(t)];
        const double variant_dev =
            first_layer_equivalence_check_map(p, y, variant).max_abs_deviation;
        check.record("equivalence/eq2_eq3", uniform_dev < 1e-5 && variant_dev > 1e-3,
                     "uniform=" + format_metric(uniform_dev) +
                         " variant=" + format_metric(variant_dev));
    }

    // Norm fusion
    {
        CFMNet<float> net(tiny_config(), 11);
        CounterRng frng(13);
        for (int i = 0; i < 3; ++i) {  // populate running statistics
            std::vector<float> d(2 * 256);
            for (auto& v : d) v = static_cast<float>(0.3 * frng.normal());
            auto y = Tensor<float>::from_data(Shape4{2, 1, 16, 16}, std::move(d));
            auto m = Tensor<float>::full(Shape4{2, 1, 16, 16}, 0.1f);
            net.forward(y, m, BatchNormMode::train);
        }
        NoGradGuard no_grad;
        std::vector<Tensor<float>> ys, ms, before;
        for (int i = 0; i < 10; ++i) {
            std::vector<float> d(256);
            for (auto& v : d) v = static_cast<float>(0.3 * frng.normal());
            ys.push_back(Tensor<float>::from_data(Shape4{1, 1, 16, 16}, std::move(d)));
            ms.push_back(Tensor<float>::full(Shape4{1, 1, 16, 16},
                                             static_cast<float>(frng.uniform(0.0, 0.3))));
            before.push_back(net.forward(ys.back(), ms.back(), BatchNormMode::eval));
        }
        net.fuse_batch_norm();
        double worst = 0;
        for (int i = 0; i < 10; ++i) {
            auto after = net.forward(ys[static_cast<std::size_t>(i)], ms[static_cast<std::size_t>(i)],
                                     BatchNormMode::eval);
            for (std::int64_t t = 0; t < after.numel(); ++t) {
                worst = std::max(worst,
                                 std::abs(static_cast<double>(after.data()[static_cast<std::size_t>(t)]) -
                                          static_cast<double>(before[static_cast<std::size_t>(i)]
                                                                  .data()[static_cast<std::size_t>(t)])));
            }
        }
        check.record("fusion/bn_merge", worst < 1e-4, "max_abs=" + format_metric(worst));
    }

    // Residual identity
    {
        CFMNet<float> net(tiny_config(), 17);
        for (auto& v : net.tail_conv_weight().data()) v = 0.0f;
        for (auto& v : net.tail_conv_bias().data()) v = 0.0f;
        CounterRng irng(19);
        auto y = Tensor<float>::zeros(Shape4{1, 1, 32, 32});
        for (auto& v : y.data()) v = static_cast<float>(irng.uniform01());
        auto m = Tensor<float>::full(Shape4{1, 1, 32, 32}, 0.15f);
        NoGradGuard no_grad;
        auto x = net.forward(y, m, BatchNormMode::eval);
        bool identical = true;
        for (std::int64_t t = 0; t < x.numel(); ++t) {
            identical = identical && x.data()[static_cast<std::size_t>(t)] ==
                                         y.data()[static_cast<std::size_t>(t)];
        }
        check.record("identity/zero_tail", identical);
    }

    // Locality at the analytic receptive-field radius
    {
        CFMNetConfig cfg = tiny_config();
        cfg.cfm_per_position = 1;
        cfg.num_shifting_ops = 1;
        CFMNet<float> net(cfg, 23);
        const std::int64_t radius = receptive_field_radius(cfg);
        const std::int64_t size = ((2 * radius + 24) + 3) / 4 * 4;
        CounterRng prng(29);
        auto y = Tensor<float>::zeros(Shape4{1, 1, size, size});
        for (auto& v : y.data()) v = static_cast<float>(0.25 * prng.normal());
        auto m = Tensor<float>::full(Shape4{1, 1, size, size}, 0.12f);
        NoGradGuard no_grad;
        auto base = net.forward(y, m, BatchNormMode::eval);
        bool pass = true;
        for (int probe = 0; probe < 4 && pass; ++probe) {
            const std::int64_t pi = static_cast<std::int64_t>(prng.uniform_index(size));
            const std::int64_t pj = static_cast<std::int64_t>(prng.uniform_index(size));
            auto y2 = Tensor<float>::from_data(y.shape(),
                                               std::vector<float>(y.data().begin(), y.data().end()));
            y2.at(0, 0, pi, pj) += 0.5f;
            auto outp = net.forward(y2, m, BatchNormMode::eval);
            for (std::int64_t i = 0; i < size && pass; ++i) {
                for (std::int64_t j = 0; j < size; ++j) {
                    if (std::max(std::abs(i - pi), std::abs(j - pj)) > radius &&
                        base.at(0, 0, i, j) != outp.at(0, 0, i, j)) {
                        pass = false;
                        break;
                    }
                }
            }
        }
        check.record("locality/receptive_field", pass, "radius=" + std::to_string(radius));
    }

    // Noise statistics
    {
        const NoiseLevelMap map = uniform_map(50.0 / 255.0, 256, 256);
        const Image n = synthesize_noise(map, 1, 12345);
        double mean = 0;
        for (double v : n.data) mean += v;
        mean /= static_cast<double>(n.data.size());
        double m2 = 0, m3 = 0, m4 = 0;
        for (double v : n.data) {
            const double d = v - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m2 /= static_cast<double>(n.data.size());
        m3 /= static_cast<double>(n.data.size());
        m4 /= static_cast<double>(n.data.size());
        const double stddev = std::sqrt(m2);
        const double skew = m3 / std::pow(m2, 1.5);
        const double kurt = m4 / (m2 * m2) - 3.0;
        const bool pass = std::abs(stddev / (50.0 / 255.0) - 1.0) < 0.02 &&
                          std::abs(skew) < 0.05 && std::abs(kurt) < 0.1;
        check.record("noise/uniform_stats", pass,
                     "std=" + format_metric(stddev) + " skew=" + format_metric(skew) +
                         " kurt=" + format_metric(kurt));
    }
    {
        const double sigma = 50.0 / 255.0;
        const NoiseLevelMap map = peaks_map(sigma, 64, 64);
        double lo = 1e9, hi = -1e9;
        for (double v : map.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const bool pass = lo == 0.0 && hi == sigma &&
                          std::abs(peaks_function(0.0, 0.0) - 3.0 * std::exp(-1.0)) < 1e-9;
        check.record("noise/peaks_map", pass,
                     "min=" + format_metric(lo) + " max=" + format_metric(hi));
    }

    out << (result.all_pass ? "selftest: PASS" : "selftest: FAIL") << " ("
        << result.checks.size() << " checks)\n";
    return result;
}

}  // namespace cfm
