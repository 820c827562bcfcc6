#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "cfm/data.hpp"
#include "cfm/metrics.hpp"
#include "cfm/train.hpp"
#include "oracles.hpp"

using cfm::CounterRng;
using cfm::Image;
using cfm::Shape4;
using cfm::Tensor;

namespace {

// Direct per-window SSIM, non-separable, as an independent reference.
double ssim_reference(const Image& a, const Image& b) {
    const int win = 11;
    std::vector<double> g(static_cast<std::size_t>(win * win));
    double gsum = 0;
    for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
            const double du = u - 5.0, dv = v - 5.0;
            g[static_cast<std::size_t>(u * win + v)] = std::exp(-(du * du + dv * dv) / (2.0 * 1.5 * 1.5));
            gsum += g[static_cast<std::size_t>(u * win + v)];
        }
    for (auto& w : g) w /= gsum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double channel_acc = 0;
    for (std::int64_t c = 0; c < a.channels; ++c) {
        double acc = 0;
        std::int64_t count = 0;
        for (std::int64_t i = 0; i + win <= a.height; ++i) {
            for (std::int64_t j = 0; j + win <= a.width; ++j) {
                double mx = 0, my = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        const double w = g[static_cast<std::size_t>(u * win + v)];
                        mx += w * a.at(c, i + u, j + v);
                        my += w * b.at(c, i + u, j + v);
                    }
                double vx = 0, vy = 0, cov = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        const double w = g[static_cast<std::size_t>(u * win + v)];
                        const double dx = a.at(c, i + u, j + v) - mx;
                        const double dy = b.at(c, i + u, j + v) - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                       ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
        channel_acc += acc / static_cast<double>(count);
    }
    return channel_acc / static_cast<double>(a.channels);
}

cfm::Corpus synth_corpus(int count, std::int64_t size, std::uint64_t seed) {
    cfm::Corpus c;
    for (int i = 0; i < count; ++i) {
        c.images.push_back(cfm::synth_image(CounterRng::derive(seed, static_cast<std::uint64_t>(i)), 1, size, size));
        c.names.push_back("synth_" + std::to_string(i));
    }
    return c;
}

cfm::CFMNetConfig tiny_config() {
    cfm::CFMNetConfig cfg;
    cfg.in_channels = 1;
    cfg.scale_widths = {8, 16, 32};
    return cfg;
}

}  // namespace

TEST_CASE("adam first step equals the learning rate") {
    auto theta = Tensor<double>::zeros(Shape4{1, 1, 1, 1}, true);
    theta.ensure_grad();
    theta.grad()[0] = 1.0;
    std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
    cfm::AdamState state;
    cfm::adam_step(params, state, 0.1);
    // bias-corrected first step: -lr * g / (|g| + eps)
    CHECK(theta.data()[0] == doctest::Approx(-0.1).epsilon(1e-7));
    CHECK(state.step == 1);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    auto theta = Tensor<double>::from_data(Shape4{1, 1, 1, 2}, {0.5, -0.25}, true);
    theta.zero_grad();
    std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
    cfm::AdamState state;
    cfm::adam_step(params, state, 0.1);
    cfm::adam_step(params, state, 0.1);
    CHECK(theta.data()[0] == 0.5);
    CHECK(theta.data()[1] == -0.25);
    CHECK(state.step == 2);
}

TEST_CASE("adam is deterministic over 100 steps") {
    auto run = [] {
        CounterRng rng(5);
        auto theta = oracles::random_tensor<double>(Shape4{1, 1, 4, 4}, rng, true);
        std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
        cfm::AdamState state;
        for (int s = 0; s < 100; ++s) {
            theta.zero_grad();
            for (std::int64_t t = 0; t < 16; ++t) theta.grad()[t] = rng.normal();
            cfm::adam_step(params, state, 1e-2);
        }
        return std::vector<double>(theta.data().begin(), theta.data().end());
    };
    CHECK(run() == run());
}

TEST_CASE("adam aborts on a non-finite gradient naming the parameter") {
    auto theta = Tensor<double>::zeros(Shape4{1, 1, 1, 1}, true);
    theta.ensure_grad();
    theta.grad()[0] = std::nan("");
    std::vector<std::pair<std::string, Tensor<double>>> params{{"img.head.w", theta}};
    cfm::AdamState state;
    try {
        cfm::adam_step(params, state, 0.1);
        FAIL("expected DomainError");
    } catch (const cfm::DomainError& e) {
        CHECK(std::string(e.what()).find("img.head.w") != std::string::npos);
    }
}

TEST_CASE("learning rate schedule endpoints are exact") {
    CHECK(cfm::lr_schedule(0, 75, 1e-4, 1e-6) == 1e-4);
    CHECK(std::abs(cfm::lr_schedule(74, 75, 1e-4, 1e-6) / 1e-6 - 1.0) < 1e-12);
    CHECK(cfm::lr_schedule(0, 2, 1e-4, 1e-6) == 1e-4);
    CHECK(cfm::lr_schedule(1, 2, 1e-4, 1e-6) == 1e-6);
    CHECK(cfm::lr_schedule(0, 1, 1e-4, 1e-6) == 1e-4);
    // geometric: midpoint of a two-decade decay is one decade down
    CHECK(cfm::lr_schedule(37, 75, 1e-4, 1e-6) == doctest::Approx(1e-5).epsilon(1e-10));
    CHECK_THROWS_AS(cfm::lr_schedule(5, 5, 1e-4, 1e-6), cfm::DomainError);
}

TEST_CASE("patch sampling is reproducible and respects the sigma range") {
    auto corpus = synth_corpus(4, 64, 11);
    cfm::TrainConfig cfg;
    cfg.patch_size = 32;
    cfg.batch_size = 4;
    cfg.augment_flip = false;
    cfg.augment_rotate = false;

    auto a = cfm::sample_patch_batch<float>(corpus, cfg, 123);
    auto b = cfm::sample_patch_batch<float>(corpus, cfg, 123);
    CHECK(oracles::max_abs_diff(a.noisy, b.noisy) == 0.0);
    CHECK(oracles::max_abs_diff(a.clean, b.clean) == 0.0);

    SUBCASE("collapsed sigma range pins every map entry") {
        cfg.sigma_min = cfg.sigma_max = 25.0 / 255.0;
        auto batch = cfm::sample_patch_batch<float>(corpus, cfg, 9);
        for (float v : batch.noise_map.data()) CHECK(v == doctest::Approx(25.0f / 255.0f));
    }

    SUBCASE("sampled sigmas are uniform over the range") {
        cfg.sigma_min = 0.0;
        cfg.sigma_max = 75.0 / 255.0;
        std::vector<double> sigmas;
        for (int i = 0; i < 10000; ++i) {
            auto s = cfm::sample_patch(corpus, cfg, CounterRng::derive(77, static_cast<std::uint64_t>(i)));
            sigmas.push_back(s.sigma / cfg.sigma_max);
        }
        std::sort(sigmas.begin(), sigmas.end());
        double ks = 0;  // Kolmogorov-Smirnov statistic against U(0,1)
        for (std::size_t i = 0; i < sigmas.size(); ++i) {
            const double emp_hi = static_cast<double>(i + 1) / 10000.0;
            const double emp_lo = static_cast<double>(i) / 10000.0;
            ks = std::max({ks, std::abs(emp_hi - sigmas[i]), std::abs(sigmas[i] - emp_lo)});
        }
        CHECK(ks < 0.02);
    }

    SUBCASE("augmentations preserve the value set") {
        cfg.augment_flip = true;
        cfg.augment_rotate = true;
        cfg.augment_rescale = true;
        auto s = cfm::sample_patch(corpus, cfg, 5);
        CHECK(s.clean.height == cfg.patch_size);
        CHECK(s.clean.width == cfg.patch_size);
        for (double v : s.clean.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("psnr values and properties") {
    Image x(1, 8, 8);
    for (auto& v : x.data) v = 0.5;
    CHECK(std::isinf(cfm::psnr(x, x)));

    Image y = x;
    for (auto& v : y.data) v = 0.25;
    CHECK(cfm::psnr(x, y) == doctest::Approx(12.0412).epsilon(1e-5));
    CHECK(cfm::psnr(x, y) == cfm::psnr(y, x));

    // strictly decreasing with added noise level
    Image base = cfm::synth_image(3, 1, 64, 64);
    double prev = 1e9;
    for (double s255 : {5.0, 10.0, 25.0}) {
        auto noisy = cfm::add_noise(base, cfm::uniform_map(s255 / 255.0, 64, 64), 17);
        const double p = cfm::psnr(base, noisy);
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim values and the independent reference") {
    Image x = cfm::synth_image(5, 1, 32, 32);
    CHECK(cfm::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));

    // anticorrelated structure: checkerboard vs its inverse
    Image cb(1, 16, 16), inv(1, 16, 16);
    for (std::int64_t i = 0; i < 16; ++i)
        for (std::int64_t j = 0; j < 16; ++j) {
            cb.at(0, i, j) = (i + j) % 2 ? 1.0 : 0.0;
            inv.at(0, i, j) = 1.0 - cb.at(0, i, j);
        }
    CHECK(cfm::ssim(cb, inv) <= 0.0);

    CounterRng rng(23);
    for (int trial = 0; trial < 3; ++trial) {
        Image a(1, 32, 32), b(1, 32, 32);
        for (auto& v : a.data) v = rng.uniform01();
        for (std::size_t t = 0; t < b.data.size(); ++t) {
            b.data[t] = std::clamp(a.data[t] + 0.1 * rng.normal(), 0.0, 1.0);
        }
        CHECK(std::abs(cfm::ssim(a, b) - ssim_reference(a, b)) < 1e-6);
    }

    Image tiny(1, 8, 8);
    CHECK_THROWS_AS(cfm::ssim(tiny, tiny), cfm::ShapeError);
}

TEST_CASE("loss quadruples when residuals double") {
    CounterRng rng(29);
    auto pred = oracles::random_tensor<float>(Shape4{2, 1, 8, 8}, rng);
    auto target = Tensor<float>::zeros(Shape4{2, 1, 8, 8});
    auto doubled = Tensor<float>::zeros(Shape4{2, 1, 8, 8});
    for (std::int64_t t = 0; t < pred.numel(); ++t) doubled.data()[t] = 2.0f * pred.data()[t];
    const float l1 = cfm::mse_loss(pred, target).value();
    const float l4 = cfm::mse_loss(doubled, target).value();
    CHECK(l4 == 4.0f * l1);
}

TEST_CASE("short training run decreases the loss") {
    auto corpus = synth_corpus(4, 64, 41);
    auto cfg = tiny_config();
    cfm::CFMNet<float> net(cfg, 3);

    cfm::TrainConfig tcfg;
    tcfg.patch_size = 16;
    tcfg.batch_size = 4;
    tcfg.patches_per_epoch = 64;
    tcfg.epochs_main = 3;
    tcfg.epochs_finetune = 1;
    tcfg.lr_start = 1e-3;
    tcfg.lr_end_main = 3e-4;
    tcfg.lr_end_finetune = 1e-4;
    tcfg.seed = 12;

    auto result = cfm::train(net, corpus, tcfg);
    CHECK(result.epoch_mean_loss.size() == 4);
    CHECK(result.epoch_mean_loss.back() < result.epoch_mean_loss.front());
    CHECK(net.fused());
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run bitwise") {
    auto corpus = synth_corpus(3, 48, 51);
    auto cfg = tiny_config();

    cfm::TrainConfig tcfg;
    tcfg.patch_size = 16;
    tcfg.batch_size = 2;
    tcfg.patches_per_epoch = 16;
    tcfg.epochs_main = 3;
    tcfg.epochs_finetune = 1;
    tcfg.lr_start = 1e-3;
    tcfg.lr_end_main = 3e-4;
    tcfg.lr_end_finetune = 1e-4;
    tcfg.seed = 99;

    namespace fs = std::filesystem;
    const std::string dir = "/tmp/cfm_resume_test";
    fs::remove_all(dir);
    fs::create_directories(dir + "/a");
    fs::create_directories(dir + "/b");

    // uninterrupted
    cfm::CFMNet<float> net_a(cfg, tcfg.seed);
    cfm::train(net_a, corpus, tcfg, nullptr, nullptr, dir + "/a");

    // interrupted after 2 epochs, then resumed
    cfm::CFMNet<float> net_b(cfg, tcfg.seed);
    cfm::train(net_b, corpus, tcfg, nullptr, nullptr, dir + "/b", {}, 2);
    cfm::TrainProgress progress;
    cfm::CFMNet<float> net_c = cfm::load_train_checkpoint<float>(dir + "/b/latest.ckpt", cfg,
                                                                 tcfg, progress);
    cfm::train(net_c, corpus, tcfg, nullptr, nullptr, dir + "/b", progress);

    auto pa = net_a.parameters();
    auto pc = net_c.parameters();
    REQUIRE(pa.size() == pc.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto da = pa[i].second.data();
        const auto dc = pc[i].second.data();
        bool equal = true;
        for (std::size_t t = 0; t < da.size(); ++t) equal = equal && da[t] == dc[t];
        CHECK_MESSAGE(equal, pa[i].first);
    }
    fs::remove_all(dir);
}

TEST_CASE("checkpoint rejects a mismatched train config") {
    auto corpus = synth_corpus(2, 32, 61);
    auto cfg = tiny_config();
    cfm::TrainConfig tcfg;
    tcfg.patch_size = 16;
    tcfg.batch_size = 2;
    tcfg.patches_per_epoch = 4;
    tcfg.epochs_main = 1;
    tcfg.epochs_finetune = 0;
    tcfg.lr_start = 1e-3;
    tcfg.lr_end_main = 3e-4;
    tcfg.lr_end_finetune = 1e-4;

    const std::string dir = "/tmp/cfm_ckpt_digest";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    cfm::CFMNet<float> net(cfg, 1);
    cfm::train(net, corpus, tcfg, nullptr, nullptr, dir);

    cfm::TrainConfig other = tcfg;
    other.lr_start = 5e-4;
    cfm::TrainProgress progress;
    CHECK_THROWS_AS(
        cfm::load_train_checkpoint<float>(dir + "/latest.ckpt", cfg, other, progress),
        cfm::LoadError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate produces deterministic per-image rows and a mean row") {
    auto cfg = tiny_config();
    cfm::CFMNet<float> net(cfg, 9);
    auto testset = synth_corpus(2, 32, 71);
    testset.names = {"a.pgm", "b.pgm"};

    auto t1 = cfm::evaluate(net, testset, {15.0, 50.0}, cfm::MapKind::uniform, 5);
    auto t2 = cfm::evaluate(net, testset, {15.0, 50.0}, cfm::MapKind::uniform, 5);
    REQUIRE(t1.rows.size() == 4);
    CHECK(cfm::to_csv(t1) == cfm::to_csv(t2));
    CHECK(t1.mean.image == "mean");

    // residual-identity baseline: zero tail means output == noisy input
    cfm::CFMNet<float> idnet(cfg, 10);
    for (auto& v : idnet.tail_conv_weight().data()) v = 0.0f;
    for (auto& v : idnet.tail_conv_bias().data()) v = 0.0f;
    auto t3 = cfm::evaluate(idnet, testset, {25.0}, cfm::MapKind::uniform, 5);
    for (const auto& row : t3.rows) {
        CHECK(row.psnr_denoised == doctest::Approx(row.psnr_noisy).epsilon(1e-6));
    }

    // peaks maps run through the same interface without retraining
    auto t4 = cfm::evaluate(net, testset, {50.0}, cfm::MapKind::peaks, 5);
    CHECK(t4.rows.size() == 2);
}

TEST_CASE("csv numeric fields round-trip at printed precision") {
    for (double v : {12.0412004, 0.816234567, 33.3333333, 1.0 / 3.0}) {
        const std::string s = cfm::format_metric(v);
        const double back = std::stod(s);
        CHECK(std::abs(back - v) <= 1e-9 * std::max(1.0, std::abs(v)));
    }
    CHECK(cfm::format_metric(std::numeric_limits<double>::infinity()) == "inf");
}
