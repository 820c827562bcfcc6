#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cfm/gradcheck.hpp"
#include "cfm/ops.hpp"
#include "cfm/tensor.hpp"
#include "oracles.hpp"

using cfm::BatchNormMode;
using cfm::CounterRng;
using cfm::Padding;
using cfm::Shape4;
using cfm::Tensor;

namespace {

template <typename T>
cfm::ConvParams<T> conv_params(Shape4 ws, std::vector<T> w, std::vector<T> b) {
    cfm::ConvParams<T> p;
    p.weight = Tensor<T>::from_data(ws, std::move(w), true);
    p.bias = Tensor<T>::from_data(Shape4{ws.n, 1, 1, 1}, std::move(b), true);
    return p;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces input") {
    CounterRng rng(7);
    auto x = oracles::random_tensor<double>(Shape4{1, 1, 5, 5}, rng);
    std::vector<double> w(9, 0.0);
    w[4] = 1.0;  // center
    auto p = conv_params<double>(Shape4{1, 1, 3, 3}, w, {0.0});
    auto y = cfm::conv2d(x, p, Padding::same);
    CHECK(oracles::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d all-ones valid padding sums the field") {
    auto x = Tensor<double>::full(Shape4{1, 1, 4, 4}, 1.0);
    auto p = conv_params<double>(Shape4{1, 1, 3, 3}, std::vector<double>(9, 1.0), {0.0});
    auto y = cfm::conv2d(x, p, Padding::valid);
    CHECK(y.shape() == Shape4{1, 1, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    CounterRng rng(11);
    auto x = oracles::random_tensor<double>(Shape4{2, 3, 8, 8}, rng);
    auto w = oracles::random_tensor<double>(Shape4{4, 3, 3, 3}, rng);
    auto b = oracles::random_tensor<double>(Shape4{4, 1, 1, 1}, rng);
    cfm::ConvParams<double> p{w, b};
    for (auto pad : {Padding::same, Padding::valid}) {
        auto got = cfm::conv2d(x, p, pad);
        auto want = oracles::conv2d_loops(x, w, b, pad == Padding::same);
        CHECK(oracles::max_abs_diff(got, want) < 1e-6);
    }
}

TEST_CASE("conv2d is linear in its input when bias is zero") {
    CounterRng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = oracles::random_tensor<double>(Shape4{1, 2, 6, 6}, rng);
        auto y = oracles::random_tensor<double>(Shape4{1, 2, 6, 6}, rng);
        auto w = oracles::random_tensor<double>(Shape4{3, 2, 3, 3}, rng);
        cfm::ConvParams<double> p{w, Tensor<double>::zeros(Shape4{3, 1, 1, 1})};
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);

        auto mix = Tensor<double>::zeros(Shape4{1, 2, 6, 6});
        for (std::int64_t t = 0; t < mix.numel(); ++t)
            mix.data()[t] = a * x.data()[t] + b * y.data()[t];

        auto lhs = cfm::conv2d(mix, p);
        auto cx = cfm::conv2d(x, p);
        auto cy = cfm::conv2d(y, p);
        double worst = 0;
        for (std::int64_t t = 0; t < lhs.numel(); ++t) {
            worst = std::max(worst,
                             std::abs(lhs.data()[t] - (a * cx.data()[t] + b * cy.data()[t])));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("conv2d rejects bad shapes") {
    CounterRng rng(3);
    auto x = oracles::random_tensor<double>(Shape4{1, 2, 4, 4}, rng);
    auto p3 = conv_params<double>(Shape4{1, 3, 3, 3}, std::vector<double>(27, 0.0), {0.0});
    CHECK_THROWS_AS(cfm::conv2d(x, p3), cfm::ShapeError);

    auto tiny = oracles::random_tensor<double>(Shape4{1, 1, 2, 2}, rng);
    auto p1 = conv_params<double>(Shape4{1, 1, 3, 3}, std::vector<double>(9, 0.0), {0.0});
    CHECK_THROWS_AS(cfm::conv2d(tiny, p1, Padding::valid), cfm::ShapeError);
}

TEST_CASE("transposed_conv2x2 replicates into disjoint blocks") {
    auto x = Tensor<double>::from_data(Shape4{1, 1, 2, 2}, {1, 2, 3, 4});
    auto p = conv_params<double>(Shape4{1, 1, 2, 2}, std::vector<double>(4, 1.0), {0.0});
    auto y = cfm::transposed_conv2x2(x, p);
    REQUIRE(y.shape() == Shape4{1, 1, 4, 4});
    const double want[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(y.at(0, 0, i, j) == want[i][j]);
}

TEST_CASE("transposed_conv2x2 on zero input broadcasts the bias") {
    auto x = Tensor<double>::zeros(Shape4{1, 2, 3, 3});
    CounterRng rng(5);
    auto p = cfm::make_conv<double>(3, 2, 2, 2, rng);
    p.bias.data()[0] = 0.5;
    p.bias.data()[1] = -1.0;
    p.bias.data()[2] = 2.0;
    auto y = cfm::transposed_conv2x2(x, p);
    for (std::int64_t k = 0; k < 3; ++k)
        for (std::int64_t i = 0; i < 6; ++i)
            for (std::int64_t j = 0; j < 6; ++j) CHECK(y.at(0, k, i, j) == p.bias.data()[k]);
}

TEST_CASE("transposed_conv2x2 is the adjoint of the stride-2 forward conv") {
    CounterRng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = oracles::random_tensor<double>(Shape4{2, 3, 4, 5}, rng);
        auto w = oracles::random_tensor<double>(Shape4{4, 3, 2, 2}, rng);
        cfm::ConvParams<double> p{w, Tensor<double>::zeros(Shape4{4, 1, 1, 1})};
        auto up = cfm::transposed_conv2x2(x, p);
        auto y = oracles::random_tensor<double>(up.shape(), rng);
        const double lhs = oracles::dot(up, y);
        const double rhs = oracles::dot(x, oracles::conv2x2_stride2_adjoint(y, w));
        CHECK(std::abs(lhs - rhs) < 1e-6 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("transposed_conv2x2 rejects non-2x2 kernels") {
    auto x = Tensor<double>::zeros(Shape4{1, 1, 2, 2});
    auto p = conv_params<double>(Shape4{1, 1, 3, 3}, std::vector<double>(9, 0.0), {0.0});
    CHECK_THROWS_AS(cfm::transposed_conv2x2(x, p), cfm::ConfigError);
}

TEST_CASE("max_pool2x2 basics and tie-break") {
    auto x = Tensor<double>::from_data(Shape4{1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = cfm::max_pool2x2(x);
    CHECK(y.value() == 4.0);

    // Constant input: every window ties; gradient goes to the first window
    // element in row-major order, exactly one unit per window.
    auto c = Tensor<double>::full(Shape4{1, 1, 4, 4}, 3.25, true);
    auto pooled = cfm::max_pool2x2(c);
    for (double v : pooled.data()) CHECK(v == 3.25);
    auto loss = cfm::sum(pooled);
    loss.backward();
    for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j) {
            const double want = (i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0;
            CHECK(c.grad()[i * 4 + j] == want);
        }
}

TEST_CASE("max_pool2x2 matches the windowed max oracle") {
    CounterRng rng(23);
    auto x = oracles::random_tensor<double>(Shape4{1, 1, 8, 8}, rng);
    auto got = cfm::max_pool2x2(x);
    auto want = oracles::max_pool2x2_loops(x);
    CHECK(oracles::max_abs_diff(got, want) == 0.0);
}

TEST_CASE("max_pool2x2 rejects odd dimensions") {
    CHECK_THROWS_AS(cfm::max_pool2x2(Tensor<double>::zeros(Shape4{1, 1, 3, 4})), cfm::ShapeError);
    CHECK_THROWS_AS(cfm::max_pool2x2(Tensor<double>::zeros(Shape4{1, 1, 4, 5})), cfm::ShapeError);
}

TEST_CASE("max_pool2x2 backward preserves total gradient mass") {
    CounterRng rng(29);
    for (int trial = 0; trial < 8; ++trial) {
        auto x = oracles::random_tensor<double>(Shape4{2, 3, 6, 6}, rng, true);
        auto pooled = cfm::max_pool2x2(x);
        auto upstream = oracles::random_tensor<double>(pooled.shape(), rng);
        auto loss = cfm::sum(cfm::mul(pooled, upstream));
        loss.backward();
        double up_sum = 0, routed = 0;
        for (double v : upstream.data()) up_sum += v;
        for (double v : x.grad()) routed += v;
        CHECK(routed == doctest::Approx(up_sum).epsilon(1e-12));
    }
}

TEST_CASE("relu forward and gradient") {
    auto x = Tensor<double>::from_data(Shape4{1, 1, 1, 3}, {-1, 0, 2}, true);
    auto y = cfm::relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);

    auto neg = Tensor<double>::full(Shape4{1, 2, 3, 3}, -0.5, true);
    auto yn = cfm::relu(neg);
    for (double v : yn.data()) CHECK(v == 0.0);
    cfm::sum(yn).backward();
    for (double v : neg.grad()) CHECK(v == 0.0);
}

TEST_CASE("relu gradient matches finite differences away from zero") {
    CounterRng rng(31);
    auto x = oracles::random_tensor<double>(Shape4{1, 2, 4, 4}, rng, true);
    // keep every coordinate away from the kink
    for (auto& v : x.data())
        if (std::abs(v) < 0.05) v += 0.2;
    auto f = [&]() { return cfm::sum(cfm::relu(x)); };
    auto report = cfm::grad_check<double>(f, {{"x", x}}, 1e-6, 1e-6, rng);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("concat_channels keeps slices intact and splits gradient") {
    auto a = Tensor<double>::from_data(Shape4{1, 1, 2, 2}, {1, 2, 3, 4}, true);
    auto b = Tensor<double>::from_data(Shape4{1, 1, 2, 2}, {5, 6, 7, 8}, true);
    auto y = cfm::concat_channels(a, b);
    REQUIRE(y.shape() == Shape4{1, 2, 2, 2});
    CHECK(y.at(0, 0, 1, 1) == 4);
    CHECK(y.at(0, 1, 0, 0) == 5);

    cfm::sum(y).backward();
    for (double v : a.grad()) CHECK(v == 1.0);
    for (double v : b.grad()) CHECK(v == 1.0);
}

TEST_CASE("concat_channels with an empty tensor is the identity") {
    CounterRng rng(37);
    auto x = oracles::random_tensor<double>(Shape4{2, 3, 4, 4}, rng);
    auto empty = Tensor<double>::zeros(Shape4{2, 0, 4, 4});
    auto y = cfm::concat_channels(x, empty);
    CHECK(y.shape() == x.shape());
    CHECK(oracles::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("concat_channels rejects mismatched spatial dims") {
    auto a = Tensor<double>::zeros(Shape4{1, 1, 2, 2});
    auto b = Tensor<double>::zeros(Shape4{1, 1, 2, 3});
    CHECK_THROWS_AS(cfm::concat_channels(a, b), cfm::ShapeError);
}

TEST_CASE("batch_norm train mode normalizes per channel") {
    CounterRng rng(41);
    auto x = oracles::random_tensor<double>(Shape4{4, 3, 8, 8}, rng, false, 2.5);
    for (auto& v : x.data()) v += 1.3;
    auto bn = cfm::make_batch_norm<double>(3);
    auto y = cfm::batch_norm(x, bn, BatchNormMode::train);

    const std::int64_t plane = 64, N = 4;
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t t = 0; t < plane; ++t) mean += y.data()[(n * 3 + c) * plane + t];
        mean /= static_cast<double>(N * plane);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t t = 0; t < plane; ++t) {
                const double d = y.data()[(n * 3 + c) * plane + t] - mean;
                var += d * d;
            }
        var /= static_cast<double>(N * plane);
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("batch_norm applies gamma and beta") {
    CounterRng rng(43);
    // already-normalized input
    const std::int64_t M = 512;
    std::vector<double> d(M);
    double mean = 0;
    for (auto& v : d) {
        v = rng.normal();
        mean += v;
    }
    mean /= M;
    double var = 0;
    for (auto& v : d) {
        v -= mean;
        var += v * v;
    }
    var /= M;
    for (auto& v : d) v /= std::sqrt(var);

    auto x = Tensor<double>::from_data(Shape4{1, 1, 16, 32}, std::move(d));
    auto bn = cfm::make_batch_norm<double>(1);
    bn.gamma.data()[0] = 2.0;
    bn.beta.data()[0] = 3.0;
    auto y = cfm::batch_norm(x, bn, BatchNormMode::train);

    auto m = oracles::moments(std::vector<double>(y.data().begin(), y.data().end()));
    CHECK(std::abs(m.mean - 3.0) < 1e-5);
    CHECK(std::abs(m.stddev - 2.0) < 1e-4);
}

TEST_CASE("batch_norm eval mode uses running statistics") {
    auto bn = cfm::make_batch_norm<double>(1);
    bn.running_mean[0] = 2.0;
    bn.running_var[0] = 4.0;
    auto x = Tensor<double>::full(Shape4{1, 1, 2, 2}, 6.0);
    auto y = cfm::batch_norm(x, bn, BatchNormMode::eval);
    // (6-2)/sqrt(4+eps) ~ 2
    for (double v : y.data()) CHECK(v == doctest::Approx(2.0).epsilon(1e-5));
}

TEST_CASE("batch_norm survives a zero-variance channel") {
    auto x = Tensor<double>::full(Shape4{1, 1, 4, 4}, 7.0);
    auto bn = cfm::make_batch_norm<double>(1);
    auto y = cfm::batch_norm(x, bn, BatchNormMode::train);
    CHECK(cfm::all_finite(y));
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("batch_norm gradients match finite differences") {
    CounterRng rng(47);
    auto x = oracles::random_tensor<double>(Shape4{2, 2, 4, 4}, rng, true);
    auto target = oracles::random_tensor<double>(Shape4{2, 2, 4, 4}, rng);
    auto bn = cfm::make_batch_norm<double>(2);
    // non-trivial gamma/beta
    bn.gamma.data()[0] = 1.4;
    bn.gamma.data()[1] = 0.7;
    bn.beta.data()[1] = -0.3;

    auto f = [&]() {
        auto saved_mean = bn.running_mean;  // keep probes side-effect free
        auto saved_var = bn.running_var;
        auto y = cfm::batch_norm(x, bn, BatchNormMode::train);
        auto loss = cfm::mse_loss(y, target);
        bn.running_mean = saved_mean;
        bn.running_var = saved_var;
        return loss;
    };
    auto report = cfm::grad_check<double>(
        f, {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}}, 1e-4, 1e-4, rng);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("mse_loss values") {
    auto a = Tensor<double>::full(Shape4{1, 2, 3, 3}, 0.4);
    CHECK(cfm::mse_loss(a, a).value() == 0.0);

    // batch 1, prediction all zero, target all one: P elements -> P/2
    auto p = Tensor<double>::zeros(Shape4{1, 3, 4, 5});
    auto t = Tensor<double>::full(Shape4{1, 3, 4, 5}, 1.0);
    CHECK(cfm::mse_loss(p, t).value() == doctest::Approx(60.0 / 2.0));

    CounterRng rng(53);
    auto x = oracles::random_tensor<double>(Shape4{3, 2, 5, 5}, rng);
    auto y = oracles::random_tensor<double>(Shape4{3, 2, 5, 5}, rng);
    double acc = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = y.data()[i] - x.data()[i];
        acc += d * d;
    }
    acc /= 2.0 * 3.0;
    CHECK(std::abs(cfm::mse_loss(x, y).value() - acc) < 1e-7);

    auto bad = Tensor<double>::zeros(Shape4{1, 2, 3, 4});
    CHECK_THROWS_AS(cfm::mse_loss(p, bad), cfm::ShapeError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    CounterRng rng(59);
    auto x = oracles::random_tensor<double>(Shape4{2, 2, 3, 3}, rng, true);
    cfm::sum(x).backward();
    for (double v : x.grad()) CHECK(v == 1.0);
}

TEST_CASE("backward through conv matches finite differences") {
    CounterRng rng(61);
    auto x = oracles::random_tensor<double>(Shape4{1, 2, 5, 5}, rng, true);
    auto p = cfm::make_conv<double>(3, 2, 3, 3, rng);
    auto target = oracles::random_tensor<double>(Shape4{1, 3, 5, 5}, rng);
    auto f = [&]() { return cfm::mse_loss(cfm::conv2d(x, p), target); };
    auto report = cfm::grad_check<double>(
        f, {{"w", p.weight}, {"b", p.bias}, {"x", x}}, 1e-4, 1e-4, rng);
    CHECK(report.pass);
}

TEST_CASE("disconnected tensors receive no gradient") {
    CounterRng rng(67);
    auto x = oracles::random_tensor<double>(Shape4{1, 1, 2, 2}, rng, true);
    auto other = oracles::random_tensor<double>(Shape4{1, 1, 2, 2}, rng, true);
    cfm::sum(x).backward();
    CHECK(x.has_grad());
    CHECK_FALSE(other.has_grad());
}

TEST_CASE("repeated backward accumulates") {
    auto x = Tensor<double>::full(Shape4{1, 1, 2, 2}, 1.0, true);
    auto loss = cfm::sum(x);
    loss.backward();
    loss.backward();
    for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("backward rejects non-scalar roots") {
    auto x = Tensor<double>::zeros(Shape4{1, 1, 2, 2}, true);
    auto y = cfm::relu(x);
    CHECK_THROWS_AS(y.backward(), cfm::ContractError);
}

TEST_CASE("grad_check accepts the quadratic and reports tiny error") {
    CounterRng rng(71);
    auto x = oracles::random_tensor<double>(Shape4{1, 1, 4, 4}, rng, true);
    auto f = [&]() { return cfm::scale(cfm::sum(cfm::mul(x, x)), 0.5); };
    auto report = cfm::grad_check<double>(f, {{"x", x}}, 1e-5, 1e-8, rng);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("grad_check flags a corrupted conv backward") {
    CounterRng rng(73);
    auto x = oracles::random_tensor<double>(Shape4{1, 1, 6, 6}, rng);
    auto p = cfm::make_conv<double>(2, 1, 3, 3, rng);
    auto target = oracles::random_tensor<double>(Shape4{1, 2, 6, 6}, rng);
    auto f = [&]() { return cfm::mse_loss(cfm::conv2d(x, p), target); };

    cfm::debug::corrupt_conv_backward() = true;
    auto report = cfm::grad_check<double>(f, {{"w", p.weight}}, 1e-4, 1e-4, rng);
    cfm::debug::corrupt_conv_backward() = false;
    CHECK_FALSE(report.pass);
}

TEST_CASE("random op chains stay finite") {
    CounterRng rng(79);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = oracles::random_tensor<float>(Shape4{2, 2, 8, 8}, rng, true);
        auto p1 = cfm::make_conv<float>(4, 2, 3, 3, rng);
        auto bn = cfm::make_batch_norm<float>(4);
        auto p2 = cfm::make_conv<float>(2, 4, 3, 3, rng);
        auto h = cfm::relu(cfm::batch_norm(cfm::conv2d(x, p1), bn, BatchNormMode::train));
        auto y = cfm::conv2d(cfm::max_pool2x2(h), p2);
        auto loss = cfm::mse_loss(y, Tensor<float>::zeros(y.shape()));
        CHECK(cfm::all_finite(y));
        loss.backward();
        CHECK(std::isfinite(static_cast<double>(loss.value())));
        bool finite_grads = true;
        for (float g : p1.weight.grad()) finite_grads = finite_grads && std::isfinite(g);
        CHECK(finite_grads);
    }
}
