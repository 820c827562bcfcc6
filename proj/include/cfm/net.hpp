#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cfm/block.hpp"
#include "cfm/ops.hpp"
#include "cfm/rng.hpp"
#include "cfm/store.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

enum class NetVariant { full, no_cfm, no_res, no_immod };

inline std::string to_string(NetVariant v) {
    switch (v) {
        case NetVariant::full: return "full";
        case NetVariant::no_cfm: return "no_cfm";
        case NetVariant::no_res: return "no_res";
        case NetVariant::no_immod: return "no_immod";
    }
    return "?";
}

struct CFMNetConfig {
    std::int64_t in_channels = 1;                      // 1 grayscale, 3 color
    std::array<std::int64_t, 3> scale_widths{64, 128, 256};
    int cfm_per_position = 2;
    int num_shifting_ops = 2;
    ModulationKind kind = ModulationKind::shift;
    NetVariant variant = NetVariant::full;

    void validate() const {
        if (in_channels != 1 && in_channels != 3) {
            throw ConfigError("CFMNetConfig: in_channels must be 1 or 3");
        }
        if (!(scale_widths[0] > 0 && scale_widths[0] < scale_widths[1] &&
              scale_widths[1] < scale_widths[2])) {
            throw ConfigError("CFMNetConfig: scale widths must be strictly increasing");
        }
        if (cfm_per_position < 1 || cfm_per_position > 4) {
            throw ConfigError("CFMNetConfig: cfm_per_position must be in [1,4]");
        }
        block_config(0).validate();
    }

    RSCFMConfig block_config(int scale_index) const {
        RSCFMConfig b;
        b.channels = scale_widths[static_cast<std::size_t>(scale_index)];
        b.num_shifting_ops = num_shifting_ops;
        b.kind = kind;
        b.use_residual = variant != NetVariant::no_res;
        b.use_image_features = variant != NetVariant::no_immod;
        return b;
    }

    bool has_noise_branch() const { return variant != NetVariant::no_cfm; }
};

// Two-branch U-Net with RS-CFM coupling. Each branch downsamples twice with
// 2x2 max pooling and upsamples twice with 2x2 transposed convolutions;
// cfm_per_position blocks sit before each pool, at the bottleneck, and after
// each upsampling stage. Skip connections stay within a branch. The image
// branch ends in a residual head: x_hat = y + R(y, M).
//
// The "no_cfm" variant removes the noise branch entirely: the head consumes
// concat(y, M) and every block degenerates to its image path.
template <typename T>
class CFMNet {
  public:
    CFMNet(const CFMNetConfig& config, std::uint64_t seed) : cfg_(config) {
        cfg_.validate();
        CounterRng rng(seed);
        const auto w = cfg_.scale_widths;
        const bool g_branch = cfg_.has_noise_branch();
        const std::int64_t head_in = g_branch ? cfg_.in_channels : cfg_.in_channels + 1;

        f_head_ = make_conv_unit<T>(w[0], head_in, rng);
        if (g_branch) g_head_ = make_conv_unit<T>(w[0], 1, rng);

        make_blocks(enc1_, 0, rng);
        f_tr1_ = make_conv_unit<T>(w[1], w[0], rng);
        if (g_branch) g_tr1_ = make_conv_unit<T>(w[1], w[0], rng);

        make_blocks(enc2_, 1, rng);
        f_tr2_ = make_conv_unit<T>(w[2], w[1], rng);
        if (g_branch) g_tr2_ = make_conv_unit<T>(w[2], w[1], rng);

        make_blocks(mid_, 2, rng);

        f_up1_ = make_tconv_unit<T>(w[1], w[2], rng);
        if (g_branch) g_up1_ = make_tconv_unit<T>(w[1], w[2], rng);
        f_skip2_ = make_conv_unit<T>(w[1], 2 * w[1], rng);
        if (g_branch) g_skip2_ = make_conv_unit<T>(w[1], 2 * w[1], rng);

        make_blocks(dec2_, 1, rng);

        f_up2_ = make_tconv_unit<T>(w[0], w[1], rng);
        if (g_branch) g_up2_ = make_tconv_unit<T>(w[0], w[1], rng);
        f_skip1_ = make_conv_unit<T>(w[0], 2 * w[0], rng);
        if (g_branch) g_skip1_ = make_conv_unit<T>(w[0], 2 * w[0], rng);

        make_blocks(dec1_, 0, rng);

        // residual head: plain conv, no norm, no nonlinearity
        tail_.conv = make_conv<T>(cfg_.in_channels, w[0], 3, 3, rng);
        tail_.nonlinearity = false;
    }

    const CFMNetConfig& config() const { return cfg_; }
    bool fused() const { return fused_; }

    Tensor<T> forward(const Tensor<T>& y, const Tensor<T>& noise_map,
                      BatchNormMode mode = BatchNormMode::eval) {
        const Shape4 ys = y.shape();
        if (ys.c != cfg_.in_channels) {
            throw ShapeError("forward: expected " + std::to_string(cfg_.in_channels) +
                             " channels, got " + std::to_string(ys.c));
        }
        if (ys.h % 4 != 0 || ys.w % 4 != 0) {
            throw ShapeError("forward: H and W must be divisible by 4, got " + ys.str());
        }
        const Shape4 ms = noise_map.shape();
        if (ms.n != ys.n || ms.c != 1 || ms.h != ys.h || ms.w != ys.w) {
            throw ShapeError("forward: noise map shape " + ms.str() + " does not match image " +
                             ys.str());
        }

        if (!cfg_.has_noise_branch()) return forward_single_branch(y, noise_map, mode);

        const RSCFMConfig c0 = cfg_.block_config(0);
        const RSCFMConfig c1 = cfg_.block_config(1);
        const RSCFMConfig c2 = cfg_.block_config(2);

        Tensor<T> f = f_head_.forward(y, mode);
        Tensor<T> g = g_head_.forward(noise_map, mode);

        for (auto& b : enc1_) std::tie(f, g) = rs_cfm_forward(f, g, b, c0, mode);
        Tensor<T> f1 = f, g1 = g;  // scale-1 skips
        f = f_tr1_.forward(max_pool2x2(f), mode);
        g = g_tr1_.forward(max_pool2x2(g), mode);

        for (auto& b : enc2_) std::tie(f, g) = rs_cfm_forward(f, g, b, c1, mode);
        Tensor<T> f2 = f, g2 = g;  // scale-2 skips
        f = f_tr2_.forward(max_pool2x2(f), mode);
        g = g_tr2_.forward(max_pool2x2(g), mode);

        for (auto& b : mid_) std::tie(f, g) = rs_cfm_forward(f, g, b, c2, mode);

        f = f_skip2_.forward(concat_channels(f_up1_.forward(f, mode), f2), mode);
        g = g_skip2_.forward(concat_channels(g_up1_.forward(g, mode), g2), mode);
        for (auto& b : dec2_) std::tie(f, g) = rs_cfm_forward(f, g, b, c1, mode);

        f = f_skip1_.forward(concat_channels(f_up2_.forward(f, mode), f1), mode);
        g = g_skip1_.forward(concat_channels(g_up2_.forward(g, mode), g1), mode);
        for (auto& b : dec1_) std::tie(f, g) = rs_cfm_forward(f, g, b, c0, mode);

        return add(y, conv2d(f, tail_.conv, Padding::same));
    }

    // Folds every batch-norm into its preceding convolution. The network must
    // still carry norms (fusing twice is a structural error).
    void fuse_batch_norm() {
        if (fused_) {
            throw StructuralError("fuse_batch_norm: network already fused, no batch norm remains");
        }
        visit_units([](const std::string&, ConvUnit<T>& u) { u.fuse_bn(); });
        for (auto* pos : {&enc1_, &enc2_, &mid_, &dec2_, &dec1_}) {
            for (auto& b : *pos) b.fuse_bn();
        }
        fused_ = true;
    }

    // Removes norm slots without folding; used when loading fused weights.
    void mark_fused_structure() {
        visit_units([](const std::string&, ConvUnit<T>& u) { u.bn.reset(); });
        for (auto* pos : {&enc1_, &enc2_, &mid_, &dec2_, &dec1_}) {
            for (auto& b : *pos) {
                for (auto& op : b.ops) {
                    for (auto& fu : op.fusion) fu.bn.reset();
                    op.image[0].bn.reset();
                    op.image[1].bn.reset();
                }
            }
        }
        fused_ = true;
    }

    void visit_params(const ParamVisitor<T>& fn) {
        const bool g_branch = cfg_.has_noise_branch();
        f_head_.visit_params("img.head", fn);
        if (g_branch) g_head_.visit_params("nmap.head", fn);
        visit_position("enc1", enc1_, fn);
        f_tr1_.visit_params("img.tr1", fn);
        if (g_branch) g_tr1_.visit_params("nmap.tr1", fn);
        visit_position("enc2", enc2_, fn);
        f_tr2_.visit_params("img.tr2", fn);
        if (g_branch) g_tr2_.visit_params("nmap.tr2", fn);
        visit_position("mid", mid_, fn);
        f_up1_.visit_params("img.up1", fn);
        if (g_branch) g_up1_.visit_params("nmap.up1", fn);
        f_skip2_.visit_params("img.skip2", fn);
        if (g_branch) g_skip2_.visit_params("nmap.skip2", fn);
        visit_position("dec2", dec2_, fn);
        f_up2_.visit_params("img.up2", fn);
        if (g_branch) g_up2_.visit_params("nmap.up2", fn);
        f_skip1_.visit_params("img.skip1", fn);
        if (g_branch) g_skip1_.visit_params("nmap.skip1", fn);
        visit_position("dec1", dec1_, fn);
        tail_.visit_params("img.tail", fn);
    }

    void visit_buffers(const BufferVisitor<T>& fn) {
        const bool g_branch = cfg_.has_noise_branch();
        f_head_.visit_buffers("img.head", fn);
        if (g_branch) g_head_.visit_buffers("nmap.head", fn);
        buffer_position("enc1", enc1_, fn);
        f_tr1_.visit_buffers("img.tr1", fn);
        if (g_branch) g_tr1_.visit_buffers("nmap.tr1", fn);
        buffer_position("enc2", enc2_, fn);
        f_tr2_.visit_buffers("img.tr2", fn);
        if (g_branch) g_tr2_.visit_buffers("nmap.tr2", fn);
        buffer_position("mid", mid_, fn);
        f_up1_.visit_buffers("img.up1", fn);
        if (g_branch) g_up1_.visit_buffers("nmap.up1", fn);
        f_skip2_.visit_buffers("img.skip2", fn);
        if (g_branch) g_skip2_.visit_buffers("nmap.skip2", fn);
        buffer_position("dec2", dec2_, fn);
        f_up2_.visit_buffers("img.up2", fn);
        if (g_branch) g_up2_.visit_buffers("nmap.up2", fn);
        f_skip1_.visit_buffers("img.skip1", fn);
        if (g_branch) g_skip1_.visit_buffers("nmap.skip1", fn);
        buffer_position("dec1", dec1_, fn);
    }

    std::vector<std::pair<std::string, Tensor<T>>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    void zero_grad() {
        visit_params([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    Tensor<T>& tail_conv_weight() { return tail_.conv.weight; }
    Tensor<T>& tail_conv_bias() { return tail_.conv.bias; }

  private:
    Tensor<T> forward_single_branch(const Tensor<T>& y, const Tensor<T>& noise_map,
                                    BatchNormMode mode) {
        const RSCFMConfig c0 = cfg_.block_config(0);
        const RSCFMConfig c1 = cfg_.block_config(1);
        const RSCFMConfig c2 = cfg_.block_config(2);

        Tensor<T> f = f_head_.forward(concat_channels(y, noise_map), mode);
        for (auto& b : enc1_) f = plain_block_forward(f, b, c0, mode);
        Tensor<T> f1 = f;
        f = f_tr1_.forward(max_pool2x2(f), mode);
        for (auto& b : enc2_) f = plain_block_forward(f, b, c1, mode);
        Tensor<T> f2 = f;
        f = f_tr2_.forward(max_pool2x2(f), mode);
        for (auto& b : mid_) f = plain_block_forward(f, b, c2, mode);
        f = f_skip2_.forward(concat_channels(f_up1_.forward(f, mode), f2), mode);
        for (auto& b : dec2_) f = plain_block_forward(f, b, c1, mode);
        f = f_skip1_.forward(concat_channels(f_up2_.forward(f, mode), f1), mode);
        for (auto& b : dec1_) f = plain_block_forward(f, b, c0, mode);
        return add(y, conv2d(f, tail_.conv, Padding::same));
    }

    void make_blocks(std::vector<RSCFMParams<T>>& dst, int scale_index, CounterRng& rng) {
        const RSCFMConfig bc = cfg_.block_config(scale_index);
        dst.clear();
        for (int i = 0; i < cfg_.cfm_per_position; ++i) {
            dst.push_back(cfg_.has_noise_branch() ? make_rs_cfm<T>(bc, rng)
                                                  : make_plain_block<T>(bc, rng));
        }
    }

    void visit_position(const std::string& name, std::vector<RSCFMParams<T>>& pos,
                        const ParamVisitor<T>& fn) {
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i].visit_params(name + ".cfm" + std::to_string(i), fn);
        }
    }

    void buffer_position(const std::string& name, std::vector<RSCFMParams<T>>& pos,
                         const BufferVisitor<T>& fn) {
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i].visit_buffers(name + ".cfm" + std::to_string(i), fn);
        }
    }

    void visit_units(const std::function<void(const std::string&, ConvUnit<T>&)>& fn) {
        const bool g_branch = cfg_.has_noise_branch();
        fn("img.head", f_head_);
        if (g_branch) fn("nmap.head", g_head_);
        fn("img.tr1", f_tr1_);
        if (g_branch) fn("nmap.tr1", g_tr1_);
        fn("img.tr2", f_tr2_);
        if (g_branch) fn("nmap.tr2", g_tr2_);
        fn("img.up1", f_up1_);
        if (g_branch) fn("nmap.up1", g_up1_);
        fn("img.skip2", f_skip2_);
        if (g_branch) fn("nmap.skip2", g_skip2_);
        fn("img.up2", f_up2_);
        if (g_branch) fn("nmap.up2", g_up2_);
        fn("img.skip1", f_skip1_);
        if (g_branch) fn("nmap.skip1", g_skip1_);
        fn("img.tail", tail_);
    }

    CFMNetConfig cfg_;
    bool fused_ = false;

    ConvUnit<T> f_head_, g_head_;
    ConvUnit<T> f_tr1_, g_tr1_, f_tr2_, g_tr2_;
    ConvUnit<T> f_up1_, g_up1_, f_up2_, g_up2_;
    ConvUnit<T> f_skip1_, g_skip1_, f_skip2_, g_skip2_;
    ConvUnit<T> tail_;
    std::vector<RSCFMParams<T>> enc1_, enc2_, mid_, dec2_, dec1_;
};

// ---------------------------------------------------------------------------
// Receptive field
// ---------------------------------------------------------------------------

namespace detail {

// One-sided dependence interval of a feature pixel on input pixels, tracked
// exactly through convs, pooling and upsampling. A feature pixel at coarse
// index t (jump input pixels per feature pixel) depends on input pixels in
// [jump*t + lo, jump*t + hi].
struct Reach {
    std::int64_t lo = 0;
    std::int64_t hi = 0;

    Reach merged(const Reach& o) const { return {std::min(lo, o.lo), std::max(hi, o.hi)}; }
    Reach conv(std::int64_t jump, int count = 1) const {
        return {lo - count * jump, hi + count * jump};
    }
};

struct BranchReach {
    Reach f, g;
};

inline BranchReach block_reach(BranchReach r, const RSCFMConfig& cfg, std::int64_t jump,
                               bool has_noise_branch) {
    for (int i = 0; i < cfg.num_shifting_ops; ++i) {
        if (has_noise_branch) {
            Reach cond = i == 0 ? (cfg.use_image_features ? r.f.merged(r.g) : r.g) : r.g;
            cond = cond.conv(jump, i == 0 ? 3 : 2);
            const Reach map = cond.conv(jump);
            const Reach img = r.f.conv(jump, 2);
            const Reach update = img.merged(map);
            r.f = cfg.use_residual ? r.f.merged(update) : update;
            r.g = cfg.use_residual ? r.g.merged(cond) : cond;
        } else {
            const Reach img = r.f.conv(jump, 2);
            r.f = cfg.use_residual ? r.f.merged(img) : img;
        }
    }
    return r;
}

inline void pool_reach(BranchReach& r, std::int64_t& jump) {
    // output t covers inputs {2t, 2t+1} at the old scale
    r.f.hi += jump;
    r.g.hi += jump;
    jump *= 2;
}

inline void upsample_reach(BranchReach& r, std::int64_t& jump) {
    // output t reads input floor(t/2); odd t anchors one new-scale pixel left
    jump /= 2;
    r.f.lo -= jump;
    r.g.lo -= jump;
}

}  // namespace detail

// Upper bound (tight per path) on the Chebyshev radius, in input pixels,
// within which an input perturbation can influence an output pixel.
inline std::int64_t receptive_field_radius(const CFMNetConfig& cfg) {
    using detail::BranchReach;
    const bool g_branch = cfg.has_noise_branch();
    std::int64_t jump = 1;
    BranchReach r{};

    auto blocks = [&](int scale) {
        for (int i = 0; i < cfg.cfm_per_position; ++i) {
            r = detail::block_reach(r, cfg.block_config(scale), jump, g_branch);
        }
    };

    r.f = r.f.conv(jump);  // heads
    r.g = r.g.conv(jump);
    blocks(0);
    BranchReach skip1 = r;
    detail::pool_reach(r, jump);
    r.f = r.f.conv(jump);  // width transitions
    r.g = r.g.conv(jump);
    blocks(1);
    BranchReach skip2 = r;
    detail::pool_reach(r, jump);
    r.f = r.f.conv(jump);
    r.g = r.g.conv(jump);
    blocks(2);
    detail::upsample_reach(r, jump);
    r.f = r.f.merged(skip2.f).conv(jump);  // skip concat + fuse conv
    r.g = r.g.merged(skip2.g).conv(jump);
    blocks(1);
    detail::upsample_reach(r, jump);
    r.f = r.f.merged(skip1.f).conv(jump);
    r.g = r.g.merged(skip1.g).conv(jump);
    blocks(0);
    r.f = r.f.conv(jump);  // tail

    return std::max(-r.f.lo, r.f.hi);
}

// ---------------------------------------------------------------------------
// Input-concatenation equivalence (uniform-map first layer == channel shift)
// ---------------------------------------------------------------------------

struct EquivalenceReport {
    double max_abs_deviation = 0.0;
};

// With a spatially uniform map of level sigma, a valid convolution over
// concat(y, M) equals the convolution over y's channels plus the per-output
// constant s_k(sigma) = sigma * sum(w[k][C]) + b_k. Reports the maximum
// absolute deviation between the two paths.
template <typename T>
EquivalenceReport first_layer_equivalence_check(const ConvParams<T>& params, const Tensor<T>& y,
                                                double sigma) {
    NoGradGuard no_grad;
    const Shape4 ys = y.shape();
    const Shape4 ws = params.weight.shape();
    if (ws.c != ys.c + 1) {
        throw ShapeError("first_layer_equivalence_check: kernel must cover C+1 channels");
    }
    auto map = Tensor<T>::full(Shape4{ys.n, 1, ys.h, ys.w}, static_cast<T>(sigma));

    // Path A: convolution over the concatenated input.
    auto path_a = conv2d(concat_channels(y, map), params, Padding::valid);

    // Path B: image-only convolution plus the channel-wise constant.
    const std::int64_t K = ws.n, C = ys.c, kh = ws.h, kw = ws.w;
    ConvParams<T> stripped;
    {
        std::vector<T> w(static_cast<std::size_t>(K * C * kh * kw));
        for (std::int64_t k = 0; k < K; ++k)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t u = 0; u < kh; ++u)
                    for (std::int64_t v = 0; v < kw; ++v)
                        w[static_cast<std::size_t>(((k * C + c) * kh + u) * kw + v)] =
                            params.weight.at(k, c, u, v);
        stripped.weight = Tensor<T>::from_data(Shape4{K, C, kh, kw}, std::move(w));
        stripped.bias = Tensor<T>::zeros(Shape4{K, 1, 1, 1});
    }
    auto path_b = conv2d(y, stripped, Padding::valid);

    EquivalenceReport report;
    for (std::int64_t n = 0; n < path_a.shape().n; ++n) {
        for (std::int64_t k = 0; k < K; ++k) {
            T wsum = 0;
            for (std::int64_t u = 0; u < kh; ++u)
                for (std::int64_t v = 0; v < kw; ++v) wsum += params.weight.at(k, C, u, v);
            const T shift = static_cast<T>(sigma) * wsum + params.bias.data()[k];
            for (std::int64_t i = 0; i < path_a.shape().h; ++i)
                for (std::int64_t j = 0; j < path_a.shape().w; ++j) {
                    const double dev = std::abs(static_cast<double>(path_a.at(n, k, i, j)) -
                                                static_cast<double>(path_b.at(n, k, i, j) + shift));
                    report.max_abs_deviation = std::max(report.max_abs_deviation, dev);
                }
        }
    }
    return report;
}

// Negative-control variant: the same two-path comparison with an arbitrary
// map tensor, using the map's mean level for the constant-shift path. For a
// genuinely variant map the equivalence must break down.
template <typename T>
EquivalenceReport first_layer_equivalence_check_map(const ConvParams<T>& params, const Tensor<T>& y,
                                                    const Tensor<T>& map) {
    NoGradGuard no_grad;
    const Shape4 ys = y.shape();
    const Shape4 ws = params.weight.shape();
    auto path_a = conv2d(concat_channels(y, map), params, Padding::valid);

    double mean = 0;
    for (T v : map.data()) mean += static_cast<double>(v);
    mean /= static_cast<double>(map.numel());

    const std::int64_t K = ws.n, C = ys.c, kh = ws.h, kw = ws.w;
    ConvParams<T> stripped;
    {
        std::vector<T> w(static_cast<std::size_t>(K * C * kh * kw));
        for (std::int64_t k = 0; k < K; ++k)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t u = 0; u < kh; ++u)
                    for (std::int64_t v = 0; v < kw; ++v)
                        w[static_cast<std::size_t>(((k * C + c) * kh + u) * kw + v)] =
                            params.weight.at(k, c, u, v);
        stripped.weight = Tensor<T>::from_data(Shape4{K, C, kh, kw}, std::move(w));
        stripped.bias = Tensor<T>::zeros(Shape4{K, 1, 1, 1});
    }
    auto path_b = conv2d(y, stripped, Padding::valid);

    EquivalenceReport report;
    for (std::int64_t n = 0; n < path_a.shape().n; ++n) {
        for (std::int64_t k = 0; k < K; ++k) {
            T wsum = 0;
            for (std::int64_t u = 0; u < kh; ++u)
                for (std::int64_t v = 0; v < kw; ++v) wsum += params.weight.at(k, C, u, v);
            const T shift = static_cast<T>(mean) * wsum + params.bias.data()[k];
            for (std::int64_t i = 0; i < path_a.shape().h; ++i)
                for (std::int64_t j = 0; j < path_a.shape().w; ++j) {
                    const double dev = std::abs(static_cast<double>(path_a.at(n, k, i, j)) -
                                                static_cast<double>(path_b.at(n, k, i, j) + shift));
                    report.max_abs_deviation = std::max(report.max_abs_deviation, dev);
                }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline void check_meta(const NamedTensorStore& store, const std::string& name, float expected) {
    const float got = store.scalar(name);
    if (got != expected) {
        throw LoadError("config mismatch at '" + name + "': file has " + std::to_string(got) +
                        ", expected " + std::to_string(expected));
    }
}

}  // namespace detail

template <typename T>
void put_net(NamedTensorStore& store, CFMNet<T>& net) {
    const CFMNetConfig& c = net.config();
    store.add_scalar("meta/in_channels", static_cast<float>(c.in_channels));
    store.add("meta/widths", {3},
              {static_cast<float>(c.scale_widths[0]), static_cast<float>(c.scale_widths[1]),
               static_cast<float>(c.scale_widths[2])});
    store.add_scalar("meta/cfm_per_position", static_cast<float>(c.cfm_per_position));
    store.add_scalar("meta/num_shifting_ops", static_cast<float>(c.num_shifting_ops));
    store.add_scalar("meta/kind", static_cast<float>(static_cast<int>(c.kind)));
    store.add_scalar("meta/variant", static_cast<float>(static_cast<int>(c.variant)));
    store.add_scalar("meta/fused", net.fused() ? 1.0f : 0.0f);
    store.add_scalar("meta/precision", 32.0f);

    net.visit_params([&](const std::string& name, Tensor<T>& t) {
        const Shape4 s = t.shape();
        std::vector<float> data(t.data().begin(), t.data().end());
        store.add("param/" + name,
                  {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                   static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)},
                  std::move(data));
    });
    net.visit_buffers([&](const std::string& name, std::vector<T>& buf) {
        store.add("buffer/" + name, {static_cast<std::uint32_t>(buf.size())},
                  std::vector<float>(buf.begin(), buf.end()));
    });
}

template <typename T>
CFMNet<T> net_from_store(const NamedTensorStore& store, const CFMNetConfig& config) {
    detail::check_meta(store, "meta/in_channels", static_cast<float>(config.in_channels));
    const auto& widths = store.get("meta/widths");
    for (int i = 0; i < 3; ++i) {
        if (widths.data[static_cast<std::size_t>(i)] !=
            static_cast<float>(config.scale_widths[static_cast<std::size_t>(i)])) {
            throw LoadError("config mismatch at 'meta/widths': file has scale " +
                            std::to_string(i) + " = " +
                            std::to_string(widths.data[static_cast<std::size_t>(i)]));
        }
    }
    detail::check_meta(store, "meta/cfm_per_position", static_cast<float>(config.cfm_per_position));
    detail::check_meta(store, "meta/num_shifting_ops", static_cast<float>(config.num_shifting_ops));
    detail::check_meta(store, "meta/kind", static_cast<float>(static_cast<int>(config.kind)));
    detail::check_meta(store, "meta/variant", static_cast<float>(static_cast<int>(config.variant)));

    CFMNet<T> net(config, 0);
    if (store.scalar("meta/fused") != 0.0f) net.mark_fused_structure();

    net.visit_params([&](const std::string& name, Tensor<T>& t) {
        const auto& e = store.get("param/" + name);
        if (static_cast<std::int64_t>(e.data.size()) != t.numel()) {
            throw LoadError("shape mismatch for entry 'param/" + name + "'");
        }
        for (std::size_t i = 0; i < e.data.size(); ++i) t.data()[i] = static_cast<T>(e.data[i]);
    });
    net.visit_buffers([&](const std::string& name, std::vector<T>& buf) {
        const auto& e = store.get("buffer/" + name);
        if (e.data.size() != buf.size()) {
            throw LoadError("shape mismatch for entry 'buffer/" + name + "'");
        }
        for (std::size_t i = 0; i < e.data.size(); ++i) buf[i] = static_cast<T>(e.data[i]);
    });
    return net;
}

template <typename T>
void save_net(CFMNet<T>& net, const std::string& path) {
    NamedTensorStore store;
    put_net(store, net);
    store.save(path);
}

template <typename T>
CFMNet<T> load_net(const std::string& path, const CFMNetConfig& config) {
    return net_from_store<T>(NamedTensorStore::load(path), config);
}

inline CFMNetConfig config_from_store(const NamedTensorStore& store) {
    CFMNetConfig cfg;
    cfg.in_channels = static_cast<std::int64_t>(store.scalar("meta/in_channels"));
    const auto& widths = store.get("meta/widths");
    for (int i = 0; i < 3; ++i) {
        cfg.scale_widths[static_cast<std::size_t>(i)] =
            static_cast<std::int64_t>(widths.data[static_cast<std::size_t>(i)]);
    }
    cfg.cfm_per_position = static_cast<int>(store.scalar("meta/cfm_per_position"));
    cfg.num_shifting_ops = static_cast<int>(store.scalar("meta/num_shifting_ops"));
    cfg.kind = static_cast<ModulationKind>(static_cast<int>(store.scalar("meta/kind")));
    cfg.variant = static_cast<NetVariant>(static_cast<int>(store.scalar("meta/variant")));
    return cfg;
}

// Loads a model using the configuration recorded in the file itself.
template <typename T>
CFMNet<T> load_net_auto(const std::string& path) {
    NamedTensorStore store = NamedTensorStore::load(path);
    return net_from_store<T>(store, config_from_store(store));
}

}  // namespace cfm
