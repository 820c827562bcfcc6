#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfm/ops.hpp"
#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

// How the conditional map modulates the image features: additive shift f+s,
// multiplicative scale gamma o f, or both.
enum class ModulationKind { shift, scale, affine };

inline std::string to_string(ModulationKind k) {
    switch (k) {
        case ModulationKind::shift: return "shift";
        case ModulationKind::scale: return "scale";
        case ModulationKind::affine: return "affine";
    }
    return "?";
}

struct RSCFMConfig {
    std::int64_t channels = 64;        // branch width at this scale
    int num_shifting_ops = 2;
    ModulationKind kind = ModulationKind::shift;
    bool use_residual = true;          // false reproduces the "w/o Res" ablation
    bool use_image_features = true;    // false reproduces the "w/o ImMod" ablation

    void validate() const {
        if (channels <= 0) throw ConfigError("RSCFMConfig: channels must be positive");
        if (num_shifting_ops < 1 || num_shifting_ops > 4) {
            throw ConfigError("RSCFMConfig: num_shifting_ops must be in [1,4], got " +
                              std::to_string(num_shifting_ops));
        }
    }
};

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;
template <typename T>
using BufferVisitor = std::function<void(const std::string&, std::vector<T>&)>;

// One convolution with its optional batch norm and nonlinearity. Plain 3x3
// same-padding conv or a 2x2 stride-2 transposed conv.
template <typename T>
struct ConvUnit {
    enum class OpKind { conv3x3, tconv2x2 };

    OpKind op = OpKind::conv3x3;
    ConvParams<T> conv;
    std::optional<BatchNormParams<T>> bn;
    bool nonlinearity = false;

    Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode) {
        Tensor<T> y = op == OpKind::conv3x3 ? conv2d(x, conv, Padding::same)
                                            : transposed_conv2x2(x, conv);
        if (bn) y = batch_norm(y, *bn, mode);
        if (nonlinearity) y = relu(y);
        return y;
    }

    // Folds the batch-norm statistics into the convolution and drops the norm.
    void fuse_bn() {
        if (!bn) return;
        const std::int64_t K = conv.out_channels();
        const std::int64_t per_out = conv.weight.numel() / K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T inv = T(1) / std::sqrt(bn->running_var[k] + static_cast<T>(bn->epsilon));
            const T g = bn->gamma.data()[k] * inv;
            T* w = conv.weight.data().data() + k * per_out;
            for (std::int64_t t = 0; t < per_out; ++t) w[t] *= g;
            conv.bias.data()[k] =
                (conv.bias.data()[k] - bn->running_mean[k]) * g + bn->beta.data()[k];
        }
        bn.reset();
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".w", conv.weight);
        fn(prefix + ".b", conv.bias);
        if (bn) {
            fn(prefix + ".bn.gamma", bn->gamma);
            fn(prefix + ".bn.beta", bn->beta);
        }
    }

    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) {
        if (bn) {
            fn(prefix + ".bn.rmean", bn->running_mean);
            fn(prefix + ".bn.rvar", bn->running_var);
        }
    }
};

template <typename T>
ConvUnit<T> make_conv_unit(std::int64_t out_c, std::int64_t in_c, CounterRng& rng,
                           bool with_bn = true, bool with_relu = true) {
    ConvUnit<T> u;
    u.conv = make_conv<T>(out_c, in_c, 3, 3, rng);
    if (with_bn) u.bn = make_batch_norm<T>(out_c);
    u.nonlinearity = with_relu;
    return u;
}

template <typename T>
ConvUnit<T> make_tconv_unit(std::int64_t out_c, std::int64_t in_c, CounterRng& rng) {
    ConvUnit<T> u;
    u.op = ConvUnit<T>::OpKind::tconv2x2;
    u.conv = make_conv<T>(out_c, in_c, 2, 2, rng);
    u.bn = make_batch_norm<T>(out_c);
    u.nonlinearity = true;
    return u;
}

// Parameters of one residual shifting operation. The first operation in a
// block fuses (f,g) through three convs; later ones refine g' through two.
// The map conv carries no norm or nonlinearity.
template <typename T>
struct ShiftOpParams {
    std::vector<ConvUnit<T>> fusion;        // empty when the block has no modulation path
    std::optional<ConvParams<T>> map_conv;  // emits s, gamma, or (gamma,s)
    std::array<ConvUnit<T>, 2> image;

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        for (std::size_t i = 0; i < fusion.size(); ++i)
            fusion[i].visit_params(prefix + ".fuse" + std::to_string(i), fn);
        if (map_conv) {
            fn(prefix + ".map.w", map_conv->weight);
            fn(prefix + ".map.b", map_conv->bias);
        }
        image[0].visit_params(prefix + ".img0", fn);
        image[1].visit_params(prefix + ".img1", fn);
    }

    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) {
        for (std::size_t i = 0; i < fusion.size(); ++i)
            fusion[i].visit_buffers(prefix + ".fuse" + std::to_string(i), fn);
        image[0].visit_buffers(prefix + ".img0", fn);
        image[1].visit_buffers(prefix + ".img1", fn);
    }

    void fuse_bn() {
        for (auto& u : fusion) u.fuse_bn();
        image[0].fuse_bn();
        image[1].fuse_bn();
    }
};

template <typename T>
struct RSCFMParams {
    std::vector<ShiftOpParams<T>> ops;

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        for (std::size_t i = 0; i < ops.size(); ++i)
            ops[i].visit_params(prefix + ".op" + std::to_string(i), fn);
    }
    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) {
        for (std::size_t i = 0; i < ops.size(); ++i)
            ops[i].visit_buffers(prefix + ".op" + std::to_string(i), fn);
    }
    void fuse_bn() {
        for (auto& o : ops) o.fuse_bn();
    }
};

namespace detail {

// The map conv emits gamma initialized to ~1 (zero weights, unit bias) for
// scale/affine; the shift half starts as an ordinary He-initialized conv.
template <typename T>
ConvParams<T> make_map_conv(std::int64_t w, ModulationKind kind, CounterRng& rng) {
    switch (kind) {
        case ModulationKind::shift:
            return make_conv<T>(w, w, 3, 3, rng);
        case ModulationKind::scale: {
            ConvParams<T> p = make_conv<T>(w, w, 3, 3, rng);
            for (auto& v : p.weight.data()) v = T(0);
            for (auto& v : p.bias.data()) v = T(1);
            return p;
        }
        case ModulationKind::affine: {
            ConvParams<T> p = make_conv<T>(2 * w, w, 3, 3, rng);
            const std::int64_t per_out = p.weight.numel() / (2 * w);
            for (std::int64_t k = 0; k < w; ++k) {  // gamma half
                T* wp = p.weight.data().data() + k * per_out;
                for (std::int64_t t = 0; t < per_out; ++t) wp[t] = T(0);
                p.bias.data()[k] = T(1);
            }
            return p;
        }
    }
    throw ConfigError("unknown modulation kind");
}

}  // namespace detail

// Full RS-CFM block parameters (modulation path present).
template <typename T>
RSCFMParams<T> make_rs_cfm(const RSCFMConfig& cfg, CounterRng& rng) {
    cfg.validate();
    const std::int64_t w = cfg.channels;
    RSCFMParams<T> params;
    params.ops.resize(static_cast<std::size_t>(cfg.num_shifting_ops));
    for (int i = 0; i < cfg.num_shifting_ops; ++i) {
        auto& op = params.ops[static_cast<std::size_t>(i)];
        if (i == 0) {
            const std::int64_t in0 = cfg.use_image_features ? 2 * w : w;
            op.fusion.push_back(make_conv_unit<T>(w, in0, rng));
            op.fusion.push_back(make_conv_unit<T>(w, w, rng));
            op.fusion.push_back(make_conv_unit<T>(w, w, rng));
        } else {
            op.fusion.push_back(make_conv_unit<T>(w, w, rng));
            op.fusion.push_back(make_conv_unit<T>(w, w, rng));
        }
        op.map_conv = detail::make_map_conv<T>(w, cfg.kind, rng);
        op.image[0] = make_conv_unit<T>(w, w, rng);
        op.image[1] = make_conv_unit<T>(w, w, rng);
    }
    return params;
}

// Image-path-only block used by the "w/o CFM" network variant: each
// operation reduces to f + image-path(f).
template <typename T>
RSCFMParams<T> make_plain_block(const RSCFMConfig& cfg, CounterRng& rng) {
    cfg.validate();
    const std::int64_t w = cfg.channels;
    RSCFMParams<T> params;
    params.ops.resize(static_cast<std::size_t>(cfg.num_shifting_ops));
    for (auto& op : params.ops) {
        op.image[0] = make_conv_unit<T>(w, w, rng);
        op.image[1] = make_conv_unit<T>(w, w, rng);
    }
    return params;
}

// Per-forward diagnostics: the raw modulation maps, one per shifting op.
template <typename T>
struct BlockTrace {
    std::vector<Tensor<T>> maps;
};

namespace detail {

template <typename T>
Tensor<T> apply_modulation(const Tensor<T>& features, const Tensor<T>& map, ModulationKind kind,
                           std::int64_t w) {
    switch (kind) {
        case ModulationKind::shift:
            return add(features, map);
        case ModulationKind::scale:
            return mul(map, features);
        case ModulationKind::affine: {
            auto gamma = slice_channels(map, 0, w);
            auto shift = slice_channels(map, w, 2 * w);
            return add(mul(gamma, features), shift);
        }
    }
    throw ConfigError("unknown modulation kind");
}

}  // namespace detail

// One RS-CFM block: num_shifting_ops residual shifting operations. The first
// conditions on concat(f,g) (or g alone under "w/o ImMod"); each later one
// refines the conditional path from its own previous output.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> rs_cfm_forward(const Tensor<T>& f_in, const Tensor<T>& g_in,
                                               RSCFMParams<T>& params, const RSCFMConfig& cfg,
                                               BatchNormMode mode = BatchNormMode::train,
                                               BlockTrace<T>* trace = nullptr) {
    if (!(f_in.shape() == g_in.shape())) {
        throw ShapeError("rs_cfm_forward: f " + f_in.shape().str() + " vs g " + g_in.shape().str());
    }
    Tensor<T> f = f_in;
    Tensor<T> g = g_in;
    for (std::size_t i = 0; i < params.ops.size(); ++i) {
        auto& op = params.ops[i];

        Tensor<T> cond = i == 0 ? (cfg.use_image_features ? concat_channels(f, g) : g) : g;
        for (auto& unit : op.fusion) cond = unit.forward(cond, mode);

        Tensor<T> map = conv2d(cond, *op.map_conv, Padding::same);
        if (trace) trace->maps.push_back(map);

        Tensor<T> fi = op.image[0].forward(f, mode);
        fi = op.image[1].forward(fi, mode);

        Tensor<T> update = detail::apply_modulation(fi, map, cfg.kind, cfg.channels);

        f = cfg.use_residual ? add(f, update) : update;
        g = cfg.use_residual ? add(g, cond) : cond;
    }
    return {f, g};
}

// Image-only residual stack (the "w/o CFM" building block).
template <typename T>
Tensor<T> plain_block_forward(const Tensor<T>& f_in, RSCFMParams<T>& params,
                              const RSCFMConfig& cfg, BatchNormMode mode = BatchNormMode::train) {
    Tensor<T> f = f_in;
    for (auto& op : params.ops) {
        Tensor<T> fi = op.image[0].forward(f, mode);
        fi = op.image[1].forward(fi, mode);
        f = cfg.use_residual ? add(f, fi) : fi;
    }
    return f;
}

// Diagnostic probe: does the block's first shifting map vary over space?
// The interior margin excludes rows/columns whose convolution windows touch
// the zero padding (one ring per conv in the map path).
template <typename T>
double shifting_map_spatial_std(const Tensor<T>& f, const Tensor<T>& g, RSCFMParams<T>& params,
                                const RSCFMConfig& cfg, int interior_margin = 4) {
    NoGradGuard no_grad;
    BlockTrace<T> trace;
    rs_cfm_forward(f, g, params, cfg, BatchNormMode::eval, &trace);
    const Tensor<T>& s = trace.maps.front();
    const Shape4 ss = s.shape();
    const std::int64_t m = interior_margin;
    if (ss.h <= 2 * m || ss.w <= 2 * m) {
        throw ShapeError("shifting map too small for the requested interior margin");
    }
    // Spatial deviation from each channel's interior mean, pooled over
    // batch and channels.
    double total = 0;
    std::int64_t count = 0;
    for (std::int64_t n = 0; n < ss.n; ++n) {
        for (std::int64_t c = 0; c < ss.c; ++c) {
            double mean = 0;
            std::int64_t cells = 0;
            for (std::int64_t i = m; i < ss.h - m; ++i)
                for (std::int64_t j = m; j < ss.w - m; ++j) {
                    mean += static_cast<double>(s.at(n, c, i, j));
                    ++cells;
                }
            mean /= static_cast<double>(cells);
            for (std::int64_t i = m; i < ss.h - m; ++i)
                for (std::int64_t j = m; j < ss.w - m; ++j) {
                    const double d = static_cast<double>(s.at(n, c, i, j)) - mean;
                    total += d * d;
                }
            count += cells;
        }
    }
    return std::sqrt(total / static_cast<double>(count));
}

template <typename T>
bool shifting_map_is_spatially_variant(const Tensor<T>& f, const Tensor<T>& g_uniform,
                                       RSCFMParams<T>& params, const RSCFMConfig& cfg) {
    return shifting_map_spatial_std(f, g_uniform, params, cfg) > 1e-12;
}

}  // namespace cfm
