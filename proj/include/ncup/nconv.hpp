#pragma once

#include <cassert>

#include "ncup/autograd.hpp"

namespace ncup {

/// Absolute epsilon added to the data-path denominator so windows with
/// all-zero confidence produce 0 (with conf_out 0 flagging them unknown)
/// instead of NaN.
constexpr double kNConvEps = 1e-8;

/// Unconstrained kernel parameters for one normalized-convolution layer.
/// The effective kernel is softplus(raw), strictly positive, so the
/// confidence-propagation denominator never vanishes.
struct NConvKernel {
    Tensor raw;  // (1, inC, kH, kW)

    NConvKernel() = default;
    explicit NConvKernel(Tensor r) : raw(std::move(r)) {
        if (raw.shape().n != 1) dim_error("NConvKernel: expected a single output channel");
    }

    Tensor effective() const { return softplus(raw); }
};

/// softplus^{-1}: raw value whose effective kernel entry equals y > 0.
inline double inverse_softplus(double y) {
    return std::log(std::expm1(y));
}

struct NConvOut {
    Value data;
    Value conf;
};

/// Normalized convolution: the data output is the confidence-weighted
/// kernel response divided by the confidence response, and confidence
/// propagates as the kernel-weighted confidence mean:
///
///   data_out(x) = sum_m data(x-m) conf(x-m) a(m) / (sum_m conf(x-m) a(m) + eps)
///   conf_out(x) = sum_m conf(x-m) a(m) / sum_m a(m)
///
/// Zero padding enters with conf = 0, so padded pixels never influence
/// data_out. Multi-channel inputs sum over channels in both equations.
inline NConvOut nconv_forward(Value data, Value conf, Value raw_kernel, int pad,
                              double eps = kNConvEps) {
    if (!(data.shape() == conf.shape()))
        dim_error("nconv_forward: data shape " + to_string(data.shape()) + " != conf shape " +
                  to_string(conf.shape()));
    if (raw_kernel.shape().c != data.shape().c)
        dim_error("nconv_forward: kernel inC != data channels");
    Value a = softplus(raw_kernel);
    assert(a.val().min() > 0.0 && "effective nconv kernel must be strictly positive");
    Value weighted = mul(data, conf);
    Value num = conv2d(weighted, a, std::nullopt, 1, pad);
    Value den = conv2d(conf, a, std::nullopt, 1, pad);
    Value data_out = div(num, add_scalar(den, eps));
    Value conf_out = div_scalar_value(den, sum(a));
    return {data_out, conf_out};
}

enum class PoolingMode { confidence, max };

struct PooledOut {
    Value data;
    Value conf;
};

/// Confidence pooling: within each window the location of maximum
/// confidence is selected (ties to the first in row-major order) and both
/// data and confidence are carried from there. The max variant selects
/// data and confidence maxima independently.
inline PooledOut conf_pool(Value data, Value conf, int window,
                           PoolingMode mode = PoolingMode::confidence) {
    if (!(data.shape() == conf.shape())) dim_error("conf_pool: data/conf shape mismatch");
    if (mode == PoolingMode::confidence) {
        PoolIndex idx = argmax_pool_index(conf.val(), window);
        return {pool_select(data, idx), pool_select(conf, idx)};
    }
    PoolIndex idx_d = argmax_pool_index(data.val(), window);
    PoolIndex idx_c = argmax_pool_index(conf.val(), window);
    return {pool_select(data, idx_d), pool_select(conf, idx_c)};
}

/// Nearest-neighbor unpooling of a data/confidence pair.
inline PooledOut conf_unpool(Value data, Value conf, int scale) {
    if (scale < 2) dim_error("conf_unpool: scale must be >= 2");
    return {resize_nearest(data, scale), resize_nearest(conf, scale)};
}

/// Skip-connection fusion: concatenate two single-stream pairs on the
/// channel axis and run one normalized convolution with a two-input-channel
/// kernel, keeping the merge confidence-aware and bias-free.
inline NConvOut nconv_fuse(Value data_a, Value conf_a, Value data_b, Value conf_b,
                           Value raw_kernel, int pad) {
    if (!(data_a.shape() == data_b.shape())) dim_error("nconv_fuse: stream shape mismatch");
    return nconv_forward(concat_channels(data_a, data_b), concat_channels(conf_a, conf_b),
                         raw_kernel, pad);
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers (throwaway tape; used by tests and one-shot callers)
// ---------------------------------------------------------------------------

struct NConvResult {
    Tensor data;
    Tensor conf;
};

inline NConvResult nconv_forward(const Tensor& data, const Tensor& conf, const NConvKernel& k,
                                 int pad, double eps = kNConvEps) {
    Tape t;
    auto out = nconv_forward(t.constant(data), t.constant(conf), t.constant(k.raw), pad, eps);
    return {out.data.val(), out.conf.val()};
}

inline NConvResult conf_pool(const Tensor& data, const Tensor& conf, int window,
                             PoolingMode mode = PoolingMode::confidence) {
    Tape t;
    auto out = conf_pool(t.constant(data), t.constant(conf), window, mode);
    return {out.data.val(), out.conf.val()};
}

inline NConvResult conf_unpool(const Tensor& data, const Tensor& conf, int scale) {
    Tape t;
    auto out = conf_unpool(t.constant(data), t.constant(conf), scale);
    return {out.data.val(), out.conf.val()};
}

inline NConvResult nconv_fuse(const Tensor& da, const Tensor& ca, const Tensor& db,
                              const Tensor& cb, const NConvKernel& k, int pad) {
    Tape t;
    auto out = nconv_fuse(t.constant(da), t.constant(ca), t.constant(db), t.constant(cb),
                          t.constant(k.raw), pad);
    return {out.data.val(), out.conf.val()};
}

}  // namespace ncup
