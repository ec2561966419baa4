#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "ncup/tensor.hpp"

namespace ncup {

enum class ActKind { relu, sigmoid, softplus };
enum class ResizeKind { nearest, bilinear };

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <class F>
Tensor map(const Tensor& x, F f) {
    Tensor out(x.shape());
    const double* src = x.data();
    double* dst = out.data();
    for (long long i = 0, n = x.size(); i < n; ++i) dst[i] = f(src[i]);
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* what) {
    if (!a.same_shape(b))
        dim_error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                  to_string(b.shape()));
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* dst = out.data();
    for (long long i = 0, n = a.size(); i < n; ++i) dst[i] = f(pa[i], pb[i]);
    return out;
}

}  // namespace detail

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(1 + e^x), overflow-safe.
inline double softplus_scalar(double x) {
    return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}

inline Tensor relu(const Tensor& x) {
    return detail::map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}
inline Tensor sigmoid(const Tensor& x) {
    return detail::map(x, sigmoid_scalar);
}
inline Tensor softplus(const Tensor& x) {
    return detail::map(x, softplus_scalar);
}

inline Tensor activation(const Tensor& x, ActKind kind) {
    switch (kind) {
        case ActKind::relu: return relu(x);
        case ActKind::sigmoid: return sigmoid(x);
        default: return softplus(x);
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, [](double x, double y) { return x / y; }, "div");
}
inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::map(x, [s](double v) { return v + s; });
}
inline Tensor mul_scalar(const Tensor& x, double s) {
    return detail::map(x, [s](double v) { return v * s; });
}

// ---------------------------------------------------------------------------
// Convolution. Kernel layout (outC, inC, kH, kW); zero padding;
// output (N, outC, (H + 2p - kH)/stride + 1, (W + 2p - kW)/stride + 1).
// ---------------------------------------------------------------------------

inline Shape conv2d_out_shape(const Shape& in, const Shape& k, int stride, int pad) {
    if (in.c != k.c)
        dim_error("conv2d: input channels " + std::to_string(in.c) + " != kernel inC " +
                  std::to_string(k.c));
    if (stride < 1) dim_error("conv2d: stride must be >= 1");
    if (pad < 0) dim_error("conv2d: pad must be >= 0");
    int ho = (in.h + 2 * pad - k.h) / stride + 1;
    int wo = (in.w + 2 * pad - k.w) / stride + 1;
    if (ho < 1 || wo < 1) dim_error("conv2d: kernel larger than padded input");
    return Shape{in.n, k.n, ho, wo};
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const double* bias, int stride,
                     int pad) {
    const Shape is = input.shape();
    const Shape ks = kernel.shape();
    const Shape os = conv2d_out_shape(is, ks, stride, pad);
    Tensor out(os);

    const double* in = input.data();
    const double* kn = kernel.data();
    double* dst = out.data();
    const long long rows = static_cast<long long>(os.n) * os.c * os.h;

    parallel_for(rows, [&](long long r0, long long r1) {
        for (long long r = r0; r < r1; ++r) {
            int oy = static_cast<int>(r % os.h);
            int oc = static_cast<int>((r / os.h) % os.c);
            int n = static_cast<int>(r / (static_cast<long long>(os.h) * os.c));
            double* orow = dst + r * os.w;
            int iy0 = oy * stride - pad;
            int ky_lo = std::max(0, -iy0);
            int ky_hi = std::min(ks.h, is.h - iy0);
            double b = bias ? bias[oc] : 0.0;
            for (int ox = 0; ox < os.w; ++ox) {
                int ix0 = ox * stride - pad;
                int kx_lo = std::max(0, -ix0);
                int kx_hi = std::min(ks.w, is.w - ix0);
                double acc = b;
                for (int ic = 0; ic < is.c; ++ic) {
                    const double* iplane = in + ((static_cast<long long>(n) * is.c + ic) * is.h) * is.w;
                    const double* kplane = kn + ((static_cast<long long>(oc) * ks.c + ic) * ks.h) * ks.w;
                    for (int ky = ky_lo; ky < ky_hi; ++ky) {
                        const double* irow = iplane + static_cast<long long>(iy0 + ky) * is.w + ix0;
                        const double* krow = kplane + static_cast<long long>(ky) * ks.w;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) acc += irow[kx] * krow[kx];
                    }
                }
                orow[ox] = acc;
            }
        }
    });
    return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const std::optional<std::vector<double>>& bias, int stride, int pad) {
    if (bias && static_cast<int>(bias->size()) != kernel.shape().n)
        dim_error("conv2d: bias length != outC");
    return conv2d(input, kernel, bias ? bias->data() : nullptr, stride, pad);
}

// ---------------------------------------------------------------------------
// Resize (integer upscale only). Bilinear uses the align-corners=false
// convention: src = (dst + 0.5)/scale - 0.5, borders replicated.
// ---------------------------------------------------------------------------

inline Tensor resize_nearest(const Tensor& x, int scale) {
    if (scale < 1) dim_error("resize: scale must be >= 1");
    const Shape is = x.shape();
    Tensor out(Shape{is.n, is.c, is.h * scale, is.w * scale});
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int y = 0; y < is.h * scale; ++y) {
                const double* irow = x.data() + x.index(n, c, y / scale, 0);
                double* orow = out.data() + out.index(n, c, y, 0);
                for (int xo = 0; xo < is.w * scale; ++xo) orow[xo] = irow[xo / scale];
            }
    return out;
}

namespace detail {

struct LinearTap {
    int i0, i1;
    double w0, w1;
};

inline LinearTap linear_tap(int dst, int scale, int src_len) {
    double src = (dst + 0.5) / scale - 0.5;
    double f = std::floor(src);
    int i0 = static_cast<int>(f);
    double t = src - f;
    LinearTap tap;
    tap.i0 = std::clamp(i0, 0, src_len - 1);
    tap.i1 = std::clamp(i0 + 1, 0, src_len - 1);
    tap.w0 = 1.0 - t;
    tap.w1 = t;
    return tap;
}

}  // namespace detail

inline Tensor resize_bilinear(const Tensor& x, int scale) {
    if (scale < 1) dim_error("resize: scale must be >= 1");
    if (scale == 1) return x;
    const Shape is = x.shape();
    Tensor out(Shape{is.n, is.c, is.h * scale, is.w * scale});
    std::vector<detail::LinearTap> xtaps(static_cast<size_t>(is.w) * scale);
    for (int xo = 0; xo < is.w * scale; ++xo) xtaps[xo] = detail::linear_tap(xo, scale, is.w);
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int yo = 0; yo < is.h * scale; ++yo) {
                auto ty = detail::linear_tap(yo, scale, is.h);
                const double* r0 = x.data() + x.index(n, c, ty.i0, 0);
                const double* r1 = x.data() + x.index(n, c, ty.i1, 0);
                double* orow = out.data() + out.index(n, c, yo, 0);
                for (int xo = 0; xo < is.w * scale; ++xo) {
                    const auto& tx = xtaps[xo];
                    orow[xo] = ty.w0 * (tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1]) +
                               ty.w1 * (tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1]);
                }
            }
    return out;
}

inline Tensor resize(const Tensor& x, int scale, ResizeKind kind) {
    return kind == ResizeKind::nearest ? resize_nearest(x, scale) : resize_bilinear(x, scale);
}

/// Mean over non-overlapping s x s blocks; H and W must be divisible by s.
inline Tensor downsample_area(const Tensor& x, int s) {
    if (s < 1) dim_error("downsample_area: scale must be >= 1");
    const Shape is = x.shape();
    if (is.h % s != 0 || is.w % s != 0)
        dim_error("downsample_area: spatial dims not divisible by " + std::to_string(s));
    Tensor out(Shape{is.n, is.c, is.h / s, is.w / s});
    const double inv = 1.0 / (static_cast<double>(s) * s);
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int y = 0; y < is.h / s; ++y)
                for (int x2 = 0; x2 < is.w / s; ++x2) {
                    double acc = 0.0;
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx) acc += x.at(n, c, y * s + dy, x2 * s + dx);
                    out.at(n, c, y, x2) = acc * inv;
                }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concat / slice
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        dim_error("concat_channels: batch/spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
    Tensor out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    const long long plane = static_cast<long long>(sa.h) * sa.w;
    for (int n = 0; n < sa.n; ++n) {
        std::memcpy(out.data() + out.index(n, 0, 0, 0), a.data() + a.index(n, 0, 0, 0),
                    sizeof(double) * static_cast<size_t>(plane * sa.c));
        std::memcpy(out.data() + out.index(n, sa.c, 0, 0), b.data() + b.index(n, 0, 0, 0),
                    sizeof(double) * static_cast<size_t>(plane * sb.c));
    }
    return out;
}

/// Channels [c0, c0+count) as a new tensor.
inline Tensor slice_channels(const Tensor& x, int c0, int count) {
    const Shape is = x.shape();
    if (c0 < 0 || count < 1 || c0 + count > is.c) dim_error("slice_channels: range out of bounds");
    Tensor out(Shape{is.n, count, is.h, is.w});
    const long long plane = static_cast<long long>(is.h) * is.w;
    for (int n = 0; n < is.n; ++n)
        std::memcpy(out.data() + out.index(n, 0, 0, 0), x.data() + x.index(n, c0, 0, 0),
                    sizeof(double) * static_cast<size_t>(plane * count));
    return out;
}

// ---------------------------------------------------------------------------
// Pooling selection. Indices are flat offsets into the input tensor,
// one per output element; ties resolve to the first in row-major order.
// ---------------------------------------------------------------------------

struct PoolIndex {
    Shape out_shape;
    std::vector<long long> src;  // flat input offset per output element
};

inline PoolIndex argmax_pool_index(const Tensor& key, int window) {
    const Shape is = key.shape();
    if (window < 1) dim_error("pool: window must be >= 1");
    if (is.h % window != 0 || is.w % window != 0)
        dim_error("pool: spatial dims " + to_string(is) + " not divisible by window " +
                  std::to_string(window));
    PoolIndex idx;
    idx.out_shape = Shape{is.n, is.c, is.h / window, is.w / window};
    idx.src.resize(static_cast<size_t>(idx.out_shape.numel()));
    size_t o = 0;
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int y = 0; y < idx.out_shape.h; ++y)
                for (int x = 0; x < idx.out_shape.w; ++x) {
                    long long best = key.index(n, c, y * window, x * window);
                    double bestv = key[static_cast<size_t>(best)];
                    for (int dy = 0; dy < window; ++dy)
                        for (int dx = 0; dx < window; ++dx) {
                            long long i = key.index(n, c, y * window + dy, x * window + dx);
                            double v = key[static_cast<size_t>(i)];
                            if (v > bestv) {
                                bestv = v;
                                best = i;
                            }
                        }
                    idx.src[o++] = best;
                }
    return idx;
}

inline Tensor pool_select(const Tensor& x, const PoolIndex& idx) {
    Tensor out(idx.out_shape);
    for (size_t i = 0; i < idx.src.size(); ++i) out[i] = x[static_cast<size_t>(idx.src[i])];
    return out;
}

// ---------------------------------------------------------------------------
// Strided scatter / gather between resolutions. scatter_stride places
// in(y,x) at out(s*y, s*x) and zeros elsewhere; gather_stride inverts it.
// Destination coordinates are clamped to the valid range, which for
// integer s is inert (s*(H-1) < s*H always).
// ---------------------------------------------------------------------------

inline Tensor scatter_stride(const Tensor& x, int s) {
    if (s < 1) dim_error("scatter_stride: scale must be >= 1");
    const Shape is = x.shape();
    Tensor out(Shape{is.n, is.c, is.h * s, is.w * s});
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int y = 0; y < is.h; ++y) {
                int oy = std::min(y * s, is.h * s - 1);
                for (int x2 = 0; x2 < is.w; ++x2) {
                    int ox = std::min(x2 * s, is.w * s - 1);
                    out.at(n, c, oy, ox) = x.at(n, c, y, x2);
                }
            }
    return out;
}

inline Tensor gather_stride(const Tensor& x, int s) {
    if (s < 1) dim_error("gather_stride: scale must be >= 1");
    const Shape is = x.shape();
    if (is.h % s != 0 || is.w % s != 0)
        dim_error("gather_stride: spatial dims " + to_string(is) + " not divisible by " +
                  std::to_string(s));
    Tensor out(Shape{is.n, is.c, is.h / s, is.w / s});
    for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
            for (int y = 0; y < is.h / s; ++y)
                for (int x2 = 0; x2 < is.w / s; ++x2)
                    out.at(n, c, y, x2) = x.at(n, c, y * s, x2 * s);
    return out;
}

}  // namespace ncup
