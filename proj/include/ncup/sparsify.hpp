#pragma once

#include "ncup/autograd.hpp"

namespace ncup {

/// High-resolution data/confidence pair where confidence is zero exactly
/// at unpopulated pixels.
struct SparseGrid {
    Tensor data;
    Tensor conf;
    long long populated = 0;  // per channel: H' * W' for integer scales
};

struct SparseGridV {
    Value data;
    Value conf;
};

/// Scatters low-resolution pixels onto an s*H' x s*W' grid at coordinates
/// (s*x', s*y'); every other pixel holds data 0, conf 0. The map is
/// injective for integer s, which the scatter kernel asserts.
inline SparseGrid forward_map(const Tensor& lowres, const Tensor& weights_lr, int s) {
    if (s < 1) dim_error("forward_map: scale must be a positive integer");
    if (!(lowres.shape() == weights_lr.shape()))
        dim_error("forward_map: data shape " + to_string(lowres.shape()) +
                  " != weights shape " + to_string(weights_lr.shape()));
    SparseGrid g;
    g.data = scatter_stride(lowres, s);
    g.conf = scatter_stride(weights_lr, s);
    g.populated = static_cast<long long>(lowres.shape().h) * lowres.shape().w;

    // Injectivity: each destination receives exactly one source pixel.
    const Shape ls = lowres.shape();
    std::vector<char> hit(static_cast<size_t>(static_cast<long long>(ls.h) * s * ls.w * s), 0);
    for (int y = 0; y < ls.h; ++y)
        for (int x = 0; x < ls.w; ++x) {
            long long d = static_cast<long long>(std::min(y * s, ls.h * s - 1)) * (ls.w * s) +
                          std::min(x * s, ls.w * s - 1);
            if (hit[static_cast<size_t>(d)])
                throw std::logic_error("forward_map: scatter collision (non-injective map)");
            hit[static_cast<size_t>(d)] = 1;
        }
    return g;
}

inline SparseGridV forward_map(Value lowres, Value weights_lr, int s) {
    if (s < 1) dim_error("forward_map: scale must be a positive integer");
    if (!(lowres.shape() == weights_lr.shape()))
        dim_error("forward_map: data/weights shape mismatch");
    return {scatter_stride(lowres, s), scatter_stride(weights_lr, s)};
}

/// Gathers the populated pixels back out of a grid produced by forward_map
/// with the same s; a bit-exact inverse on those pixels.
inline Tensor read_back(const SparseGrid& grid, int s) {
    if (s < 1) dim_error("read_back: scale must be a positive integer");
    return gather_stride(grid.data, s);
}

}  // namespace ncup
