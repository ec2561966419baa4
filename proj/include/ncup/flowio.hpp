#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "ncup/ops.hpp"
#include "ncup/tensor.hpp"

namespace ncup {

/// Two-channel displacement field: channel 0 = u (horizontal),
/// channel 1 = v (vertical), in pixels.
struct FlowField {
    Tensor t;  // (N, 2, H, W)

    FlowField() = default;
    explicit FlowField(Tensor tt) : t(std::move(tt)) {
        if (t.shape().c != 2)
            dim_error("FlowField: expected 2 channels, got " + std::to_string(t.shape().c));
    }

    static FlowField zeros(int n, int h, int w) { return FlowField(Tensor(Shape{n, 2, h, w})); }

    const Shape& shape() const { return t.shape(); }
    double u(int n, int y, int x) const { return t.at(n, 0, y, x); }
    double v(int n, int y, int x) const { return t.at(n, 1, y, x); }
};

// ---------------------------------------------------------------------------
// Middlebury .flo interchange format: little-endian, float32 magic
// 202021.25 (bytes "PIEH"), int32 width, int32 height, then H*W
// interleaved (u,v) float32 pairs, row-major. One field per file.
// ---------------------------------------------------------------------------

constexpr float kFloMagic = 202021.25f;

inline void write_flo(const std::string& path, const FlowField& flow) {
    const Shape s = flow.shape();
    if (s.n != 1) dim_error("write_flo: .flo holds a single field (batch must be 1)");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_flo: cannot open " + path);
    float magic = kFloMagic;
    int32_t w = s.w, h = s.h;
    os.write(reinterpret_cast<const char*>(&magic), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> row(static_cast<size_t>(s.w) * 2);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            row[static_cast<size_t>(2 * x)] = static_cast<float>(flow.u(0, y, x));
            row[static_cast<size_t>(2 * x) + 1] = static_cast<float>(flow.v(0, y, x));
        }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(sizeof(float) * row.size()));
    }
    if (!os) throw std::runtime_error("write_flo: write failed for " + path);
}

inline FlowField read_flo(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_flo: cannot open " + path);
    float magic = 0.0f;
    int32_t w = 0, h = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    if (!is || magic != kFloMagic)
        throw std::runtime_error("read_flo: bad magic in " + path + " (not a .flo file)");
    is.read(reinterpret_cast<char*>(&w), 4);
    is.read(reinterpret_cast<char*>(&h), 4);
    if (!is || w < 1 || h < 1) throw std::runtime_error("read_flo: bad dimensions in " + path);
    FlowField flow = FlowField::zeros(1, h, w);
    std::vector<float> row(static_cast<size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(sizeof(float) * row.size()));
        if (!is) throw std::runtime_error("read_flo: truncated payload in " + path);
        for (int x = 0; x < w; ++x) {
            flow.t.at(0, 0, y, x) = row[static_cast<size_t>(2 * x)];
            flow.t.at(0, 1, y, x) = row[static_cast<size_t>(2 * x) + 1];
        }
    }
    return flow;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Average end-point error: mean over pixels (and batch) of the Euclidean
/// distance between predicted and ground-truth flow vectors.
inline double epe(const FlowField& pred, const FlowField& gt) {
    if (!(pred.shape() == gt.shape()))
        dim_error("epe: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
    const Shape s = pred.shape();
    double acc = 0.0;
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                double du = pred.u(n, y, x) - gt.u(n, y, x);
                double dv = pred.v(n, y, x) - gt.v(n, y, x);
                acc += std::sqrt(du * du + dv * dv);
            }
    return acc / (static_cast<double>(s.n) * s.h * s.w);
}

// ---------------------------------------------------------------------------
// Visualization: HSV color wheel (hue = atan2(v,u), saturation grows with
// magnitude, value = 1) so zero flow renders white.
// ---------------------------------------------------------------------------

namespace detail {

inline void hsv_to_rgb(double h_deg, double s, double v, double rgb[3]) {
    double c = v * s;
    double hp = h_deg / 60.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

}  // namespace detail

/// RGB rendering in [0,1]; max_magnitude <= 0 selects the field's own
/// maximum (or 1 for an all-zero field).
inline Tensor flow_to_color(const FlowField& flow, double max_magnitude = 0.0) {
    const Shape s = flow.shape();
    double maxmag = max_magnitude;
    if (maxmag <= 0.0) {
        for (int n = 0; n < s.n; ++n)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x)
                    maxmag = std::max(maxmag, std::hypot(flow.u(n, y, x), flow.v(n, y, x)));
        if (maxmag <= 0.0) maxmag = 1.0;
    }
    Tensor img(Shape{s.n, 3, s.h, s.w});
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                double u = flow.u(n, y, x), v = flow.v(n, y, x);
                double mag = std::hypot(u, v);
                double hue = std::atan2(v, u) * (180.0 / 3.14159265358979323846);
                if (hue < 0.0) hue += 360.0;
                double sat = std::min(mag / maxmag, 1.0);
                double rgb[3];
                detail::hsv_to_rgb(hue, sat, 1.0, rgb);
                for (int c = 0; c < 3; ++c) img.at(n, c, y, x) = rgb[c];
            }
    return img;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6), 8-bit. The only image codec in the project.
// ---------------------------------------------------------------------------

inline unsigned char quantize_byte(double v) {
    double c = std::min(std::max(v, 0.0), 1.0);
    return static_cast<unsigned char>(std::lround(255.0 * c));
}

/// Writes a (1,3,H,W) tensor with values in [0,1] (clamped) as binary PPM.
inline void write_ppm(const std::string& path, const Tensor& rgb) {
    const Shape s = rgb.shape();
    if (s.n != 1 || s.c != 3) dim_error("write_ppm: expected shape (1,3,H,W), got " + to_string(s));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
    os << "P6\n" << s.w << " " << s.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(s.w) * 3);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(3 * x + c)] = quantize_byte(rgb.at(0, c, y, x));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

/// Reads a binary PPM into a (1,3,H,W) tensor scaled to [0,1].
inline Tensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || w < 1 || h < 1 || maxval != 255)
        throw std::runtime_error("read_ppm: unsupported PPM header in " + path);
    is.get();  // single whitespace after maxval
    Tensor img(Shape{1, 3, h, w});
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!is) throw std::runtime_error("read_ppm: truncated payload in " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(0, c, y, x) = row[static_cast<size_t>(3 * x + c)] / 255.0;
    }
    return img;
}

/// Writes a single-channel confidence map as a grayscale P6 image,
/// mapping [0,1] linearly to [0,255] with clamping.
inline void dump_weights_map(const Tensor& conf, const std::string& path) {
    const Shape s = conf.shape();
    if (s.n != 1 || s.c != 1)
        dim_error("dump_weights_map: expected shape (1,1,H,W), got " + to_string(s));
    Tensor rgb(Shape{1, 3, s.h, s.w});
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c) rgb.at(0, c, y, x) = conf.at(0, 0, y, x);
    write_ppm(path, rgb);
}

}  // namespace ncup
