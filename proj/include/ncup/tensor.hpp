#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ncup {

static_assert(std::endian::native == std::endian::little,
              "serialization code assumes a little-endian host");

/// Dense 4-D shape: batch, channels, height, width.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    friend bool operator==(const Shape&, const Shape&) = default;

    long long numel() const {
        return static_cast<long long>(n) * c * h * w;
    }
    bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
};

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << "(" << s.n << "," << s.c << "," << s.h << "," << s.w << ")";
    return os.str();
}

[[noreturn]] inline void dim_error(const std::string& msg) {
    throw std::invalid_argument(msg);
}

/// Dense 4-D tensor of 64-bit floats, row-major with width fastest.
/// Tensors are treated as immutable values once an operation has produced
/// them; in-place mutation is reserved for construction and gradient
/// accumulation buffers.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(const Shape& s) : shape_(s) {
        if (!s.valid()) dim_error("tensor shape must have all dims >= 1, got " + to_string(s));
        data_.assign(static_cast<size_t>(s.numel()), 0.0);
    }

    Tensor(const Shape& s, std::vector<double> data) : shape_(s), data_(std::move(data)) {
        if (!s.valid()) dim_error("tensor shape must have all dims >= 1, got " + to_string(s));
        if (static_cast<long long>(data_.size()) != s.numel())
            dim_error("tensor data length does not match shape " + to_string(s));
    }

    static Tensor zeros(const Shape& s) { return Tensor(s); }

    static Tensor full(const Shape& s, double v) {
        Tensor t(s);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const Shape& shape() const { return shape_; }
    bool empty() const { return data_.empty(); }
    long long size() const { return static_cast<long long>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    long long index(int n, int c, int y, int x) const {
        return ((static_cast<long long>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }

    double& at(int n, int c, int y, int x) { return data_[static_cast<size_t>(index(n, c, y, x))]; }
    double at(int n, int c, int y, int x) const { return data_[static_cast<size_t>(index(n, c, y, x))]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double sum() const {
        double acc = 0.0;
        for (double v : data_) acc += v;
        return acc;
    }
    double min() const { return *std::min_element(data_.begin(), data_.end()); }
    double max() const { return *std::max_element(data_.begin(), data_.end()); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 plus hand-rolled draws so streams do not
// depend on the standard library's distribution implementations.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        int v = static_cast<int>(uniform() * n);
        return v < n ? v : n - 1;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = std::max(uniform(), 0x1.0p-53);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Tensor uniform_tensor(const Shape& s, double lo, double hi) {
        Tensor t(s);
        for (long long i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
        return t;
    }

    Tensor normal_tensor(const Shape& s, double stddev) {
        Tensor t(s);
        for (long long i = 0; i < t.size(); ++i) t[i] = stddev * normal();
        return t;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Internal parallelism. Disjoint output ranges only, so results are
// bit-identical for any thread count. Cap comes from set_thread_cap()
// (the CLI wires it to NCUP_THREADS); default is single-threaded.
// ---------------------------------------------------------------------------

inline int& thread_cap_ref() {
    static int cap = 1;
    return cap;
}

inline int thread_cap() { return thread_cap_ref(); }

inline void set_thread_cap(int cap) { thread_cap_ref() = std::max(1, cap); }

/// Runs fn(begin, end) over a partition of [0, count).
inline void parallel_for(long long count, const std::function<void(long long, long long)>& fn) {
    int threads = std::min<long long>(thread_cap(), count);
    if (threads <= 1 || count < 4) {
        fn(0, count);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    long long chunk = (count + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        long long b = t * chunk;
        long long e = std::min(count, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Checkpoint tensor format: magic "NCT1", four unsigned 32-bit dims,
// then the float64 payload, everything little-endian and row-major.
// ---------------------------------------------------------------------------

inline void save_tensor(std::ostream& os, const Tensor& t) {
    os.write("NCT1", 4);
    uint32_t dims[4] = {static_cast<uint32_t>(t.shape().n), static_cast<uint32_t>(t.shape().c),
                        static_cast<uint32_t>(t.shape().h), static_cast<uint32_t>(t.shape().w)};
    os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
    if (!os) throw std::runtime_error("tensor write failed");
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NCT1", 4) != 0)
        throw std::runtime_error("bad tensor magic (expected NCT1)");
    uint32_t dims[4] = {};
    is.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!is) throw std::runtime_error("truncated tensor header");
    Shape s{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
            static_cast<int>(dims[3])};
    if (!s.valid()) throw std::runtime_error("invalid tensor dims in stream");
    Tensor t(s);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
    if (!is) throw std::runtime_error("truncated tensor payload");
    return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    save_tensor(os, t);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    return load_tensor(is);
}

}  // namespace ncup
