#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "ncup/ops.hpp"
#include "ncup/tensor.hpp"

namespace ncup {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalid when default-constructed.
class Value {
public:
    Value() = default;

    const Tensor& val() const;
    const Shape& shape() const { return val().shape(); }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    explicit operator bool() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Value(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Recorded operation graph for reverse-mode differentiation. Nodes are
/// appended in forward (topological) order; backward() walks them in
/// reverse, each contributing its analytic vector-Jacobian product.
/// Adjoints accumulate additively across uses of the same node.
class Tape {
public:
    using BackFn = std::function<void(Tape&, int self)>;

    Tape() : uid_(next_uid()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Process-unique id; lets callers detect a fresh tape reusing the
    /// stack address of a destroyed one.
    uint64_t uid() const { return uid_; }

    Value leaf(Tensor v, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(v), nullptr, Tensor{}, requires_grad});
        return Value(this, static_cast<int>(nodes_.size()) - 1);
    }

    Value constant(Tensor v) { return leaf(std::move(v), false); }

    /// Records an op node. `back` may be null when no parent needs gradients.
    Value record(Tensor value, const std::vector<Value>& parents, BackFn back) {
        bool req = false;
        for (const Value& p : parents) {
            if (p.tape() != this) dim_error("tape: op mixes values from different tapes");
            req = req || requires_grad(p.id());
        }
        nodes_.push_back(Node{std::move(value), req ? std::move(back) : BackFn{}, Tensor{}, req});
        return Value(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& value(const Value& v) const { return value(v.id()); }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    /// Adjoint buffer of a node, allocated to zeros on first touch.
    Tensor& adjoint_mut(int id) {
        Node& nd = nodes_[static_cast<size_t>(id)];
        if (nd.adjoint.empty()) nd.adjoint = Tensor::zeros(nd.value.shape());
        return nd.adjoint;
    }

    void accumulate(int id, const Tensor& t) {
        Tensor& a = adjoint_mut(id);
        for (long long i = 0, n = a.size(); i < n; ++i) a[static_cast<size_t>(i)] += t[static_cast<size_t>(i)];
    }

    const Tensor& adjoint_of(int id) const { return nodes_[static_cast<size_t>(id)].adjoint; }

    /// Gradient of the last backward() w.r.t. `v`; zeros if v was not reached.
    Tensor grad(const Value& v) const {
        const Node& nd = nodes_[static_cast<size_t>(v.id())];
        return nd.adjoint.empty() ? Tensor::zeros(nd.value.shape()) : nd.adjoint;
    }

    /// Reverse pass seeded with `seed` at `out`. One backward per tape.
    void backward(const Value& out, const Tensor& seed) {
        if (out.tape() != this) dim_error("backward: value not on this tape");
        if (!(seed.shape() == value(out).shape()))
            dim_error("backward: seed-adjoint shape " + to_string(seed.shape()) +
                      " != output shape " + to_string(value(out).shape()));
        if (ran_backward_) throw std::logic_error("backward: tape already differentiated");
        ran_backward_ = true;
        adjoint_mut(out.id()) = seed;
        for (int i = out.id(); i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (!nd.back || nd.adjoint.empty()) continue;
            nd.back(*this, i);
        }
    }

    /// Backward for a scalar-shaped output, seeded with 1.
    void backward_scalar(const Value& out) {
        backward(out, Tensor::full(value(out).shape(), 1.0));
    }

    size_t node_count() const { return nodes_.size(); }

private:
    static uint64_t next_uid() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    struct Node {
        Tensor value;
        BackFn back;
        Tensor adjoint;
        bool needs_grad;
    };
    uint64_t uid_;
    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

inline const Tensor& Value::val() const {
    if (!tape_) throw std::logic_error("Value: accessing default-constructed handle");
    return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
    Tape& t = *a.tape();
    int ia = a.id(), ib = b.id();
    return t.record(add(a.val(), b.val()), {a, b}, [ia, ib](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, adj);
        if (tp.requires_grad(ib)) tp.accumulate(ib, adj);
    });
}

inline Value sub(Value a, Value b) {
    Tape& t = *a.tape();
    int ia = a.id(), ib = b.id();
    return t.record(sub(a.val(), b.val()), {a, b}, [ia, ib](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, adj);
        if (tp.requires_grad(ib)) {
            Tensor& g = tp.adjoint_mut(ib);
            for (long long i = 0; i < g.size(); ++i) g[static_cast<size_t>(i)] -= adj[static_cast<size_t>(i)];
        }
    });
}

inline Value mul(Value a, Value b) {
    Tape& t = *a.tape();
    int ia = a.id(), ib = b.id();
    return t.record(mul(a.val(), b.val()), {a, b}, [ia, ib](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        if (tp.requires_grad(ia)) {
            const Tensor& bv = tp.value(ib);
            Tensor& g = tp.adjoint_mut(ia);
            for (long long i = 0; i < g.size(); ++i)
                g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] * bv[static_cast<size_t>(i)];
        }
        if (tp.requires_grad(ib)) {
            const Tensor& av = tp.value(ia);
            Tensor& g = tp.adjoint_mut(ib);
            for (long long i = 0; i < g.size(); ++i)
                g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] * av[static_cast<size_t>(i)];
        }
    });
}

inline Value div(Value a, Value b) {
    Tape& t = *a.tape();
    int ia = a.id(), ib = b.id();
    return t.record(div(a.val(), b.val()), {a, b}, [ia, ib](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& bv = tp.value(ib);
        if (tp.requires_grad(ia)) {
            Tensor& g = tp.adjoint_mut(ia);
            for (long long i = 0; i < g.size(); ++i)
                g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] / bv[static_cast<size_t>(i)];
        }
        if (tp.requires_grad(ib)) {
            const Tensor& out = tp.value(self);
            Tensor& g = tp.adjoint_mut(ib);
            for (long long i = 0; i < g.size(); ++i)
                g[static_cast<size_t>(i)] -=
                    adj[static_cast<size_t>(i)] * out[static_cast<size_t>(i)] / bv[static_cast<size_t>(i)];
        }
    });
}

inline Value add_scalar(Value a, double s) {
    Tape& t = *a.tape();
    int ia = a.id();
    return t.record(add_scalar(a.val(), s), {a}, [ia](Tape& tp, int self) {
        if (tp.requires_grad(ia)) tp.accumulate(ia, tp.adjoint_of(self));
    });
}

inline Value mul_scalar(Value a, double s) {
    Tape& t = *a.tape();
    int ia = a.id();
    return t.record(mul_scalar(a.val(), s), {a}, [ia, s](Tape& tp, int self) {
        if (!tp.requires_grad(ia)) return;
        const Tensor& adj = tp.adjoint_of(self);
        Tensor& g = tp.adjoint_mut(ia);
        for (long long i = 0; i < g.size(); ++i) g[static_cast<size_t>(i)] += s * adj[static_cast<size_t>(i)];
    });
}

inline Value relu(Value a) {
    Tape& t = *a.tape();
    int ia = a.id();
    return t.record(relu(a.val()), {a}, [ia](Tape& tp, int self) {
        if (!tp.requires_grad(ia)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& x = tp.value(ia);
        Tensor& g = tp.adjoint_mut(ia);
        for (long long i = 0; i < g.size(); ++i)
            if (x[static_cast<size_t>(i)] > 0.0) g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)];
    });
}

inline Value sigmoid(Value a) {
    Tape& t = *a.tape();
    int ia = a.id();
    return t.record(sigmoid(a.val()), {a}, [ia](Tape& tp, int self) {
        if (!tp.requires_grad(ia)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& y = tp.value(self);
        Tensor& g = tp.adjoint_mut(ia);
        for (long long i = 0; i < g.size(); ++i) {
            double s = y[static_cast<size_t>(i)];
            g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] * s * (1.0 - s);
        }
    });
}

inline Value softplus(Value a) {
    Tape& t = *a.tape();
    int ia = a.id();
    return t.record(softplus(a.val()), {a}, [ia](Tape& tp, int self) {
        if (!tp.requires_grad(ia)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& x = tp.value(ia);
        Tensor& g = tp.adjoint_mut(ia);
        for (long long i = 0; i < g.size(); ++i)
            g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] * sigmoid_scalar(x[static_cast<size_t>(i)]);
    });
}

inline Value activation(Value x, ActKind kind) {
    switch (kind) {
        case ActKind::relu: return relu(x);
        case ActKind::sigmoid: return sigmoid(x);
        default: return softplus(x);
    }
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

/// Full reduction to a (1,1,1,1) scalar tensor.
inline Value sum(Value a) {
    Tape& t = *a.tape();
    int ia = a.id();
    Tensor out(Shape{1, 1, 1, 1});
    out[0] = a.val().sum();
    return t.record(std::move(out), {a}, [ia](Tape& tp, int self) {
        if (!tp.requires_grad(ia)) return;
        double s = tp.adjoint_of(self)[0];
        Tensor& g = tp.adjoint_mut(ia);
        for (long long i = 0; i < g.size(); ++i) g[static_cast<size_t>(i)] += s;
    });
}

/// Elementwise division by a (1,1,1,1) scalar value.
inline Value div_scalar_value(Value x, Value s) {
    Tape& t = *x.tape();
    if (!(s.shape() == Shape{1, 1, 1, 1})) dim_error("div_scalar_value: divisor must be scalar-shaped");
    int ix = x.id(), is = s.id();
    double sv = s.val()[0];
    return t.record(mul_scalar(x.val(), 1.0 / sv), {x, s}, [ix, is, sv](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        if (tp.requires_grad(ix)) {
            Tensor& g = tp.adjoint_mut(ix);
            for (long long i = 0; i < g.size(); ++i)
                g[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] / sv;
        }
        if (tp.requires_grad(is)) {
            const Tensor& out = tp.value(self);
            double acc = 0.0;
            for (long long i = 0; i < out.size(); ++i)
                acc += adj[static_cast<size_t>(i)] * out[static_cast<size_t>(i)];
            tp.adjoint_mut(is)[0] -= acc / sv;
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline Value conv2d(Value input, Value kernel, std::optional<Value> bias, int stride, int pad) {
    Tape& t = *input.tape();
    const double* bptr = nullptr;
    std::vector<double> bvec;
    if (bias) {
        const Shape bs = bias->shape();
        if (bs.n != 1 || bs.c != kernel.shape().n || bs.h != 1 || bs.w != 1)
            dim_error("conv2d: bias must have shape (1,outC,1,1)");
        bvec.assign(bias->val().data(), bias->val().data() + bs.c);
        bptr = bvec.data();
    }
    Tensor out = conv2d(input.val(), kernel.val(), bptr, stride, pad);
    std::vector<Value> parents{input, kernel};
    if (bias) parents.push_back(*bias);
    int ii = input.id(), ik = kernel.id();
    int ib = bias ? bias->id() : -1;
    return t.record(std::move(out), parents, [ii, ik, ib, stride, pad](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& in = tp.value(ii);
        const Tensor& kn = tp.value(ik);
        const Shape os = adj.shape(), is = in.shape(), ks = kn.shape();
        const bool want_in = tp.requires_grad(ii);
        const bool want_k = tp.requires_grad(ik);
        const bool want_b = ib >= 0 && tp.requires_grad(ib);
        Tensor* din = want_in ? &tp.adjoint_mut(ii) : nullptr;
        Tensor* dk = want_k ? &tp.adjoint_mut(ik) : nullptr;
        Tensor* db = want_b ? &tp.adjoint_mut(ib) : nullptr;
        for (int n = 0; n < os.n; ++n)
            for (int oc = 0; oc < os.c; ++oc)
                for (int oy = 0; oy < os.h; ++oy) {
                    int iy0 = oy * stride - pad;
                    int ky_lo = std::max(0, -iy0);
                    int ky_hi = std::min(ks.h, is.h - iy0);
                    for (int ox = 0; ox < os.w; ++ox) {
                        double g = adj.at(n, oc, oy, ox);
                        if (g == 0.0) continue;
                        if (db) db->at(0, oc, 0, 0) += g;
                        if (!want_in && !want_k) continue;
                        int ix0 = ox * stride - pad;
                        int kx_lo = std::max(0, -ix0);
                        int kx_hi = std::min(ks.w, is.w - ix0);
                        for (int ic = 0; ic < is.c; ++ic)
                            for (int ky = ky_lo; ky < ky_hi; ++ky)
                                for (int kx = kx_lo; kx < kx_hi; ++kx) {
                                    int iy = iy0 + ky, ix = ix0 + kx;
                                    if (din) din->at(n, ic, iy, ix) += g * kn.at(oc, ic, ky, kx);
                                    if (dk) dk->at(oc, ic, ky, kx) += g * in.at(n, ic, iy, ix);
                                }
                    }
                }
    });
}

// ---------------------------------------------------------------------------
// Shape plumbing: concat, slice, resize, scatter/gather, pooling select
// ---------------------------------------------------------------------------

inline Value concat_channels(Value a, Value b) {
    Tape& t = *a.tape();
    int ia = a.id(), ib = b.id();
    int ca = a.shape().c;
    return t.record(concat_channels(a.val(), b.val()), {a, b}, [ia, ib, ca](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        const Shape os = adj.shape();
        if (tp.requires_grad(ia)) {
            Tensor& g = tp.adjoint_mut(ia);
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < ca; ++c)
                    for (int y = 0; y < os.h; ++y)
                        for (int x = 0; x < os.w; ++x) g.at(n, c, y, x) += adj.at(n, c, y, x);
        }
        if (tp.requires_grad(ib)) {
            Tensor& g = tp.adjoint_mut(ib);
            for (int n = 0; n < os.n; ++n)
                for (int c = ca; c < os.c; ++c)
                    for (int y = 0; y < os.h; ++y)
                        for (int x = 0; x < os.w; ++x) g.at(n, c - ca, y, x) += adj.at(n, c, y, x);
        }
    });
}

inline Value slice_channels(Value x, int c0, int count) {
    Tape& t = *x.tape();
    int ix = x.id();
    return t.record(slice_channels(x.val(), c0, count), {x}, [ix, c0](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Shape os = adj.shape();
        Tensor& g = tp.adjoint_mut(ix);
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c)
                for (int y = 0; y < os.h; ++y)
                    for (int x2 = 0; x2 < os.w; ++x2) g.at(n, c0 + c, y, x2) += adj.at(n, c, y, x2);
    });
}

inline Value resize_nearest(Value x, int scale) {
    Tape& t = *x.tape();
    int ix = x.id();
    return t.record(resize_nearest(x.val(), scale), {x}, [ix, scale](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Shape os = adj.shape();
        Tensor& g = tp.adjoint_mut(ix);
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c)
                for (int y = 0; y < os.h; ++y)
                    for (int x2 = 0; x2 < os.w; ++x2)
                        g.at(n, c, y / scale, x2 / scale) += adj.at(n, c, y, x2);
    });
}

inline Value resize_bilinear(Value x, int scale) {
    Tape& t = *x.tape();
    int ix = x.id();
    return t.record(resize_bilinear(x.val(), scale), {x}, [ix, scale](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Shape os = adj.shape();
        Tensor& g = tp.adjoint_mut(ix);
        const Shape is = g.shape();
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c)
                for (int y = 0; y < os.h; ++y) {
                    auto ty = detail::linear_tap(y, scale, is.h);
                    for (int x2 = 0; x2 < os.w; ++x2) {
                        auto tx = detail::linear_tap(x2, scale, is.w);
                        double a = adj.at(n, c, y, x2);
                        g.at(n, c, ty.i0, tx.i0) += a * ty.w0 * tx.w0;
                        g.at(n, c, ty.i0, tx.i1) += a * ty.w0 * tx.w1;
                        g.at(n, c, ty.i1, tx.i0) += a * ty.w1 * tx.w0;
                        g.at(n, c, ty.i1, tx.i1) += a * ty.w1 * tx.w1;
                    }
                }
    });
}

inline Value resize(Value x, int scale, ResizeKind kind) {
    return kind == ResizeKind::nearest ? resize_nearest(x, scale) : resize_bilinear(x, scale);
}

inline Value scatter_stride(Value x, int s) {
    Tape& t = *x.tape();
    int ix = x.id();
    return t.record(scatter_stride(x.val(), s), {x}, [ix, s](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        Tensor& g = tp.adjoint_mut(ix);
        const Shape is = g.shape();
        for (int n = 0; n < is.n; ++n)
            for (int c = 0; c < is.c; ++c)
                for (int y = 0; y < is.h; ++y)
                    for (int x2 = 0; x2 < is.w; ++x2) g.at(n, c, y, x2) += adj.at(n, c, y * s, x2 * s);
    });
}

inline Value gather_stride(Value x, int s) {
    Tape& t = *x.tape();
    int ix = x.id();
    return t.record(gather_stride(x.val(), s), {x}, [ix, s](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        const Shape os = adj.shape();
        Tensor& g = tp.adjoint_mut(ix);
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c)
                for (int y = 0; y < os.h; ++y)
                    for (int x2 = 0; x2 < os.w; ++x2) g.at(n, c, y * s, x2 * s) += adj.at(n, c, y, x2);
    });
}

/// Gather through a precomputed pooling index map. The index choice is
/// treated as constant during differentiation (as with max pooling).
inline Value pool_select(Value x, const PoolIndex& idx) {
    Tape& t = *x.tape();
    int ix = x.id();
    auto src = std::make_shared<std::vector<long long>>(idx.src);
    return t.record(pool_select(x.val(), idx), {x}, [ix, src](Tape& tp, int self) {
        if (!tp.requires_grad(ix)) return;
        const Tensor& adj = tp.adjoint_of(self);
        Tensor& g = tp.adjoint_mut(ix);
        for (size_t i = 0; i < src->size(); ++i)
            g[static_cast<size_t>((*src)[i])] += adj[i];
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

/// Running statistics, updated in train mode, required by eval mode.
struct BatchNormState {
    Tensor running_mean;  // (1,C,1,1)
    Tensor running_var;   // (1,C,1,1), biased
    bool initialized = false;
};

/// Per-channel normalization with learned scale/shift. Train mode uses
/// batch statistics (and updates `state` unless update_running is false);
/// eval mode uses the running statistics accumulated during training.
/// With enabled=false this is the identity.
inline Value batch_norm(Value x, Value gamma, Value beta, BatchNormState& state, BnMode mode,
                        bool enabled = true, double momentum = 0.1, double eps = 1e-5,
                        bool update_running = true) {
    if (!enabled) return x;
    Tape& t = *x.tape();
    const Shape is = x.shape();
    if (gamma.shape().c != is.c || beta.shape().c != is.c)
        dim_error("batch_norm: gamma/beta channel mismatch");

    const int C = is.c;
    const long long m = static_cast<long long>(is.n) * is.h * is.w;
    std::vector<double> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));

    if (mode == BnMode::train) {
        const Tensor& xv = x.val();
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < is.n; ++n)
                for (int y = 0; y < is.h; ++y)
                    for (int x2 = 0; x2 < is.w; ++x2) acc += xv.at(n, c, y, x2);
            mean[static_cast<size_t>(c)] = acc / static_cast<double>(m);
            double acc2 = 0.0;
            for (int n = 0; n < is.n; ++n)
                for (int y = 0; y < is.h; ++y)
                    for (int x2 = 0; x2 < is.w; ++x2) {
                        double d = xv.at(n, c, y, x2) - mean[static_cast<size_t>(c)];
                        acc2 += d * d;
                    }
            var[static_cast<size_t>(c)] = acc2 / static_cast<double>(m);
        }
        if (update_running) {
            if (!state.initialized) {
                state.running_mean = Tensor(Shape{1, C, 1, 1});
                state.running_var = Tensor::full(Shape{1, C, 1, 1}, 1.0);
            }
            for (int c = 0; c < C; ++c) {
                double& rm = state.running_mean.at(0, c, 0, 0);
                double& rv = state.running_var.at(0, c, 0, 0);
                if (!state.initialized) {
                    rm = mean[static_cast<size_t>(c)];
                    rv = var[static_cast<size_t>(c)];
                } else {
                    rm = (1.0 - momentum) * rm + momentum * mean[static_cast<size_t>(c)];
                    rv = (1.0 - momentum) * rv + momentum * var[static_cast<size_t>(c)];
                }
            }
            state.initialized = true;
        }
    } else {
        if (!state.initialized)
            throw std::runtime_error(
                "batch_norm: eval mode requested before any train-mode pass populated statistics");
        for (int c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = state.running_mean.at(0, c, 0, 0);
            var[static_cast<size_t>(c)] = state.running_var.at(0, c, 0, 0);
        }
    }

    Tensor out(is);
    {
        const Tensor& xv = x.val();
        const Tensor& gv = gamma.val();
        const Tensor& bv = beta.val();
        for (int c = 0; c < C; ++c) {
            double istd = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
            double ga = gv.at(0, c, 0, 0), be = bv.at(0, c, 0, 0), mu = mean[static_cast<size_t>(c)];
            for (int n = 0; n < is.n; ++n)
                for (int y = 0; y < is.h; ++y)
                    for (int x2 = 0; x2 < is.w; ++x2)
                        out.at(n, c, y, x2) = ga * (xv.at(n, c, y, x2) - mu) * istd + be;
        }
    }

    int ix = x.id(), ig = gamma.id(), ibe = beta.id();
    bool train_stats = (mode == BnMode::train);
    return t.record(std::move(out), {x, gamma, beta},
                    [ix, ig, ibe, mean, var, eps, train_stats](Tape& tp, int self) {
        const Tensor& adj = tp.adjoint_of(self);
        const Tensor& xv = tp.value(ix);
        const Tensor& gv = tp.value(ig);
        const Shape is = xv.shape();
        const long long m = static_cast<long long>(is.n) * is.h * is.w;
        const bool want_x = tp.requires_grad(ix);
        const bool want_g = tp.requires_grad(ig);
        const bool want_b = tp.requires_grad(ibe);
        Tensor* dx = want_x ? &tp.adjoint_mut(ix) : nullptr;
        Tensor* dg = want_g ? &tp.adjoint_mut(ig) : nullptr;
        Tensor* db = want_b ? &tp.adjoint_mut(ibe) : nullptr;
        for (int c = 0; c < is.c; ++c) {
            double mu = mean[static_cast<size_t>(c)];
            double istd = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
            double ga = gv.at(0, c, 0, 0);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < is.n; ++n)
                for (int y = 0; y < is.h; ++y)
                    for (int x2 = 0; x2 < is.w; ++x2) {
                        double dy = adj.at(n, c, y, x2);
                        sum_dy += dy;
                        sum_dy_xhat += dy * (xv.at(n, c, y, x2) - mu) * istd;
                    }
            if (db) db->at(0, c, 0, 0) += sum_dy;
            if (dg) dg->at(0, c, 0, 0) += sum_dy_xhat;
            if (!dx) continue;
            if (train_stats) {
                // d/dx through the batch mean and variance as well
                double inv_m = 1.0 / static_cast<double>(m);
                for (int n = 0; n < is.n; ++n)
                    for (int y = 0; y < is.h; ++y)
                        for (int x2 = 0; x2 < is.w; ++x2) {
                            double xhat = (xv.at(n, c, y, x2) - mu) * istd;
                            double dy = adj.at(n, c, y, x2);
                            dx->at(n, c, y, x2) +=
                                ga * istd * (dy - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                        }
            } else {
                for (int n = 0; n < is.n; ++n)
                    for (int y = 0; y < is.h; ++y)
                        for (int x2 = 0; x2 < is.w; ++x2)
                            dx->at(n, c, y, x2) += adj.at(n, c, y, x2) * ga * istd;
            }
        }
    });
}

/// Tensor-level convenience overload (throwaway tape).
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, BnMode mode, bool enabled = true,
                         double momentum = 0.1, double eps = 1e-5, bool update_running = true) {
    Tape t;
    return batch_norm(t.constant(x), t.constant(gamma), t.constant(beta), state, mode, enabled,
                      momentum, eps, update_running)
        .val();
}

}  // namespace ncup
