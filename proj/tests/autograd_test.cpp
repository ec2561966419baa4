#include <gtest/gtest.h>

#include "ncup/autograd.hpp"
#include "oracles.hpp"

using namespace ncup;

namespace {

using Builder = std::function<Value(Tape&, const std::vector<Value>&)>;

Tensor away_from_zero(Rng& rng, const Shape& s, double margin = 0.05) {
    Tensor t(s);
    for (long long i = 0; i < t.size(); ++i) {
        double u = rng.uniform(-1, 1);
        t[static_cast<size_t>(i)] = (u >= 0 ? margin : -margin) + u * (1.0 - margin);
    }
    return t;
}

/// Checks analytic gradients of `build` against central finite differences
/// for every input tensor, using a random linear probe of the output as
/// the scalar objective.
void expect_fd_ok(std::vector<Tensor> inputs, const Builder& build, uint64_t seed,
                  double tol = 1e-5) {
    Shape out_shape;
    {
        Tape t;
        std::vector<Value> vs;
        for (auto& in : inputs) vs.push_back(t.leaf(in));
        out_shape = build(t, vs).shape();
    }
    Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
    Tensor probe = rng.uniform_tensor(out_shape, -1, 1);

    auto eval = [&inputs, &build, &probe]() {
        Tape t;
        std::vector<Value> vs;
        for (auto& in : inputs) vs.push_back(t.constant(in));
        Value out = build(t, vs);
        return sum(mul(out, t.constant(probe))).val()[0];
    };

    Tape t;
    std::vector<Value> vs;
    for (auto& in : inputs) vs.push_back(t.leaf(in));
    Value out = build(t, vs);
    Value loss = sum(mul(out, t.constant(probe)));
    t.backward_scalar(loss);
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor g = t.grad(vs[i]);
        auto rep = oracle::fd_check(inputs[i], g, eval);
        EXPECT_LT(rep.max_rel, tol) << "input " << i << ": analytic=" << rep.worst_analytic
                                    << " fd=" << rep.worst_fd << " (seed " << seed << ")";
    }
}

const uint64_t kSeeds[] = {101, 202, 303, 404, 505};

}  // namespace

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    Tensor x = rng.uniform_tensor(Shape{2, 1, 3, 3}, -4, 4);
    Tape t;
    Value xv = t.leaf(x);
    t.backward_scalar(sum(xv));
    Tensor g = t.grad(xv);
    for (long long i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[static_cast<size_t>(i)], 1.0);
}

TEST(Backward, SigmoidAtZeroGivesQuarter) {
    Tensor x(Shape{1, 1, 4, 4});  // zeros
    Tape t;
    Value xv = t.leaf(x);
    t.backward_scalar(sum(sigmoid(xv)));
    Tensor g = t.grad(xv);
    for (long long i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[static_cast<size_t>(i)], 0.25);
}

TEST(Backward, AccumulatesAcrossUses) {
    Tensor x = Tensor::full(Shape{1, 1, 2, 2}, 3.0);
    Tape t;
    Value xv = t.leaf(x);
    Value y = add(xv, xv);
    t.backward_scalar(sum(y));
    Tensor g = t.grad(xv);
    for (long long i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[static_cast<size_t>(i)], 2.0);
}

TEST(Backward, SeedShapeMismatchThrows) {
    Tape t;
    Value xv = t.leaf(Tensor(Shape{1, 1, 2, 2}));
    Value y = relu(xv);
    EXPECT_THROW(t.backward(y, Tensor(Shape{1, 1, 3, 3})), std::invalid_argument);
}

TEST(Backward, SecondBackwardThrows) {
    Tape t;
    Value xv = t.leaf(Tensor(Shape{1, 1, 2, 2}));
    Value y = sum(xv);
    t.backward_scalar(y);
    EXPECT_THROW(t.backward_scalar(y), std::logic_error);
}

TEST(GradCheck, ElementwiseOps) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Shape s{1, 2, 4, 4};
        Tensor a = rng.uniform_tensor(s, -1, 1);
        Tensor b = away_from_zero(rng, s, 0.2);  // divisor stays away from 0
        expect_fd_ok({a, b}, [](Tape&, const std::vector<Value>& v) { return add(v[0], v[1]); }, seed);
        expect_fd_ok({a, b}, [](Tape&, const std::vector<Value>& v) { return sub(v[0], v[1]); }, seed);
        expect_fd_ok({a, b}, [](Tape&, const std::vector<Value>& v) { return mul(v[0], v[1]); }, seed);
        expect_fd_ok({a, b}, [](Tape&, const std::vector<Value>& v) { return div(v[0], v[1]); }, seed);
        expect_fd_ok({a}, [](Tape&, const std::vector<Value>& v) { return add_scalar(v[0], 1.7); }, seed);
        expect_fd_ok({a}, [](Tape&, const std::vector<Value>& v) { return mul_scalar(v[0], -2.5); }, seed);
    }
}

TEST(GradCheck, Activations) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 7);
        Shape s{1, 2, 4, 4};
        Tensor x = away_from_zero(rng, s);  // keep clear of the relu kink
        expect_fd_ok({x}, [](Tape&, const std::vector<Value>& v) { return relu(v[0]); }, seed);
        expect_fd_ok({x}, [](Tape&, const std::vector<Value>& v) { return sigmoid(v[0]); }, seed);
        expect_fd_ok({x}, [](Tape&, const std::vector<Value>& v) { return softplus(v[0]); }, seed);
    }
}

TEST(GradCheck, Conv2dAllArguments) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 13);
        Tensor in = rng.uniform_tensor(Shape{2, 2, 5, 5}, -1, 1);
        Tensor k = rng.uniform_tensor(Shape{3, 2, 3, 3}, -1, 1);
        Tensor bias = rng.uniform_tensor(Shape{1, 3, 1, 1}, -1, 1);
        for (int stride : {1, 2})
            expect_fd_ok({in, k, bias},
                         [stride](Tape&, const std::vector<Value>& v) {
                             return conv2d(v[0], v[1], v[2], stride, 1);
                         },
                         seed);
    }
}

TEST(GradCheck, Conv2dReluSumComposite) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 19);
        Tensor in = rng.uniform_tensor(Shape{1, 2, 5, 5}, -1, 1);
        Tensor k = rng.uniform_tensor(Shape{2, 2, 3, 3}, -1, 1);
        auto eval = [&in, &k]() {
            Tape t;
            return sum(relu(conv2d(t.constant(in), t.constant(k), std::nullopt, 1, 1))).val()[0];
        };
        Tape t;
        Value iv = t.leaf(in), kv = t.leaf(k);
        t.backward_scalar(sum(relu(conv2d(iv, kv, std::nullopt, 1, 1))));
        Tensor gi = t.grad(iv), gk = t.grad(kv);
        EXPECT_LT(oracle::fd_check(in, gi, eval).max_rel, 1e-5);
        EXPECT_LT(oracle::fd_check(k, gk, eval).max_rel, 1e-5);
    }
}

TEST(GradCheck, ShapePlumbing) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 29);
        Tensor a = rng.uniform_tensor(Shape{1, 2, 4, 4}, -1, 1);
        Tensor b = rng.uniform_tensor(Shape{1, 3, 4, 4}, -1, 1);
        expect_fd_ok({a, b},
                     [](Tape&, const std::vector<Value>& v) { return concat_channels(v[0], v[1]); },
                     seed);
        expect_fd_ok({b}, [](Tape&, const std::vector<Value>& v) { return slice_channels(v[0], 1, 2); },
                     seed);
        expect_fd_ok({a}, [](Tape&, const std::vector<Value>& v) { return resize_nearest(v[0], 2); },
                     seed);
        expect_fd_ok({a}, [](Tape&, const std::vector<Value>& v) { return resize_bilinear(v[0], 2); },
                     seed);
        expect_fd_ok({a}, [](Tape&, const std::vector<Value>& v) { return scatter_stride(v[0], 3); },
                     seed);
        Tensor big = rng.uniform_tensor(Shape{1, 1, 6, 6}, -1, 1);
        expect_fd_ok({big}, [](Tape&, const std::vector<Value>& v) { return gather_stride(v[0], 2); },
                     seed);
        Tensor sc = rng.uniform_tensor(Shape{1, 1, 1, 1}, 0.5, 2.0);
        expect_fd_ok({a, sc},
                     [](Tape&, const std::vector<Value>& v) { return div_scalar_value(v[0], v[1]); },
                     seed);
    }
}

TEST(GradCheck, PoolSelect) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 37);
        Tensor key = rng.uniform_tensor(Shape{1, 2, 4, 4}, 0, 1);
        Tensor data = rng.uniform_tensor(Shape{1, 2, 4, 4}, -1, 1);
        PoolIndex idx = argmax_pool_index(key, 2);
        expect_fd_ok({data},
                     [idx](Tape&, const std::vector<Value>& v) { return pool_select(v[0], idx); },
                     seed);
    }
}

TEST(GradCheck, BatchNormTrainMode) {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed + 43);
        Tensor x = rng.uniform_tensor(Shape{2, 3, 4, 4}, -1, 1);
        Tensor g = rng.uniform_tensor(Shape{1, 3, 1, 1}, 0.5, 1.5);
        Tensor b = rng.uniform_tensor(Shape{1, 3, 1, 1}, -0.5, 0.5);
        expect_fd_ok({x, g, b},
                     [](Tape&, const std::vector<Value>& v) {
                         BatchNormState st;
                         return batch_norm(v[0], v[1], v[2], st, BnMode::train);
                     },
                     seed);
    }
}

TEST(GradCheck, BatchNormEvalMode) {
    Rng rng(59);
    Tensor x = rng.uniform_tensor(Shape{2, 3, 4, 4}, -1, 1);
    Tensor g = rng.uniform_tensor(Shape{1, 3, 1, 1}, 0.5, 1.5);
    Tensor b = rng.uniform_tensor(Shape{1, 3, 1, 1}, -0.5, 0.5);
    BatchNormState st;
    {
        Tape t;
        batch_norm(t.leaf(x), t.leaf(g), t.leaf(b), st, BnMode::train);
    }
    expect_fd_ok({x, g, b},
                 [&st](Tape&, const std::vector<Value>& v) {
                     return batch_norm(v[0], v[1], v[2], st, BnMode::eval);
                 },
                 61);
}

TEST(GradCheck, ResizeOnTapeMatchesPlainKernels) {
    Rng rng(71);
    Tensor x = rng.uniform_tensor(Shape{1, 2, 3, 5}, -1, 1);
    Tape t;
    Value xv = t.constant(x);
    EXPECT_TRUE(bitwise_equal(resize(xv, 2, ResizeKind::nearest).val(),
                              resize(x, 2, ResizeKind::nearest)));
    EXPECT_TRUE(bitwise_equal(resize(xv, 2, ResizeKind::bilinear).val(),
                              resize(x, 2, ResizeKind::bilinear)));
}

TEST(Tape, ConstantsSkipGradientWork) {
    Rng rng(83);
    Tensor x = rng.uniform_tensor(Shape{1, 1, 4, 4}, -1, 1);
    Tape t;
    Value c = t.constant(x);
    Value y = mul_scalar(c, 2.0);
    t.backward_scalar(sum(y));
    EXPECT_TRUE(t.adjoint_of(c.id()).empty());
}
