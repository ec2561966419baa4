#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "ncup/train.hpp"
#include "ncup/upsampler.hpp"
#include "oracles.hpp"

using namespace ncup;

namespace {

std::string tmp_path(const std::string& name) {
    return std::string(::testing::TempDir()) + name;
}

void set_uniform_interp_kernels(NCUPModel& m, double v) {
    for (Param& p : m.params())
        if (p.name.rfind("interp.", 0) == 0)
            p.value = Tensor::full(p.value.shape(), inverse_softplus(v));
}

}  // namespace

TEST(WeightsNet, SigmoidHeadProducesOpenUnitInterval) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 3);
    Rng rng(4);
    Tape t;
    Value w = m.estimate_weights(t, t.constant(rng.uniform_tensor(Shape{2, 2, 6, 6}, -9, 9)),
                                 t.constant(rng.uniform_tensor(Shape{2, 3, 6, 6}, 0, 1)),
                                 BnMode::train);
    EXPECT_EQ(w.shape(), (Shape{2, 2, 6, 6}));
    for (long long i = 0; i < w.val().size(); ++i) {
        EXPECT_GT(w.val()[static_cast<size_t>(i)], 0.0);
        EXPECT_LT(w.val()[static_cast<size_t>(i)], 1.0);
    }
}

TEST(WeightsNet, SoftplusHeadIsPositive) {
    WeightsNetConfig wc;
    wc.final_activation = ActKind::softplus;
    NCUPModel m(wc, InterpNetConfig{}, 4, 3);
    Rng rng(5);
    Tape t;
    Value w = m.estimate_weights(t, t.constant(rng.uniform_tensor(Shape{1, 2, 5, 5}, -2, 2)),
                                 t.constant(rng.uniform_tensor(Shape{1, 3, 5, 5}, 0, 1)),
                                 BnMode::train);
    for (long long i = 0; i < w.val().size(); ++i)
        EXPECT_GT(w.val()[static_cast<size_t>(i)], 0.0);
}

TEST(WeightsNet, ParameterCountMatchesSymbolicFormula) {
    WeightsNetConfig wc;  // flow(2) + RGB(3), (16,8), BN on
    // 5*16*9+16 + 2*16 + 16*8*9+8 + 2*8 + 8*2+2
    EXPECT_EQ(wc.parameter_count(), 1962);
    NCUPModel m(wc, InterpNetConfig{}, 4, 1);
    EXPECT_EQ(m.weights_net_parameter_count(), 1962);

    WeightsNetConfig feat = WeightsNetConfig::feature_guidance(8);
    EXPECT_EQ(feat.parameter_count(),
              10LL * 64 * 9 + 64 + 2 * 64 + 64LL * 32 * 9 + 32 + 2 * 32 + 32LL * 2 + 2);
}

TEST(WeightsNet, NoBatchNormWorksWithoutStatisticsState) {
    WeightsNetConfig wc;
    wc.batch_norm = false;
    EXPECT_EQ(wc.parameter_count(), 1962 - 48);
    NCUPModel m(wc, InterpNetConfig{}, 4, 9);
    Rng rng(6);
    Tape t;
    // eval mode on a single fresh sample: no statistics are required
    Value w = m.estimate_weights(t, t.constant(rng.uniform_tensor(Shape{1, 2, 4, 4}, -1, 1)),
                                 t.constant(rng.uniform_tensor(Shape{1, 3, 4, 4}, 0, 1)),
                                 BnMode::eval);
    EXPECT_TRUE(w.val().all_finite());
}

TEST(WeightsNet, HighResolutionGuidanceIsRejectedWithHint) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 3);
    Tape t;
    try {
        m.estimate_weights(t, t.constant(Tensor(Shape{1, 2, 4, 4})),
                           t.constant(Tensor(Shape{1, 3, 16, 16})), BnMode::train);
        FAIL() << "expected a dimension error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("downsample"), std::string::npos);
    }
}

TEST(InterpNet, ParameterCounts) {
    InterpNetConfig def;
    EXPECT_EQ(def.parameter_count(), 159);
    EXPECT_LE(def.parameter_count(), 300);
    EXPECT_EQ(InterpNetConfig::preset224().parameter_count(), 225);
    InterpNetConfig two;
    two.downsamplings = 2;
    EXPECT_EQ(two.parameter_count(), 259);
    EXPECT_LE(two.parameter_count(), 300);
}

TEST(InterpNet, DenseGridWithUnitWeightsKeepsUnitConfidenceAtCenter) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 1, 17);
    set_uniform_interp_kernels(m, 0.7);
    Rng rng(18);
    Tensor data = rng.uniform_tensor(Shape{1, 1, 32, 32}, -2, 2);
    Tensor conf = Tensor::full(Shape{1, 1, 32, 32}, 1.0);
    Tape t;
    auto out = m.interpolate(t, t.constant(data), t.constant(conf));
    EXPECT_FALSE(out.degenerate);
    EXPECT_NEAR(out.conf.val().at(0, 0, 16, 16), 1.0, 1e-9);
    // averaging never leaves the input range
    EXPECT_GE(out.data.val().min(), data.min() - 1e-6);
    EXPECT_LE(out.data.val().max(), data.max() + 1e-6);
}

TEST(InterpNet, ConstantPopulatedValuePropagatesEverywhere) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 19);
    Rng rng(20);
    const double c = -3.75;
    Tensor low = Tensor::full(Shape{1, 1, 8, 8}, c);
    Tensor w = rng.uniform_tensor(Shape{1, 1, 8, 8}, 0.3, 0.9);
    SparseGrid grid = forward_map(low, w, 4);
    Tape t;
    auto out = m.interpolate(t, t.constant(grid.data), t.constant(grid.conf));
    for (long long i = 0; i < out.data.val().size(); ++i) {
        EXPECT_NEAR(out.data.val()[static_cast<size_t>(i)], c, 1e-6);
        EXPECT_GT(out.conf.val()[static_cast<size_t>(i)], 0.0);
    }
}

TEST(InterpNet, RandomGridDensifiesWithinRange) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 21);
    set_uniform_interp_kernels(m, 1.0);
    Rng rng(22);
    Tensor low = rng.uniform_tensor(Shape{1, 1, 8, 8}, -4, 4);
    Tensor w = rng.uniform_tensor(Shape{1, 1, 8, 8}, 0.2, 1.0);
    SparseGrid grid = forward_map(low, w, 4);
    Tape t;
    auto out = m.interpolate(t, t.constant(grid.data), t.constant(grid.conf));
    for (long long i = 0; i < out.data.val().size(); ++i) {
        EXPECT_GT(out.conf.val()[static_cast<size_t>(i)], 0.0);
        EXPECT_GE(out.data.val()[static_cast<size_t>(i)], low.min() - 1e-6);
        EXPECT_LE(out.data.val()[static_cast<size_t>(i)], low.max() + 1e-6);
    }
}

TEST(InterpNet, ZeroPopulatedGridIsFlaggedNotThrown) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 23);
    Tensor zeros(Shape{1, 1, 16, 16});
    Tape t;
    auto out = m.interpolate(t, t.constant(zeros), t.constant(zeros));
    EXPECT_TRUE(out.degenerate);
    EXPECT_LE(out.conf.val().max(), 1e-12);
    EXPECT_TRUE(out.data.val().all_finite());
}

TEST(Upsampler, ZeroFlowStaysZero) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 29);
    Rng rng(30);
    FlowField zero = FlowField::zeros(1, 8, 8);
    Tensor guid = rng.uniform_tensor(Shape{1, 3, 8, 8}, 0, 1);
    FlowField up = ncup_upsample(zero, guid, m);
    EXPECT_EQ(up.shape(), (Shape{1, 2, 32, 32}));
    for (long long i = 0; i < up.t.size(); ++i)
        EXPECT_NEAR(up.t[static_cast<size_t>(i)], 0.0, 1e-6);
}

TEST(Upsampler, ConstantFlowIsPreserved) {
    for (uint64_t seed : {31u, 32u, 33u}) {  // any model parameters
        NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, seed);
        Rng rng(seed + 1);
        Tensor f(Shape{1, 2, 8, 8});
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                f.at(0, 0, y, x) = 2.0;
                f.at(0, 1, y, x) = -1.0;
            }
        Tensor guid = rng.uniform_tensor(Shape{1, 3, 8, 8}, 0, 1);
        FlowField up = ncup_upsample(FlowField(f), guid, m);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                EXPECT_NEAR(up.u(0, y, x), 2.0, 1e-6);
                EXPECT_NEAR(up.v(0, y, x), -1.0, 1e-6);
            }
    }
}

TEST(Upsampler, OutputStaysWithinPerChannelInputRange) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 37);
    Rng rng(38);
    Tensor f = rng.uniform_tensor(Shape{1, 2, 8, 8}, -8, 8);
    Tensor guid = rng.uniform_tensor(Shape{1, 3, 8, 8}, 0, 1);
    FlowField up = ncup_upsample(FlowField(f), guid, m);
    for (int c = 0; c < 2; ++c) {
        Tensor in_ch = slice_channels(f, c, 1);
        Tensor out_ch = slice_channels(up.t, c, 1);
        EXPECT_GE(out_ch.min(), in_ch.min() - 1e-6);
        EXPECT_LE(out_ch.max(), in_ch.max() + 1e-6);
    }
}

TEST(Upsampler, FullDensificationForAllScales) {
    for (int s : {2, 4, 8}) {
        NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, s, 41);
        Rng rng(42);
        Tensor f = rng.uniform_tensor(Shape{1, 2, 8, 8}, -3, 3);
        Tensor guid = rng.uniform_tensor(Shape{1, 3, 8, 8}, 0, 1);
        auto full = ncup_upsample_full(FlowField(f), guid, m);
        EXPECT_FALSE(full.degenerate);
        EXPECT_GT(full.conf.min(), 0.0) << "scale " << s;
    }
}

TEST(Upsampler, GradientsReachTheWeightsNet) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 43);
    Rng rng(44);
    Tensor f = rng.uniform_tensor(Shape{2, 2, 8, 8}, -5, 5);
    Tensor guid = rng.uniform_tensor(Shape{2, 3, 8, 8}, 0, 1);
    Tensor gt = rng.uniform_tensor(Shape{2, 2, 32, 32}, -5, 5);
    Tape t;
    auto out = m.upsample(t, t.constant(f), t.constant(guid), BnMode::train);
    Value loss = multiscale_loss(t, {{1, out.flow}}, {{1, gt}}, LossConfig{});
    m.zero_grad();
    t.backward_scalar(loss);
    m.accumulate_grads(t);
    double wnet_norm = 0.0;
    bool all_finite = true;
    for (const Param& p : m.params()) {
        for (long long i = 0; i < p.grad.size(); ++i) {
            all_finite = all_finite && std::isfinite(p.grad[static_cast<size_t>(i)]);
            if (p.name.rfind("wnet.", 0) == 0)
                wnet_norm += std::abs(p.grad[static_cast<size_t>(i)]);
        }
    }
    EXPECT_TRUE(all_finite);
    EXPECT_GT(wnet_norm, 0.0);
}

TEST(Upsampler, UntrainedModelVsBilinearShapesAndFiniteness) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 55);
    Rng rng(56);
    // smooth random flow: bilinear upsampling of low-frequency noise
    FlowField flow_lr(resize_bilinear(rng.uniform_tensor(Shape{1, 2, 4, 4}, -3, 3), 2));
    Tensor guid = rng.uniform_tensor(Shape{1, 3, 8, 8}, 0, 1);
    FlowField up = ncup_upsample(flow_lr, guid, m);
    FlowField bl = bilinear_baseline(flow_lr, 4, false);
    EXPECT_EQ(up.shape(), (Shape{1, 2, 32, 32}));
    EXPECT_EQ(bl.shape(), up.shape());
    EXPECT_TRUE(up.t.all_finite());
    EXPECT_TRUE(bl.t.all_finite());
}

TEST(WeightsNet, StandardChannelPresetsAreFlagged) {
    EXPECT_TRUE(WeightsNetConfig{}.standard_channels());
    EXPECT_TRUE(WeightsNetConfig::feature_guidance(8).standard_channels());
    WeightsNetConfig odd;
    odd.ch1 = 12;
    EXPECT_FALSE(odd.standard_channels());
}

TEST(Upsampler, TotalParameterBudget) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 1);
    EXPECT_GE(m.weights_net_parameter_count(), 1800);
    EXPECT_LE(m.weights_net_parameter_count(), 2200);
    EXPECT_GE(m.parameter_count(), 1900);
    EXPECT_LE(m.parameter_count(), 2600);
    EXPECT_EQ(m.parameter_count(),
              m.weights_net_parameter_count() + m.interp_net_parameter_count());
}

TEST(Upsampler, SameSeedSameParameters) {
    NCUPModel a(WeightsNetConfig{}, InterpNetConfig{}, 4, 77);
    NCUPModel b(WeightsNetConfig{}, InterpNetConfig{}, 4, 77);
    NCUPModel c(WeightsNetConfig{}, InterpNetConfig{}, 4, 78);
    bool all_eq = true, any_diff = false;
    for (size_t i = 0; i < a.params().size(); ++i) {
        all_eq = all_eq && bitwise_equal(a.params()[i].value, b.params()[i].value);
        any_diff = any_diff || !bitwise_equal(a.params()[i].value, c.params()[i].value);
    }
    EXPECT_TRUE(all_eq);
    EXPECT_TRUE(any_diff);
}

TEST(Baseline, BilinearIdentityAndConstants) {
    Rng rng(50);
    Tensor f = rng.uniform_tensor(Shape{1, 2, 4, 4}, -2, 2);
    FlowField id = bilinear_baseline(FlowField(f), 1);
    EXPECT_TRUE(bitwise_equal(id.t, f));

    Tensor c = Tensor::full(Shape{1, 2, 4, 4}, 1.5);
    FlowField up = bilinear_baseline(FlowField(c), 3, /*rescale_values=*/false);
    for (long long i = 0; i < up.t.size(); ++i)
        EXPECT_DOUBLE_EQ(up.t[static_cast<size_t>(i)], 1.5);
}

TEST(Baseline, LinearRampMatchesClosedForm) {
    const int W = 6, H = 4, S = 2;
    Tensor f(Shape{1, 2, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            f.at(0, 0, y, x) = 0.25 * x;
            f.at(0, 1, y, x) = -0.5 * x;
        }
    FlowField up = bilinear_baseline(FlowField(f), S, /*rescale_values=*/false);
    for (int y = 0; y < H * S; ++y)
        for (int x = 1; x < W * S - 1; ++x) {
            double src = (x + 0.5) / S - 0.5;
            EXPECT_NEAR(up.u(0, y, x), 0.25 * src, 1e-12);
            EXPECT_NEAR(up.v(0, y, x), -0.5 * src, 1e-12);
        }
}

TEST(Baseline, RescaleFlagMultipliesDisplacements) {
    Tensor c = Tensor::full(Shape{1, 2, 4, 4}, 1.0);
    FlowField up = bilinear_baseline(FlowField(c), 4);  // default: rescale on
    for (long long i = 0; i < up.t.size(); ++i)
        EXPECT_DOUBLE_EQ(up.t[static_cast<size_t>(i)], 4.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    WeightsNetConfig wc;
    wc.final_activation = ActKind::softplus;
    InterpNetConfig ic;
    ic.downsamplings = 2;
    ic.pooling = PoolingMode::max;
    NCUPModel m(wc, ic, 8, 91);

    // give the BN buffers state so they round-trip too
    Rng rng(92);
    {
        Tape t;
        m.estimate_weights(t, t.constant(rng.uniform_tensor(Shape{2, 2, 4, 4}, -1, 1)),
                           t.constant(rng.uniform_tensor(Shape{2, 3, 4, 4}, 0, 1)), BnMode::train);
    }

    std::string p1 = tmp_path("ckpt_a.ncup");
    std::string p2 = tmp_path("ckpt_b.ncup");
    m.save(p1);
    NCUPModel back = NCUPModel::load(p1);
    back.save(p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    EXPECT_FALSE(s1.empty());

    EXPECT_EQ(back.scale(), 8);
    EXPECT_EQ(back.interp_config().downsamplings, 2);
    EXPECT_EQ(back.weights_config().final_activation, ActKind::softplus);
    for (size_t i = 0; i < m.params().size(); ++i)
        EXPECT_TRUE(bitwise_equal(m.params()[i].value, back.params()[i].value));
    EXPECT_TRUE(back.stats_ready());
}

TEST(Checkpoint, CorruptedFileFailsAudit) {
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 93);
    std::string p = tmp_path("ckpt_corrupt.ncup");
    m.save(p);
    EXPECT_TRUE(audit_checkpoint(p).ok);

    // truncate the file: the audit must fail, not crash
    std::ifstream in(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    EXPECT_FALSE(audit_checkpoint(p).ok);
}
