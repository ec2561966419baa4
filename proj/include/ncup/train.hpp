#pragma once

#include <array>
#include <functional>
#include <map>
#include <set>

#include "ncup/upsampler.hpp"

namespace ncup {

// ---------------------------------------------------------------------------
// Multi-scale loss: sum over levels p of alpha_p times the mean (over
// pixels and batch) squared 2-norm of the per-pixel flow error.
// ---------------------------------------------------------------------------

struct LossConfig {
    std::set<int> levels = {1};
    std::map<int, double> alpha = {{1, 0.02}, {3, 0.32}, {4, 0.08},
                                   {5, 0.02}, {6, 0.01}, {7, 0.005}};

    double alpha_at(int level) const {
        auto it = alpha.find(level);
        if (it == alpha.end())
            throw std::invalid_argument("loss config: no alpha for level " + std::to_string(level));
        if (it->second <= 0.0)
            throw std::invalid_argument("loss config: alpha must be positive at level " +
                                        std::to_string(level));
        return it->second;
    }
};

inline double multiscale_loss(const std::map<int, FlowField>& preds,
                              const std::map<int, FlowField>& gts, const LossConfig& cfg) {
    double total = 0.0;
    for (int level : cfg.levels) {
        auto pit = preds.find(level);
        auto git = gts.find(level);
        if (pit == preds.end() || git == gts.end())
            throw std::invalid_argument("multiscale_loss: missing level " + std::to_string(level));
        const Tensor& p = pit->second.t;
        const Tensor& g = git->second.t;
        if (!(p.shape() == g.shape()))
            dim_error("multiscale_loss: level " + std::to_string(level) + " shape mismatch");
        const Shape s = p.shape();
        // Per-item partial sums reduced in sorted order, so the loss is
        // exactly invariant under permutation of batch items.
        const long long item = p.size() / s.n;
        std::vector<double> partials(static_cast<size_t>(s.n));
        for (int n = 0; n < s.n; ++n) {
            double acc = 0.0;
            for (long long i = n * item; i < (n + 1) * item; ++i) {
                double d = p[static_cast<size_t>(i)] - g[static_cast<size_t>(i)];
                acc += d * d;
            }
            partials[static_cast<size_t>(n)] = acc;
        }
        std::sort(partials.begin(), partials.end());
        double acc = 0.0;
        for (double v : partials) acc += v;
        total += cfg.alpha_at(level) * acc / (static_cast<double>(s.n) * s.h * s.w);
    }
    return total;
}

/// Differentiable variant; ground truths enter as constants.
inline Value multiscale_loss(Tape& t, const std::map<int, Value>& preds,
                             const std::map<int, Tensor>& gts, const LossConfig& cfg) {
    Value total;
    for (int level : cfg.levels) {
        auto pit = preds.find(level);
        auto git = gts.find(level);
        if (pit == preds.end() || git == gts.end())
            throw std::invalid_argument("multiscale_loss: missing level " + std::to_string(level));
        Value pred = pit->second;
        if (!(pred.shape() == git->second.shape()))
            dim_error("multiscale_loss: level " + std::to_string(level) + " shape mismatch");
        Value d = sub(pred, t.constant(git->second));
        const Shape s = pred.shape();
        Value term = mul_scalar(sum(mul(d, d)),
                                cfg.alpha_at(level) / (static_cast<double>(s.n) * s.h * s.w));
        total = total ? add(total, term) : term;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    Tensor m;
    Tensor v;
    long long t = 0;
};

inline void adam_step(Tensor& param, const Tensor& grad, AdamState& st, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (!param.same_shape(grad)) dim_error("adam_step: param/grad shape mismatch");
    if (st.m.empty()) {
        st.m = Tensor::zeros(param.shape());
        st.v = Tensor::zeros(param.shape());
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (long long i = 0; i < param.size(); ++i) {
        size_t j = static_cast<size_t>(i);
        double g = grad[j];
        st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g;
        st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g * g;
        param[j] -= lr * (st.m[j] / bc1) / (std::sqrt(st.v[j] / bc2) + eps);
    }
}

class AdamOptimizer {
public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(NCUPModel& model, double lr) {
        auto& ps = model.params();
        if (states_.empty()) states_.resize(ps.size());
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps[i].trainable) adam_step(ps[i].value, ps[i].grad, states_[i], lr, beta1_, beta2_, eps_);
    }

private:
    std::vector<AdamState> states_;
    double beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// Synthetic data: piecewise-constant flow over random polygonal (Voronoi)
// regions with a pseudo-RGB region rendering as guidance.
// ---------------------------------------------------------------------------

struct SyntheticSample {
    FlowField flow_hr_gt;  // (1,2,H,W)
    Tensor guidance_hr;    // (1,3,H,W)
    FlowField flow_lr;     // (1,2,H/s,W/s), area average of the ground truth
    uint64_t seed = 0;
};

inline SyntheticSample gen_synthetic(uint64_t seed, int H, int W, int s, int min_regions = 2,
                                     int max_regions = 6) {
    if (H % s != 0 || W % s != 0)
        dim_error("gen_synthetic: H and W must be divisible by the scale");
    if (min_regions < 1 || max_regions < min_regions)
        dim_error("gen_synthetic: bad region-count range");
    Rng rng(seed);
    const int k = min_regions + rng.uniform_int(max_regions - min_regions + 1);

    std::vector<double> sx(static_cast<size_t>(k)), sy(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        sx[static_cast<size_t>(i)] = rng.uniform(0.0, static_cast<double>(W));
        sy[static_cast<size_t>(i)] = rng.uniform(0.0, static_cast<double>(H));
    }
    std::vector<double> fu(static_cast<size_t>(k)), fv(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        fu[static_cast<size_t>(i)] = rng.uniform(-8.0, 8.0);
        fv[static_cast<size_t>(i)] = rng.uniform(-8.0, 8.0);
    }
    std::vector<std::array<double, 3>> color(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
        for (int c = 0; c < 3; ++c) color[static_cast<size_t>(i)][static_cast<size_t>(c)] = rng.uniform();

    SyntheticSample sample;
    sample.seed = seed;
    sample.flow_hr_gt = FlowField(Tensor(Shape{1, 2, H, W}));
    sample.guidance_hr = Tensor(Shape{1, 3, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            double bestd = 1e300;
            for (int i = 0; i < k; ++i) {
                double dx = x + 0.5 - sx[static_cast<size_t>(i)];
                double dy = y + 0.5 - sy[static_cast<size_t>(i)];
                double d = dx * dx + dy * dy;
                if (d < bestd) {
                    bestd = d;
                    best = i;
                }
            }
            sample.flow_hr_gt.t.at(0, 0, y, x) = fu[static_cast<size_t>(best)];
            sample.flow_hr_gt.t.at(0, 1, y, x) = fv[static_cast<size_t>(best)];
            for (int c = 0; c < 3; ++c)
                sample.guidance_hr.at(0, c, y, x) = color[static_cast<size_t>(best)][static_cast<size_t>(c)];
        }
    // Additive sensor-style noise on the guidance only.
    for (long long i = 0; i < sample.guidance_hr.size(); ++i)
        sample.guidance_hr[static_cast<size_t>(i)] += 0.02 * rng.normal();

    sample.flow_lr = FlowField(downsample_area(sample.flow_hr_gt.t, s));
    return sample;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_epe_ncup = 0.0;
    double val_epe_bilinear = 0.0;
};

struct TrainConfig {
    int samples = 500;
    int height = 64;
    int width = 64;
    int scale = 4;
    int epochs = 20;
    int batch = 1;
    double lr = 1e-4;
    std::set<int> halve_at = {10, 15};
    uint64_t seed = 1;
    int val_count = 50;
    uint64_t val_seed_offset = 1000000;  // val seed j = seed + offset + j
    LossConfig loss;
    WeightsNetConfig wnet;
    InterpNetConfig interp;
    std::function<void(const EpochStats&)> on_epoch;  // optional progress hook
};

struct TrainResult {
    NCUPModel model;
    std::vector<EpochStats> log;
};

struct EvalResult {
    double epe_ncup = 0.0;
    double epe_bilinear = 0.0;
};

/// Mean held-out EPE of the model and of the bilinear baseline over
/// `count` synthetic seeds. Low-resolution flow is in high-resolution
/// pixel units here, so neither path rescales values.
inline EvalResult evaluate_synthetic(NCUPModel& model, uint64_t seed0, int count, int H, int W) {
    EvalResult r;
    const int s = model.scale();
    for (int j = 0; j < count; ++j) {
        SyntheticSample sample = gen_synthetic(seed0 + static_cast<uint64_t>(j), H, W, s);
        Tensor guid_lr = downsample_area(sample.guidance_hr, s);
        FlowField up = ncup_upsample(sample.flow_lr, guid_lr, model, /*rescale_values=*/false);
        FlowField bl = bilinear_baseline(sample.flow_lr, s, /*rescale_values=*/false);
        r.epe_ncup += epe(up, sample.flow_hr_gt);
        r.epe_bilinear += epe(bl, sample.flow_hr_gt);
    }
    r.epe_ncup /= std::max(1, count);
    r.epe_bilinear /= std::max(1, count);
    return r;
}

/// Joint training of the weights estimation network and the interpolation
/// kernels. Deterministic given the config: data, shuffling, and the
/// optimizer all derive from cfg.seed.
inline TrainResult train_loop(const TrainConfig& cfg) {
    NCUPModel model(cfg.wnet, cfg.interp, cfg.scale, cfg.seed);
    AdamOptimizer opt;
    std::vector<EpochStats> log;

    const int lh = cfg.height / cfg.scale;
    const int lw = cfg.width / cfg.scale;
    if (cfg.height % cfg.scale != 0 || cfg.width % cfg.scale != 0)
        dim_error("train_loop: sample size must be divisible by the scale");

    std::vector<int> order(static_cast<size_t>(cfg.samples));
    for (int i = 0; i < cfg.samples; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        for (int h : cfg.halve_at)
            if (epoch > h) lr *= 0.5;

        Rng shuffle_rng(cfg.seed * 6364136223846793005ULL + static_cast<uint64_t>(epoch));
        for (int i = cfg.samples - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);

        double loss_sum = 0.0;
        int step_count = 0;
        for (int start = 0; start < cfg.samples; start += cfg.batch) {
            const int b = std::min(cfg.batch, cfg.samples - start);
            Tensor flow_lr(Shape{b, 2, lh, lw});
            Tensor guid_lr(Shape{b, 3, lh, lw});
            Tensor gt(Shape{b, 2, cfg.height, cfg.width});
            std::vector<uint64_t> batch_seeds;
            for (int i = 0; i < b; ++i) {
                uint64_t sd = cfg.seed + static_cast<uint64_t>(order[static_cast<size_t>(start + i)]);
                batch_seeds.push_back(sd);
                SyntheticSample sample = gen_synthetic(sd, cfg.height, cfg.width, cfg.scale);
                Tensor g_lr = downsample_area(sample.guidance_hr, cfg.scale);
                const long long plane_l = static_cast<long long>(lh) * lw;
                const long long plane_h = static_cast<long long>(cfg.height) * cfg.width;
                std::memcpy(flow_lr.data() + flow_lr.index(i, 0, 0, 0), sample.flow_lr.t.data(),
                            sizeof(double) * static_cast<size_t>(2 * plane_l));
                std::memcpy(guid_lr.data() + guid_lr.index(i, 0, 0, 0), g_lr.data(),
                            sizeof(double) * static_cast<size_t>(3 * plane_l));
                std::memcpy(gt.data() + gt.index(i, 0, 0, 0), sample.flow_hr_gt.t.data(),
                            sizeof(double) * static_cast<size_t>(2 * plane_h));
            }

            Tape t;
            auto out = model.upsample(t, t.constant(flow_lr), t.constant(guid_lr), BnMode::train);
            Value loss = multiscale_loss(t, {{1, out.flow}}, {{1, gt}}, cfg.loss);
            double loss_v = loss.val()[0];
            if (!std::isfinite(loss_v)) {
                std::string seeds;
                for (uint64_t sd : batch_seeds) seeds += std::to_string(sd) + " ";
                throw std::runtime_error("train_loop: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch seeds: " + seeds);
            }
            model.zero_grad();
            t.backward_scalar(loss);
            model.accumulate_grads(t);
            opt.step(model, lr);
            loss_sum += loss_v;
            ++step_count;
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / std::max(1, step_count);
        EvalResult ev = evaluate_synthetic(model, cfg.seed + cfg.val_seed_offset, cfg.val_count,
                                           cfg.height, cfg.width);
        st.val_epe_ncup = ev.epe_ncup;
        st.val_epe_bilinear = ev.epe_bilinear;
        log.push_back(st);
        if (cfg.on_epoch) cfg.on_epoch(st);
    }
    return TrainResult{std::move(model), std::move(log)};
}

}  // namespace ncup
