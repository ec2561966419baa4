#pragma once

#include <map>
#include <string>
#include <vector>

#include "ncup/flowio.hpp"
#include "ncup/nconv.hpp"
#include "ncup/sparsify.hpp"

namespace ncup {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Weights estimation network: two 3x3 convolutions (optionally batch
/// normalized) with ReLU, then a 1x1 convolution and a non-negative head
/// activation. Channel presets: (16,8) for image guidance, (64,32) for
/// feature guidance.
struct WeightsNetConfig {
    int ch1 = 16;
    int ch2 = 8;
    int guidance_channels = 3;
    int target_channels = 2;
    ActKind final_activation = ActKind::sigmoid;  // sigmoid or softplus
    bool batch_norm = true;

    static WeightsNetConfig feature_guidance(int guidance_ch) {
        WeightsNetConfig c;
        c.ch1 = 64;
        c.ch2 = 32;
        c.guidance_channels = guidance_ch;
        return c;
    }

    int input_channels() const { return target_channels + guidance_channels; }

    /// True for the two documented channel presets, (16,8) and (64,32);
    /// anything else is allowed but non-standard.
    bool standard_channels() const {
        return (ch1 == 16 && ch2 == 8) || (ch1 == 64 && ch2 == 32);
    }

    long long parameter_count() const {
        long long p = 0;
        p += static_cast<long long>(input_channels()) * ch1 * 9 + ch1;
        if (batch_norm) p += 2LL * ch1;
        p += static_cast<long long>(ch1) * ch2 * 9 + ch2;
        if (batch_norm) p += 2LL * ch2;
        p += static_cast<long long>(ch2) * target_channels + target_channels;
        return p;
    }
};

/// Interpolation network: an hourglass of single-channel normalized
/// convolutions. `encoder_layers` nconvs run at full resolution, then each
/// downsampling level pools by 2 and runs `stage_layers` nconvs; the
/// decoder unpools and fuses with the matching skip through a
/// two-channel nconv, and a final head nconv produces the output.
struct InterpNetConfig {
    int downsamplings = 1;
    int encoder_layers = 2;
    int stage_layers = 2;
    int stage_kernel = 5;
    int fuse_kernel = 5;
    int head_kernel = 3;
    PoolingMode pooling = PoolingMode::confidence;

    /// Deeper variant: one extra encoder and decoder-side 5x5 layer and a
    /// 5x5 head, totalling 225 parameters.
    static InterpNetConfig preset224() {
        InterpNetConfig c;
        c.encoder_layers = 3;
        c.stage_layers = 3;
        c.head_kernel = 5;
        return c;
    }

    long long parameter_count() const {
        long long k2 = static_cast<long long>(stage_kernel) * stage_kernel;
        long long p = static_cast<long long>(encoder_layers) * k2;
        p += static_cast<long long>(downsamplings) * stage_layers * k2;
        p += static_cast<long long>(downsamplings) * 2 * fuse_kernel * fuse_kernel;
        p += static_cast<long long>(head_kernel) * head_kernel;
        return p;
    }
};

inline const char* to_string(ActKind k) {
    switch (k) {
        case ActKind::relu: return "relu";
        case ActKind::sigmoid: return "sigmoid";
        default: return "softplus";
    }
}

inline ActKind act_from_string(const std::string& s) {
    if (s == "relu") return ActKind::relu;
    if (s == "sigmoid") return ActKind::sigmoid;
    if (s == "softplus") return ActKind::softplus;
    throw std::invalid_argument("unknown activation: " + s);
}

inline const char* to_string(PoolingMode m) {
    return m == PoolingMode::confidence ? "confidence" : "max";
}

inline PoolingMode pooling_from_string(const std::string& s) {
    if (s == "confidence" || s == "conf") return PoolingMode::confidence;
    if (s == "max") return PoolingMode::max;
    throw std::invalid_argument("unknown pooling mode: " + s);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

/// Full upsampler: weights estimation network plus the
/// normalized-convolution interpolation network, with a fixed integer
/// upsampling scale.
class NCUPModel {
public:
    NCUPModel(WeightsNetConfig wcfg, InterpNetConfig icfg, int scale, uint64_t seed)
        : wcfg_(wcfg), icfg_(icfg), scale_(scale) {
        if (scale_ < 1) dim_error("NCUPModel: scale must be a positive integer");
        if (wcfg_.final_activation == ActKind::relu)
            dim_error("NCUPModel: weights head must be sigmoid or softplus");
        init_params(seed);
    }

    int scale() const { return scale_; }
    const WeightsNetConfig& weights_config() const { return wcfg_; }
    const InterpNetConfig& interp_config() const { return icfg_; }

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    long long parameter_count() const {
        long long p = 0;
        for (const Param& pr : params_)
            if (pr.trainable) p += pr.value.size();
        return p;
    }
    long long weights_net_parameter_count() const {
        long long p = 0;
        for (const Param& pr : params_)
            if (pr.trainable && pr.name.rfind("wnet.", 0) == 0) p += pr.value.size();
        return p;
    }
    long long interp_net_parameter_count() const {
        long long p = 0;
        for (const Param& pr : params_)
            if (pr.trainable && pr.name.rfind("interp.", 0) == 0) p += pr.value.size();
        return p;
    }

    void zero_grad() {
        for (Param& p : params_) p.grad = Tensor::zeros(p.value.shape());
    }

    /// True once batch-norm running statistics exist (or BN is disabled).
    bool stats_ready() const {
        return !wcfg_.batch_norm || (bn1_state_.initialized && bn2_state_.initialized);
    }

    BatchNormState& bn1_state() { return bn1_state_; }
    BatchNormState& bn2_state() { return bn2_state_; }

    // --- forward pieces -----------------------------------------------------

    /// Initial pixel-wise weights from the channel concatenation of the
    /// low-resolution target and guidance.
    Value estimate_weights(Tape& t, Value target_lr, Value guidance_lr, BnMode mode,
                           bool update_running = true) {
        const Shape ts = target_lr.shape(), gs = guidance_lr.shape();
        if (ts.n != gs.n || ts.h != gs.h || ts.w != gs.w) {
            if (gs.h == ts.h * scale_ && gs.w == ts.w * scale_)
                dim_error(
                    "estimate_weights: guidance is at high resolution; weights are estimated on "
                    "low-resolution inputs - downsample the guidance to " +
                    std::to_string(ts.h) + "x" + std::to_string(ts.w) + " first");
            dim_error("estimate_weights: target " + to_string(ts) + " and guidance " + to_string(gs) +
                      " disagree on batch/spatial dims");
        }
        if (ts.c != wcfg_.target_channels || gs.c != wcfg_.guidance_channels)
            dim_error("estimate_weights: channel counts do not match the configuration");
        ensure_bound(t);
        Value x = concat_channels(target_lr, guidance_lr);
        x = conv2d(x, pv(t, p_conv1_w_), pv(t, p_conv1_b_), 1, 1);
        if (wcfg_.batch_norm)
            x = batch_norm(x, pv(t, p_bn1_g_), pv(t, p_bn1_b_), bn1_state_, mode, true, 0.1, 1e-5,
                           update_running);
        x = relu(x);
        x = conv2d(x, pv(t, p_conv2_w_), pv(t, p_conv2_b_), 1, 1);
        if (wcfg_.batch_norm)
            x = batch_norm(x, pv(t, p_bn2_g_), pv(t, p_bn2_b_), bn2_state_, mode, true, 0.1, 1e-5,
                           update_running);
        x = relu(x);
        x = conv2d(x, pv(t, p_conv3_w_), pv(t, p_conv3_b_), 1, 0);
        return activation(x, wcfg_.final_activation);
    }

    struct InterpOut {
        Value data;
        Value conf;
        bool degenerate = false;  // all-zero input confidence
    };

    /// Densifies a single-channel sparse grid; confidence propagates
    /// through every layer to the final dense output.
    InterpOut interpolate(Tape& t, Value grid_data, Value grid_conf) {
        if (grid_data.shape().c != 1)
            dim_error("interpolate: expected single-channel grid (flow channels go through separately)");
        const Shape gs = grid_data.shape();
        const int div = 1 << icfg_.downsamplings;
        if (gs.h % div != 0 || gs.w % div != 0)
            dim_error("interpolate: grid " + to_string(gs) + " not divisible by 2^downsamplings = " +
                      std::to_string(div));
        ensure_bound(t);
        InterpOut out;
        out.degenerate = grid_conf.val().max() <= 0.0;

        const int pad_s = (icfg_.stage_kernel - 1) / 2;
        Value d = grid_data, c = grid_conf;
        for (int i = 0; i < icfg_.encoder_layers; ++i) {
            auto r = nconv_forward(d, c, pv(t, p_enc_[static_cast<size_t>(i)]), pad_s);
            d = r.data;
            c = r.conf;
        }
        std::vector<std::pair<Value, Value>> skips{{d, c}};
        for (int dep = 0; dep < icfg_.downsamplings; ++dep) {
            auto p = conf_pool(d, c, 2, icfg_.pooling);
            d = p.data;
            c = p.conf;
            for (int i = 0; i < icfg_.stage_layers; ++i) {
                auto r = nconv_forward(
                    d, c, pv(t, p_stage_[static_cast<size_t>(dep)][static_cast<size_t>(i)]), pad_s);
                d = r.data;
                c = r.conf;
            }
            if (dep + 1 < icfg_.downsamplings) skips.emplace_back(d, c);
        }
        for (int dep = icfg_.downsamplings - 1; dep >= 0; --dep) {
            auto u = conf_unpool(d, c, 2);
            auto [sd, sc] = skips[static_cast<size_t>(dep)];
            auto f = nconv_fuse(u.data, u.conf, sd, sc, pv(t, p_fuse_[static_cast<size_t>(dep)]),
                                (icfg_.fuse_kernel - 1) / 2);
            d = f.data;
            c = f.conf;
        }
        auto h = nconv_forward(d, c, pv(t, p_head_), (icfg_.head_kernel - 1) / 2);
        out.data = h.data;
        out.conf = h.conf;
        return out;
    }

    struct UpsampleOut {
        Value flow;        // (N,2,s*H,s*W)
        Value conf;        // (N,2,s*H,s*W)
        Value weights_lr;  // (N,2,H,W)
        bool degenerate = false;
    };

    /// Full pipeline: estimate weights jointly over both flow channels,
    /// then scatter and densify each channel separately and concatenate.
    UpsampleOut upsample(Tape& t, Value flow_lr, Value guidance_lr, BnMode mode,
                         bool update_running = true) {
        if (flow_lr.shape().c != 2) dim_error("upsample: flow must have 2 channels");
        UpsampleOut out;
        out.weights_lr = estimate_weights(t, flow_lr, guidance_lr, mode, update_running);
        Value flow_ch[2], conf_ch[2];
        for (int ch = 0; ch < 2; ++ch) {
            Value d = slice_channels(flow_lr, ch, 1);
            Value w = slice_channels(out.weights_lr, ch, 1);
            SparseGridV grid = forward_map(d, w, scale_);
            InterpOut r = interpolate(t, grid.data, grid.conf);
            flow_ch[ch] = r.data;
            conf_ch[ch] = r.conf;
            out.degenerate = out.degenerate || r.degenerate;
        }
        out.flow = concat_channels(flow_ch[0], flow_ch[1]);
        out.conf = concat_channels(conf_ch[0], conf_ch[1]);
        return out;
    }

    /// Adds the adjoints of the last-bound parameter leaves into the
    /// parameter gradient buffers. Call after Tape::backward.
    void accumulate_grads(const Tape& t) {
        if (bound_uid_ != t.uid())
            throw std::logic_error("accumulate_grads: tape was never bound to this model");
        for (size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].trainable) continue;
            const Tensor& a = t.adjoint_of(bound_[i].id());
            if (a.empty()) continue;
            Tensor& g = params_[i].grad;
            for (long long j = 0; j < g.size(); ++j) g[static_cast<size_t>(j)] += a[static_cast<size_t>(j)];
        }
    }

    void save(const std::string& path) const;
    static NCUPModel load(const std::string& path);

private:
    Value pv(Tape& t, int pidx) {
        ensure_bound(t);
        return bound_[static_cast<size_t>(pidx)];
    }

    void ensure_bound(Tape& t) {
        if (bound_uid_ == t.uid()) return;
        bound_.clear();
        bound_.reserve(params_.size());
        for (Param& p : params_) bound_.push_back(t.leaf(p.value, p.trainable));
        bound_uid_ = t.uid();
    }

    int add_param(const std::string& name, Tensor v, bool trainable = true) {
        params_.push_back(Param{name, std::move(v), Tensor{}, trainable});
        params_.back().grad = Tensor::zeros(params_.back().value.shape());
        return static_cast<int>(params_.size()) - 1;
    }

    static Tensor conv_init(Rng& rng, int out_c, int in_c, int k) {
        double fan_in = static_cast<double>(in_c) * k * k;
        return rng.normal_tensor(Shape{out_c, in_c, k, k}, std::sqrt(2.0 / fan_in));
    }

    /// Raw kernel whose effective (softplus) kernel is a center-peaked
    /// Gaussian bump, one bump per input channel with its own mean level,
    /// plus a little jitter to break symmetry. The normalized-convolution
    /// output is invariant to the overall kernel scale; keeping entries
    /// O(1) keeps confidence responses far above the epsilon in the
    /// data-path denominator. A sharp bump makes the untrained network a
    /// short-range interpolator instead of a heavy blur.
    static Tensor nconv_kernel_init(Rng& rng, const std::vector<double>& channel_means, int k) {
        const int in_c = static_cast<int>(channel_means.size());
        Tensor raw(Shape{1, in_c, k, k});
        const double sigma = std::max(0.6, 0.15 * k);
        const double floor_frac = 0.125;  // pedestal keeps the weakest taps O(0.1)
        for (int c = 0; c < in_c; ++c) {
            double total = 0.0;
            std::vector<double> bump(static_cast<size_t>(k) * k);
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x) {
                    double dy = y - (k - 1) / 2.0, dx = x - (k - 1) / 2.0;
                    double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                    bump[static_cast<size_t>(y * k + x)] = v;
                    total += v;
                }
            const double mean = channel_means[static_cast<size_t>(c)];
            const double pedestal = floor_frac * mean;
            const double scale = (1.0 - floor_frac) * mean * k * k / total;
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x)
                    raw.at(0, c, y, x) =
                        inverse_softplus(pedestal + bump[static_cast<size_t>(y * k + x)] * scale) +
                        0.01 * rng.normal();
        }
        return raw;
    }

    void init_params(uint64_t seed) {
        Rng rng(seed);
        const int in_c = wcfg_.input_channels();
        p_conv1_w_ = add_param("wnet.conv1.weight", conv_init(rng, wcfg_.ch1, in_c, 3));
        p_conv1_b_ = add_param("wnet.conv1.bias", Tensor(Shape{1, wcfg_.ch1, 1, 1}));
        if (wcfg_.batch_norm) {
            p_bn1_g_ = add_param("wnet.bn1.gamma", Tensor::full(Shape{1, wcfg_.ch1, 1, 1}, 1.0));
            p_bn1_b_ = add_param("wnet.bn1.beta", Tensor(Shape{1, wcfg_.ch1, 1, 1}));
        }
        p_conv2_w_ = add_param("wnet.conv2.weight", conv_init(rng, wcfg_.ch2, wcfg_.ch1, 3));
        p_conv2_b_ = add_param("wnet.conv2.bias", Tensor(Shape{1, wcfg_.ch2, 1, 1}));
        if (wcfg_.batch_norm) {
            p_bn2_g_ = add_param("wnet.bn2.gamma", Tensor::full(Shape{1, wcfg_.ch2, 1, 1}, 1.0));
            p_bn2_b_ = add_param("wnet.bn2.beta", Tensor(Shape{1, wcfg_.ch2, 1, 1}));
        }
        // Small head init: the initial weight map starts in a narrow band
        // around the activation midpoint instead of saturating, so an
        // untrained upsampler behaves like a smooth interpolator.
        p_conv3_w_ = add_param(
            "wnet.conv3.weight",
            rng.normal_tensor(Shape{wcfg_.target_channels, wcfg_.ch2, 1, 1}, 0.05));
        p_conv3_b_ = add_param("wnet.conv3.bias",
                               Tensor::full(Shape{1, wcfg_.target_channels, 1, 1}, 0.2));

        for (int i = 0; i < icfg_.encoder_layers; ++i)
            p_enc_.push_back(add_param("interp.enc" + std::to_string(i) + ".raw",
                                       nconv_kernel_init(rng, {6.0}, icfg_.stage_kernel)));
        p_stage_.resize(static_cast<size_t>(icfg_.downsamplings));
        for (int dep = 0; dep < icfg_.downsamplings; ++dep)
            for (int i = 0; i < icfg_.stage_layers; ++i)
                p_stage_[static_cast<size_t>(dep)].push_back(
                    add_param("interp.down" + std::to_string(dep) + ".layer" + std::to_string(i) +
                                  ".raw",
                              nconv_kernel_init(rng, {6.0}, icfg_.stage_kernel)));
        // Fusion starts dominated by the full-resolution skip stream
        // (channel 1); the coarse decoder stream fades in through training.
        for (int dep = 0; dep < icfg_.downsamplings; ++dep)
            p_fuse_.push_back(add_param("interp.up" + std::to_string(dep) + ".fuse.raw",
                                        nconv_kernel_init(rng, {0.3, 6.0}, icfg_.fuse_kernel)));
        p_head_ = add_param("interp.head.raw", nconv_kernel_init(rng, {6.0}, icfg_.head_kernel));
    }

    WeightsNetConfig wcfg_;
    InterpNetConfig icfg_;
    int scale_;
    std::vector<Param> params_;
    BatchNormState bn1_state_, bn2_state_;

    int p_conv1_w_ = -1, p_conv1_b_ = -1, p_bn1_g_ = -1, p_bn1_b_ = -1;
    int p_conv2_w_ = -1, p_conv2_b_ = -1, p_bn2_g_ = -1, p_bn2_b_ = -1;
    int p_conv3_w_ = -1, p_conv3_b_ = -1;
    std::vector<int> p_enc_;
    std::vector<std::vector<int>> p_stage_;
    std::vector<int> p_fuse_;
    int p_head_ = -1;

    uint64_t bound_uid_ = 0;
    std::vector<Value> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a text key=value manifest followed by named tensor records
// (u32 name length, name bytes, then the tensor in the standard format).
// Field order is fixed so identical models serialize byte-identically.
// ---------------------------------------------------------------------------

inline void NCUPModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint save: cannot open " + path);

    std::vector<std::pair<std::string, const Tensor*>> records;
    for (const Param& p : params_) records.emplace_back(p.name, &p.value);
    if (wcfg_.batch_norm && bn1_state_.initialized) {
        records.emplace_back("wnet.bn1.running_mean", &bn1_state_.running_mean);
        records.emplace_back("wnet.bn1.running_var", &bn1_state_.running_var);
    }
    if (wcfg_.batch_norm && bn2_state_.initialized) {
        records.emplace_back("wnet.bn2.running_mean", &bn2_state_.running_mean);
        records.emplace_back("wnet.bn2.running_var", &bn2_state_.running_var);
    }

    os << "NCUPCKPT v1\n";
    os << "scale=" << scale_ << "\n";
    os << "wnet.ch1=" << wcfg_.ch1 << "\n";
    os << "wnet.ch2=" << wcfg_.ch2 << "\n";
    os << "wnet.guidance_channels=" << wcfg_.guidance_channels << "\n";
    os << "wnet.target_channels=" << wcfg_.target_channels << "\n";
    os << "wnet.final_activation=" << to_string(wcfg_.final_activation) << "\n";
    os << "wnet.batch_norm=" << (wcfg_.batch_norm ? 1 : 0) << "\n";
    os << "interp.downsamplings=" << icfg_.downsamplings << "\n";
    os << "interp.encoder_layers=" << icfg_.encoder_layers << "\n";
    os << "interp.stage_layers=" << icfg_.stage_layers << "\n";
    os << "interp.stage_kernel=" << icfg_.stage_kernel << "\n";
    os << "interp.fuse_kernel=" << icfg_.fuse_kernel << "\n";
    os << "interp.head_kernel=" << icfg_.head_kernel << "\n";
    os << "interp.pooling=" << to_string(icfg_.pooling) << "\n";
    os << "bn1.initialized=" << (bn1_state_.initialized ? 1 : 0) << "\n";
    os << "bn2.initialized=" << (bn2_state_.initialized ? 1 : 0) << "\n";
    os << "tensors=" << records.size() << "\n";
    os << "\n";

    for (const auto& [name, tensor] : records) {
        uint32_t len = static_cast<uint32_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), sizeof(len));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        save_tensor(os, *tensor);
    }
    if (!os) throw std::runtime_error("checkpoint save: write failed for " + path);
}

inline NCUPModel NCUPModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint load: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "NCUPCKPT v1")
        throw std::runtime_error("checkpoint load: bad header in " + path);

    std::map<std::string, std::string> kv;
    while (std::getline(is, line) && !line.empty()) {
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("checkpoint load: malformed manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&kv, &path](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end())
            throw std::runtime_error("checkpoint load: missing manifest key '" + key + "' in " + path);
        return it->second;
    };

    WeightsNetConfig wcfg;
    wcfg.ch1 = std::stoi(get("wnet.ch1"));
    wcfg.ch2 = std::stoi(get("wnet.ch2"));
    wcfg.guidance_channels = std::stoi(get("wnet.guidance_channels"));
    wcfg.target_channels = std::stoi(get("wnet.target_channels"));
    wcfg.final_activation = act_from_string(get("wnet.final_activation"));
    wcfg.batch_norm = get("wnet.batch_norm") == "1";
    InterpNetConfig icfg;
    icfg.downsamplings = std::stoi(get("interp.downsamplings"));
    icfg.encoder_layers = std::stoi(get("interp.encoder_layers"));
    icfg.stage_layers = std::stoi(get("interp.stage_layers"));
    icfg.stage_kernel = std::stoi(get("interp.stage_kernel"));
    icfg.fuse_kernel = std::stoi(get("interp.fuse_kernel"));
    icfg.head_kernel = std::stoi(get("interp.head_kernel"));
    icfg.pooling = pooling_from_string(get("interp.pooling"));
    int scale = std::stoi(get("scale"));
    size_t n_records = static_cast<size_t>(std::stoll(get("tensors")));

    NCUPModel model(wcfg, icfg, scale, /*seed=*/0);

    std::map<std::string, Tensor> loaded;
    for (size_t r = 0; r < n_records; ++r) {
        uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!is || len == 0 || len > 4096)
            throw std::runtime_error("checkpoint load: corrupt record header in " + path);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw std::runtime_error("checkpoint load: truncated record name in " + path);
        loaded.emplace(std::move(name), load_tensor(is));
    }

    for (Param& p : model.params_) {
        auto it = loaded.find(p.name);
        if (it == loaded.end())
            throw std::runtime_error("checkpoint load: parameter '" + p.name + "' missing from " + path);
        if (!(it->second.shape() == p.value.shape()))
            throw std::runtime_error("checkpoint load: parameter '" + p.name + "' has shape " +
                                     to_string(it->second.shape()) + ", expected " +
                                     to_string(p.value.shape()));
        p.value = std::move(it->second);
        loaded.erase(it);
    }
    if (get("bn1.initialized") == "1") {
        model.bn1_state_.running_mean = loaded.at("wnet.bn1.running_mean");
        model.bn1_state_.running_var = loaded.at("wnet.bn1.running_var");
        model.bn1_state_.initialized = true;
        loaded.erase("wnet.bn1.running_mean");
        loaded.erase("wnet.bn1.running_var");
    }
    if (get("bn2.initialized") == "1") {
        model.bn2_state_.running_mean = loaded.at("wnet.bn2.running_mean");
        model.bn2_state_.running_var = loaded.at("wnet.bn2.running_var");
        model.bn2_state_.initialized = true;
        loaded.erase("wnet.bn2.running_mean");
        loaded.erase("wnet.bn2.running_var");
    }
    if (!loaded.empty())
        throw std::runtime_error("checkpoint load: unexpected tensor '" + loaded.begin()->first +
                                 "' in " + path);
    return model;
}

/// Parameter-count audit of a checkpoint against its own manifest configs.
struct CheckpointAudit {
    bool ok = false;
    long long stored = 0;    // trainable scalars found in the file
    long long expected = 0;  // from the manifest configuration
    std::string message;
};

inline CheckpointAudit audit_checkpoint(const std::string& path) {
    CheckpointAudit a;
    try {
        NCUPModel m = NCUPModel::load(path);
        a.stored = m.parameter_count();
        a.expected = m.weights_config().parameter_count() + m.interp_config().parameter_count();
        a.ok = (a.stored == a.expected);
        if (!a.ok) a.message = "parameter count mismatch";
    } catch (const std::exception& e) {
        a.ok = false;
        a.message = e.what();
    }
    return a;
}

// ---------------------------------------------------------------------------
// Tensor-level pipeline entry points
// ---------------------------------------------------------------------------

/// Bilinear upsampling baseline. When rescale_values is set (the default),
/// displacement values are multiplied by s to account for the finer pixel
/// grid; callers whose low-resolution flow is already expressed in
/// high-resolution pixel units should pass false.
inline FlowField bilinear_baseline(const FlowField& flow_lr, int s, bool rescale_values = true) {
    Tensor up = resize_bilinear(flow_lr.t, s);
    if (rescale_values && s != 1) up = mul_scalar(up, static_cast<double>(s));
    return FlowField(std::move(up));
}

struct NcupUpsampleResult {
    FlowField flow;
    Tensor conf;        // (N,2,sH,sW)
    Tensor weights_lr;  // (N,2,H,W)
    bool degenerate = false;
};

/// Inference-mode upsampling. Uses eval-mode batch statistics when they
/// exist; an untrained model falls back to batch statistics without
/// touching the running buffers.
inline NcupUpsampleResult ncup_upsample_full(const FlowField& flow_lr, const Tensor& guidance_lr,
                                             NCUPModel& model, bool rescale_values = false) {
    Tape t;
    BnMode mode = model.stats_ready() ? BnMode::eval : BnMode::train;
    auto out = model.upsample(t, t.constant(flow_lr.t), t.constant(guidance_lr), mode,
                              /*update_running=*/false);
    Tensor f = out.flow.val();
    if (rescale_values && model.scale() != 1) f = mul_scalar(f, static_cast<double>(model.scale()));
    return {FlowField(std::move(f)), out.conf.val(), out.weights_lr.val(), out.degenerate};
}

inline FlowField ncup_upsample(const FlowField& flow_lr, const Tensor& guidance_lr,
                               NCUPModel& model, bool rescale_values = false) {
    return ncup_upsample_full(flow_lr, guidance_lr, model, rescale_values).flow;
}

}  // namespace ncup
