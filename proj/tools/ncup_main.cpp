// Command-line front end for the normalized-convolution upsampler:
// upsampling, training, evaluation, comparison, and self-verification.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ncup/ncup.hpp"

namespace {

using namespace ncup;

std::string num6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void print_kv(const std::string& key, double v) {
    std::cout << key << "=" << num6(v) << "\n";
}

// ---------------------------------------------------------------------------
// upsample
// ---------------------------------------------------------------------------

struct UpsampleArgs {
    std::string flow_path, guidance_path, model_path, out_path;
    std::string color_path, weights_map_path;
    int scale = 0;  // 0: take the model's scale
    bool rescale = false;
};

int run_upsample(const UpsampleArgs& a) {
    NCUPModel model = NCUPModel::load(a.model_path);
    if (a.scale != 0 && a.scale != model.scale()) {
        std::cerr << "error: requested scale " << a.scale << " does not match model scale "
                  << model.scale() << "\n";
        return 2;
    }
    FlowField flow_lr = read_flo(a.flow_path);
    const Shape fs = flow_lr.shape();

    Tensor guidance;
    if (!a.guidance_path.empty()) {
        guidance = read_ppm(a.guidance_path);
    } else {
        std::cerr << "warning: no guidance image given; using zeros\n";
        guidance = Tensor(Shape{1, model.weights_config().guidance_channels, fs.h, fs.w});
    }

    NcupUpsampleResult r = ncup_upsample_full(flow_lr, guidance, model, a.rescale);
    if (r.degenerate)
        std::cerr << "warning: input confidence is all zero; output confidence is ~0\n";
    write_flo(a.out_path, r.flow);

    if (!a.color_path.empty()) write_ppm(a.color_path, flow_to_color(r.flow));
    if (!a.weights_map_path.empty())
        dump_weights_map(slice_channels(r.weights_lr, 0, 1), a.weights_map_path);

    print_kv("scale", model.scale());
    print_kv("conf_min", r.conf.min());
    print_kv("conf_max", r.conf.max());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string out_path, log_path;
    TrainConfig cfg;
    std::string final_act = "sigmoid";
    std::string pooling = "conf";
    bool no_batch_norm = false;
    double alpha1 = 0.02;
    bool quiet = false;
};

int run_train(TrainArgs& a) {
    a.cfg.wnet.final_activation = act_from_string(a.final_act);
    a.cfg.wnet.batch_norm = !a.no_batch_norm;
    a.cfg.interp.pooling = pooling_from_string(a.pooling);
    a.cfg.loss.alpha[1] = a.alpha1;

    std::ofstream log;
    if (!a.log_path.empty()) {
        log.open(a.log_path, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open log for write: " + a.log_path);
    }
    a.cfg.on_epoch = [&](const EpochStats& e) {
        if (log)
            log << e.epoch << "," << num6(e.train_loss) << "," << num6(e.val_epe_ncup) << ","
                << num6(e.val_epe_bilinear) << "\n";
        if (!a.quiet)
            std::cerr << "epoch " << e.epoch << " train_loss=" << num6(e.train_loss)
                      << " val_epe_ncup=" << num6(e.val_epe_ncup)
                      << " val_epe_bilinear=" << num6(e.val_epe_bilinear) << "\n";
    };

    TrainResult r = train_loop(a.cfg);
    r.model.save(a.out_path);
    if (!r.log.empty()) {
        print_kv("train_loss", r.log.back().train_loss);
        print_kv("val_epe_ncup", r.log.back().val_epe_ncup);
        print_kv("val_epe_bilinear", r.log.back().val_epe_bilinear);
        print_kv("ratio", r.log.back().val_epe_ncup / r.log.back().val_epe_bilinear);
    }
    print_kv("parameters", static_cast<double>(r.model.parameter_count()));
    std::cout << "checkpoint=" << a.out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval / compare
// ---------------------------------------------------------------------------

int run_eval(const std::string& pred_path, const std::string& gt_path) {
    FlowField pred = read_flo(pred_path);
    FlowField gt = read_flo(gt_path);
    print_kv("epe", epe(pred, gt));
    return 0;
}

struct CompareArgs {
    std::string model_path, gt_path, guidance_path;
    int seeds = 20;
    int size = 64;
    uint64_t seed = 1;
};

int run_compare(const CompareArgs& a) {
    NCUPModel model = NCUPModel::load(a.model_path);
    const int s = model.scale();
    double epe_n = 0.0, epe_b = 0.0;
    if (!a.gt_path.empty()) {
        FlowField gt = read_flo(a.gt_path);
        const Shape gs = gt.shape();
        if (gs.h % s != 0 || gs.w % s != 0)
            dim_error("compare: ground-truth dims must be divisible by the model scale " +
                      std::to_string(s));
        FlowField flow_lr(downsample_area(gt.t, s));
        Tensor guidance;
        if (!a.guidance_path.empty()) {
            guidance = read_ppm(a.guidance_path);
        } else {
            std::cerr << "warning: no guidance image given; using zeros\n";
            guidance = Tensor(Shape{1, model.weights_config().guidance_channels, gs.h / s, gs.w / s});
        }
        FlowField up = ncup_upsample(flow_lr, guidance, model, false);
        FlowField bl = bilinear_baseline(flow_lr, s, false);
        epe_n = epe(up, gt);
        epe_b = epe(bl, gt);
    } else {
        EvalResult r = evaluate_synthetic(model, a.seed + 1000000, a.seeds, a.size, a.size);
        epe_n = r.epe_ncup;
        epe_b = r.epe_bilinear;
    }
    print_kv("epe_ncup", epe_n);
    print_kv("epe_bilinear", epe_b);
    print_kv("ratio", epe_n / epe_b);
    return 0;
}

// ---------------------------------------------------------------------------
// selftest: gradient checks, normalized-convolution oracle equivalence,
// scatter round trips, and the parameter-count audit.
// ---------------------------------------------------------------------------

bool selftest_gradients() {
    for (uint64_t seed : {1u, 2u}) {
        Rng rng(seed);
        Tensor data = rng.uniform_tensor(Shape{1, 1, 5, 5}, -1, 1);
        Tensor conf = rng.uniform_tensor(Shape{1, 1, 5, 5}, 0.05, 1.0);
        Tensor raw = rng.uniform_tensor(Shape{1, 1, 3, 3}, -0.5, 1.5);
        auto eval = [&]() {
            Tape t;
            auto o = nconv_forward(t.constant(data), t.constant(conf), t.constant(raw), 1);
            return sum(add(o.data, o.conf)).val()[0];
        };
        Tape t;
        Value dv = t.leaf(data), cv = t.leaf(conf), kv = t.leaf(raw);
        auto o = nconv_forward(dv, cv, kv, 1);
        t.backward_scalar(sum(add(o.data, o.conf)));
        Tensor grads[3] = {t.grad(dv), t.grad(cv), t.grad(kv)};
        Tensor* inputs[3] = {&data, &conf, &raw};
        for (int which = 0; which < 3; ++which) {
            Tensor& x = *inputs[which];
            for (long long i = 0; i < x.size(); ++i) {
                const double h = 1e-5;
                double orig = x[static_cast<size_t>(i)];
                x[static_cast<size_t>(i)] = orig + h;
                double fp = eval();
                x[static_cast<size_t>(i)] = orig - h;
                double fm = eval();
                x[static_cast<size_t>(i)] = orig;
                double fd = (fp - fm) / (2 * h);
                double an = grads[which][static_cast<size_t>(i)];
                double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
                if (rel > 1e-5) return false;
            }
        }
    }
    return true;
}

bool selftest_nconv_oracle() {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        int h = 3 + rng.uniform_int(5), w = 3 + rng.uniform_int(5);
        Tensor data = rng.uniform_tensor(Shape{1, 1, h, w}, -2, 2);
        Tensor conf = rng.uniform_tensor(Shape{1, 1, h, w}, 0, 1);
        Tensor raw = rng.uniform_tensor(Shape{1, 1, 3, 3}, -0.5, 1.5);
        Tensor eff = softplus(raw);
        double kernel_sum = eff.sum();
        auto got = nconv_forward(data, conf, NConvKernel(raw), 1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double num = 0, den = 0;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        int iy = y - 1 + ky, ix = x - 1 + kx;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                        double a = eff.at(0, 0, ky, kx);
                        num += data.at(0, 0, iy, ix) * conf.at(0, 0, iy, ix) * a;
                        den += conf.at(0, 0, iy, ix) * a;
                    }
                if (std::abs(got.data.at(0, 0, y, x) - num / (den + kNConvEps)) > 1e-10) return false;
                if (std::abs(got.conf.at(0, 0, y, x) - den / kernel_sum) > 1e-10) return false;
            }
    }
    return true;
}

bool selftest_sparsify() {
    for (int s : {1, 2, 3, 4, 8}) {
        Rng rng(40 + static_cast<uint64_t>(s));
        Tensor low = rng.uniform_tensor(Shape{1, 2, 4, 5}, -10, 10);
        Tensor w = rng.uniform_tensor(Shape{1, 2, 4, 5}, 0, 1);
        SparseGrid g = forward_map(low, w, s);
        if (!bitwise_equal(read_back(g, s), low)) return false;
        if (g.data.sum() != low.sum() || g.conf.sum() != w.sum()) return false;
    }
    return true;
}

bool selftest_param_audit(const std::string& model_path, std::string& detail) {
    if (!model_path.empty()) {
        CheckpointAudit a = audit_checkpoint(model_path);
        if (!a.ok) detail = a.message;
        return a.ok;
    }
    NCUPModel m(WeightsNetConfig{}, InterpNetConfig{}, 4, 1);
    bool ok = m.weights_net_parameter_count() == WeightsNetConfig{}.parameter_count() &&
              m.interp_net_parameter_count() == InterpNetConfig{}.parameter_count() &&
              m.interp_net_parameter_count() == 159 &&
              NCUPModel(WeightsNetConfig{}, InterpNetConfig::preset224(), 4, 1)
                      .interp_net_parameter_count() == 225;
    if (!ok) detail = "parameter formulas disagree with instantiated models";
    return ok;
}

int run_selftest(const std::string& model_path) {
    bool all = true;
    struct SuiteResult {
        const char* name;
        bool ok;
        std::string detail;
    };
    std::vector<SuiteResult> results;
    results.push_back({"gradient_checks", selftest_gradients(), ""});
    results.push_back({"nconv_oracle", selftest_nconv_oracle(), ""});
    results.push_back({"sparsify_roundtrip", selftest_sparsify(), ""});
    std::string detail;
    results.push_back({"parameter_audit", selftest_param_audit(model_path, detail), detail});
    for (const auto& r : results) {
        std::cout << r.name << "=" << (r.ok ? "pass" : "fail") << "\n";
        if (!r.ok && !r.detail.empty()) std::cerr << r.name << ": " << r.detail << "\n";
        all = all && r.ok;
    }
    std::cout << "selftest=" << (all ? "pass" : "fail") << "\n";
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("NCUP_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) ncup::set_thread_cap(cap);
    }

    CLI::App app{"normalized-convolution joint upsampling for optical flow"};
    app.require_subcommand(1);

    UpsampleArgs ua;
    auto* up = app.add_subcommand("upsample", "upsample a .flo flow field with a trained model");
    up->add_option("--flow", ua.flow_path, "input low-resolution .flo")->required();
    up->add_option("--model", ua.model_path, "model checkpoint")->required();
    up->add_option("--out", ua.out_path, "output .flo path")->required();
    up->add_option("--guidance", ua.guidance_path, "low-resolution guidance PPM (P6)");
    up->add_option("--scale", ua.scale, "expected upsampling factor")
        ->check(CLI::IsMember({2, 4, 8}));
    up->add_option("--color", ua.color_path, "also write a color rendering PPM");
    up->add_option("--weights-map", ua.weights_map_path,
                   "also write the estimated weights (u channel) as a grayscale PPM");
    up->add_flag("--rescale", ua.rescale, "multiply displacement values by the scale");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train on synthetic piecewise-constant flow");
    tr->add_option("--out", ta.out_path, "checkpoint output path")->required();
    tr->add_option("--log", ta.log_path,
                   "CSV log path (epoch,train_loss,val_epe_ncup,val_epe_bilinear)");
    tr->add_option("--seed", ta.cfg.seed, "RNG seed");
    tr->add_option("--epochs", ta.cfg.epochs, "training epochs")->check(CLI::NonNegativeNumber);
    tr->add_option("--samples", ta.cfg.samples, "training samples")->check(CLI::PositiveNumber);
    tr->add_option("--size", ta.cfg.height, "square sample size")->check(CLI::PositiveNumber);
    tr->add_option("--scale", ta.cfg.scale, "upsampling factor")->check(CLI::PositiveNumber);
    tr->add_option("--batch", ta.cfg.batch, "batch size")->check(CLI::PositiveNumber);
    tr->add_option("--lr", ta.cfg.lr, "initial Adam learning rate");
    tr->add_option("--val-count", ta.cfg.val_count, "held-out validation seeds");
    tr->add_option("--alpha1", ta.alpha1, "full-resolution loss weight");
    tr->add_option("--final-act", ta.final_act, "weights head activation")
        ->check(CLI::IsMember({"sigmoid", "softplus"}));
    tr->add_option("--pooling", ta.pooling, "interpolation pooling")
        ->check(CLI::IsMember({"conf", "max"}));
    tr->add_option("--downsamplings", ta.cfg.interp.downsamplings, "interpolation downsamplings")
        ->check(CLI::IsMember({1, 2}));
    tr->add_flag("--no-batch-norm", ta.no_batch_norm, "disable batch normalization");
    tr->add_flag("--quiet", ta.quiet, "suppress per-epoch progress on stderr");

    std::string ev_pred, ev_gt;
    auto* ev = app.add_subcommand("eval", "end-point error between two .flo files");
    ev->add_option("--pred", ev_pred, "predicted .flo")->required();
    ev->add_option("--gt", ev_gt, "ground-truth .flo")->required();

    CompareArgs ca;
    auto* cmp = app.add_subcommand("compare", "model vs bilinear baseline");
    cmp->add_option("--model", ca.model_path, "model checkpoint")->required();
    cmp->add_option("--gt", ca.gt_path,
                    "high-resolution ground-truth .flo to downsample and restore");
    cmp->add_option("--guidance", ca.guidance_path, "low-resolution guidance PPM for --gt mode");
    cmp->add_option("--seeds", ca.seeds, "synthetic evaluation seeds")->check(CLI::PositiveNumber);
    cmp->add_option("--size", ca.size, "synthetic sample size")->check(CLI::PositiveNumber);
    cmp->add_option("--seed", ca.seed, "base RNG seed");

    std::string st_model;
    auto* st = app.add_subcommand("selftest", "run the built-in verification suites");
    st->add_option("--model", st_model, "checkpoint to audit instead of a fresh model");

    CLI11_PARSE(app, argc, argv);

    try {
        if (up->parsed()) return run_upsample(ua);
        if (tr->parsed()) {
            ta.cfg.width = ta.cfg.height;
            return run_train(ta);
        }
        if (ev->parsed()) return run_eval(ev_pred, ev_gt);
        if (cmp->parsed()) return run_compare(ca);
        if (st->parsed()) return run_selftest(st_model);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
