// Release gate. Each numbered criterion prints exactly one [PASS]/[FAIL]
// line with its key figures and wall time, and the process exits nonzero when
// any selected criterion fails. Run with no arguments for the full gate or
// with criterion numbers, e.g. `voxdiff_acceptance 3 7`.

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "voxdiff/camera.hpp"
#include "voxdiff/diffusion/model.hpp"
#include "voxdiff/diffusion/process.hpp"
#include "voxdiff/diffusion/schedule.hpp"
#include "voxdiff/diffusion/train.hpp"
#include "voxdiff/fit.hpp"
#include "voxdiff/image.hpp"
#include "voxdiff/nn/checkpoint.hpp"
#include "voxdiff/nn/tensor.hpp"
#include "voxdiff/nn/unet.hpp"
#include "voxdiff/render.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/scenegen.hpp"
#include "voxdiff/voxgrid.hpp"

namespace fs = std::filesystem;
using namespace voxdiff;
using namespace voxdiff::diffusion;

namespace {

struct Checker {
    bool ok = true;
    std::ostringstream note;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            note << " FAILED[" << what << "]";
        }
    }
    template <typename T>
    Checker& operator<<(const T& v) {
        note << v;
        return *this;
    }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double l2(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// --- 1: analytic photometric gradient vs finite differences ----------------

Checker renderer_gradient_check() {
    Checker c;
    const int r = 4;
    ActivationParams act;
    QuadratureConfig quad = default_quadrature(r);
    Intrinsics intr = Intrinsics::square(8);

    Rng rng(derive_seed(11, 0));
    VoxelGrid ref(r);
    for (double& v : ref.data) v = rng.uniform(-3.0, 1.0);
    VoxelGrid grid(r);
    for (double& v : grid.data) v = rng.uniform(-3.0, 1.0);

    std::vector<View> views;
    for (const Vec3& pos : {Vec3{2.6, 1.1, 0.7}, Vec3{-1.9, 2.2, -1.0}}) {
        CameraPose pose = look_at(pos, {0, 0, 0});
        views.push_back({pose, render_image(ref, pose, intr, quad, act)});
    }

    std::vector<double> analytic = photometric_grad(grid, views, intr, quad, act);
    auto loss = [&] { return photometric_loss(grid, views, intr, quad, act); };

    double max_rel = 0.0;
    int checked = 0;
    for (std::size_t i = 0; i < grid.data.size(); ++i) {
        if (std::abs(analytic[i]) <= 1e-8) continue;
        // Fourth-order central stencil: small enough truncation to resolve
        // gradients near the 1e-8 cutoff without drowning in roundoff.
        const double saved = grid.data[i];
        const double h = 5e-3 * (1.0 + std::abs(saved));
        std::array<double, 4> f{};
        const std::array<double, 4> offs{2.0 * h, h, -h, -2.0 * h};
        for (int k = 0; k < 4; ++k) {
            grid.data[i] = saved + offs[k];
            f[k] = loss();
        }
        grid.data[i] = saved;
        double fd = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
        max_rel = std::max(max_rel,
                           std::abs(fd - analytic[i]) / std::max(std::abs(fd), std::abs(analytic[i])));
        ++checked;
    }
    c.expect(checked > 200, "too few active coordinates: " + std::to_string(checked));
    c.expect(max_rel <= 1e-5, "max rel err " + fmt(max_rel));
    c << "max rel " << fmt(max_rel) << " over " << checked << "/256 coords";
    return c;
}

// --- 2: closed-form rendering and weight conservation ----------------------

Checker rendering_oracles() {
    Checker c;
    ActivationParams act;
    const int r = 8;

    QuadratureConfig dense = default_quadrature(r);
    dense.n_samples = 1024;
    Intrinsics intr = Intrinsics::square(9);
    double max_cf = 0.0;
    for (double sigma : {0.5, 2.0, 8.0}) {
        VoxelGrid grid = VoxelGrid::filled(r, std::log(sigma), {0.7, -0.4, 1.3});
        std::array<double, 3> color{};
        for (int ch = 0; ch < 3; ++ch) color[ch] = 1.0 / (1.0 + std::exp(-grid.data[1 + ch]));
        CameraPose pose = look_at({-3.0, 0.2, 0.1}, {0, 0, 0});
        for (int px = 2; px < 7; px += 2) {
            Ray ray = generate_ray(pose, intr, px, 4);
            RaySample s = render_ray(grid, ray, dense, act);
            double trans = std::exp(-sigma * (ray.t_far - ray.t_near));
            for (int ch = 0; ch < 3; ++ch) {
                double expected = (1.0 - trans) * color[ch] + trans * dense.background[ch];
                max_cf = std::max(max_cf, std::abs(s.rgb[ch] - expected));
            }
        }
    }
    c.expect(max_cf <= 1e-3, "closed-form err " + fmt(max_cf));

    VoxelGrid grid(r);
    Rng rng(derive_seed(21, 0));
    for (double& v : grid.data) v = rng.uniform(-6.0, 3.0);
    QuadratureConfig quad = default_quadrature(r);
    Intrinsics wide = Intrinsics::square(32);
    int n_rays = 0;
    double max_dev = 0.0;
    for (int p = 0; p < 10; ++p) {
        CameraPose pose = sample_spherical_poses(1, 3.2, derive_seed(22, p))[0];
        for (int py = 0; py < wide.height; ++py)
            for (int px = 0; px < wide.width; ++px) {
                Ray ray = generate_ray(pose, wide, px, py);
                RaySample s = render_ray(grid, ray, quad, act);
                double total = s.end_transmittance;
                for (double w : s.weights) total += w;
                max_dev = std::max(max_dev, std::abs(total - 1.0));
                ++n_rays;
            }
    }
    c.expect(n_rays >= 10000, "only " + std::to_string(n_rays) + " rays");
    c.expect(max_dev <= 1e-6, "weight conservation err " + fmt(max_dev));
    c << "closed-form " << fmt(max_cf) << ", sum(w)+T off by " << fmt(max_dev) << " on "
      << n_rays << " rays";
    return c;
}

// --- 3: regularized fits keep unseen voxels at the empty-space codes -------

Checker fit_regularization() {
    Checker c;
    ActivationParams act;
    const int r = 16;
    const double lambda = 1e-7;
    Intrinsics intr = Intrinsics::square(24);
    QuadratureConfig quad = default_quadrature(r);
    const double c_raw = FitConfig{}.color_target;

    double worst_drop = -1e9, worst_ratio_d = 0.0, worst_ratio_c = 0.0;
    for (int s = 0; s < 8; ++s) {
        VoxelGrid truth = voxelize_scene(random_scene(derive_seed(31, s)), r, act);
        auto poses = sample_spherical_poses(24, 4.0, derive_seed(32, s));
        std::vector<View> train, held;
        for (std::size_t i = 0; i < poses.size(); ++i) {
            View v{poses[i], render_image(truth, poses[i], intr, quad, act)};
            (i < 20 ? train : held).push_back(std::move(v));
        }

        FitConfig reg;
        reg.iterations = 500;
        reg.rays_per_step = 2048;
        reg.lambda_density = lambda;
        reg.lambda_color = lambda;
        reg.seed = derive_seed(33, s);
        FitConfig plain = reg;
        plain.lambda_density = 0.0;
        plain.lambda_color = 0.0;

        FitResult fr = fit_relufield(train, held, intr, r, act, reg);
        FitResult fp = fit_relufield(train, held, intr, r, act, plain);

        std::vector<CameraPose> train_poses;
        for (const View& v : train) train_poses.push_back(v.pose);
        std::vector<double> vis = visibility_weights(truth, train_poses, intr, quad, act);

        double dd_r = 0.0, dd_p = 0.0, dc_r = 0.0, dc_p = 0.0;
        int invisible = 0;
        for (std::size_t v = 0; v < vis.size(); ++v) {
            if (vis[v] >= 1e-3) continue;
            ++invisible;
            dd_r += std::abs(fr.grid.data[v * 4] - act.d_min);
            dd_p += std::abs(fp.grid.data[v * 4] - act.d_min);
            for (int ch = 1; ch < 4; ++ch) {
                dc_r += std::abs(fr.grid.data[v * 4 + ch] - c_raw);
                dc_p += std::abs(fp.grid.data[v * 4 + ch] - c_raw);
            }
        }
        c.expect(invisible > 0, "scene " + std::to_string(s) + " has no invisible voxels");
        c.expect(dd_r <= dd_p, "scene " + std::to_string(s) + " density deviation " + fmt(dd_r) +
                                   " > " + fmt(dd_p));
        c.expect(dc_r <= dc_p, "scene " + std::to_string(s) + " color deviation " + fmt(dc_r) +
                                   " > " + fmt(dc_p));
        double drop = fp.heldout_psnr - fr.heldout_psnr;
        c.expect(drop <= 1.0, "scene " + std::to_string(s) + " held-out psnr drop " + fmt(drop));
        worst_drop = std::max(worst_drop, drop);
        if (dd_p > 0.0) worst_ratio_d = std::max(worst_ratio_d, dd_r / dd_p);
        if (dc_p > 0.0) worst_ratio_c = std::max(worst_ratio_c, dc_r / dc_p);
    }
    c << "worst psnr drop " << fmt(worst_drop) << " dB, deviation ratios reg/plain <= "
      << fmt(worst_ratio_d) << " (density) " << fmt(worst_ratio_c) << " (color)";
    return c;
}

// --- 4: autodiff vs finite differences -------------------------------------

using GraphBuilder = std::function<nn::Node*(nn::Tape&, const std::vector<nn::Node*>&)>;

nn::Node* weighted_sum(nn::Tape& t, nn::Node* x, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(x->value.size());
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    return nn::sum_all(t, nn::mul(t, x, t.leaf(x->shape, w)));
}

// Returns {max rel err over |grad|>1e-4, max abs err elsewhere}.
std::array<double, 2> input_grad_errors(const GraphBuilder& build,
                                        const std::vector<nn::Shape>& shapes, std::uint64_t seed,
                                        double lo = -1.0, double hi = 1.0) {
    std::vector<std::vector<double>> data;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        Rng rng(derive_seed(seed, i));
        std::vector<double> d(shapes[i].numel());
        for (double& v : d) v = rng.uniform(lo, hi);
        data.push_back(std::move(d));
    }
    auto eval = [&](std::vector<std::vector<double>>* grads) {
        nn::Tape tape;
        std::vector<nn::Node*> inputs;
        for (std::size_t i = 0; i < shapes.size(); ++i)
            inputs.push_back(tape.leaf(shapes[i], data[i], true));
        nn::Node* loss = build(tape, inputs);
        if (grads != nullptr) {
            tape.backward(loss);
            for (nn::Node* in : inputs) grads->push_back(in->grad);
        }
        return loss->value[0];
    };
    std::vector<std::vector<double>> analytic;
    eval(&analytic);

    const double h = 1e-5;
    std::array<double, 2> errs{0.0, 0.0};
    for (std::size_t ti = 0; ti < data.size(); ++ti)
        for (std::size_t ei = 0; ei < data[ti].size(); ++ei) {
            double saved = data[ti][ei];
            data[ti][ei] = saved + h;
            double fp = eval(nullptr);
            data[ti][ei] = saved - h;
            double fm = eval(nullptr);
            data[ti][ei] = saved;
            double fd = (fp - fm) / (2.0 * h);
            double an = analytic[ti][ei];
            if (std::abs(an) > 1e-4)
                errs[0] = std::max(errs[0], std::abs(fd - an) / std::abs(an));
            else
                errs[1] = std::max(errs[1], std::abs(fd - an));
        }
    return errs;
}

Checker autodiff_suite() {
    Checker c;
    struct OpCase {
        const char* name;
        GraphBuilder build;
        std::vector<nn::Shape> shapes;
        double lo = -1.0, hi = 1.0;
    };
    std::vector<OpCase> cases;
    cases.push_back({"add",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::add(t, in[0], in[1]), 101);
                     },
                     {nn::Shape{2, 3, 4}, nn::Shape{2, 3, 4}}});
    cases.push_back({"sub",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::sub(t, in[0], in[1]), 102);
                     },
                     {nn::Shape{2, 3, 4}, nn::Shape{2, 3, 4}}});
    cases.push_back({"mul",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::mul(t, in[0], in[1]), 103);
                     },
                     {nn::Shape{3, 4}, nn::Shape{3, 4}}});
    cases.push_back({"scale",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::scale(t, in[0], -1.7), 104);
                     },
                     {nn::Shape{4, 4, 4}}});
    cases.push_back({"silu",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::silu(t, in[0]), 105);
                     },
                     {nn::Shape{4, 4, 4}},
                     -3.0,
                     3.0});
    cases.push_back({"sum_all",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return nn::sum_all(t, nn::mul(t, in[0], in[0]));
                     },
                     {nn::Shape{5, 3}}});
    cases.push_back({"mean_all",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return nn::mean_all(t, nn::mul(t, in[0], in[0]));
                     },
                     {nn::Shape{4, 4, 4}}});
    cases.push_back({"matmul",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::matmul(t, in[0], in[1]), 107);
                     },
                     {nn::Shape{3, 4}, nn::Shape{4, 2}}});
    cases.push_back({"add_row",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::add_row(t, in[0], in[1]), 108);
                     },
                     {nn::Shape{3, 4}, nn::Shape{4}}});
    cases.push_back({"conv3d",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::conv3d(t, in[0], in[1], in[2]), 109);
                     },
                     {nn::Shape{1, 2, 4, 4, 4}, nn::Shape{2, 2, 3, 3, 3}, nn::Shape{2}}});
    cases.push_back({"conv1x1",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::conv1x1(t, in[0], in[1], in[2]), 110);
                     },
                     {nn::Shape{2, 3, 2, 2, 2}, nn::Shape{2, 3}, nn::Shape{2}}});
    cases.push_back({"groupnorm",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::groupnorm(t, in[0], in[1], in[2], 2), 111);
                     },
                     {nn::Shape{2, 4, 2, 2, 2}, nn::Shape{4}, nn::Shape{4}},
                     -2.0,
                     2.0});
    cases.push_back({"avgpool2",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::avgpool2(t, in[0]), 112);
                     },
                     {nn::Shape{1, 2, 4, 4, 4}}});
    cases.push_back({"upsample_nearest2",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::upsample_nearest2(t, in[0]), 113);
                     },
                     {nn::Shape{1, 2, 2, 2, 2}}});
    cases.push_back({"concat_channels",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::concat_channels(t, in[0], in[1]), 114);
                     },
                     {nn::Shape{1, 2, 2, 2, 2}, nn::Shape{1, 3, 2, 2, 2}}});
    cases.push_back({"slice_channels",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::slice_channels(t, in[0], 1, 2), 118);
                     },
                     {nn::Shape{2, 4, 2, 2, 2}}});
    cases.push_back({"add_channel_vec",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::add_channel_vec(t, in[0], in[1]), 115);
                     },
                     {nn::Shape{2, 3, 2, 2, 2}, nn::Shape{2, 3}}});
    cases.push_back({"reshape",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::reshape(t, in[0], nn::Shape{4, 2}), 116);
                     },
                     {nn::Shape{2, 2, 2}}});
    cases.push_back({"attention",
                     [](nn::Tape& t, const std::vector<nn::Node*>& in) {
                         return weighted_sum(t, nn::attention(t, in[0], in[1], in[2]), 117);
                     },
                     {nn::Shape{2, 3, 4}, nn::Shape{2, 3, 4}, nn::Shape{2, 3, 4}}});

    double worst_rel = 0.0, worst_abs = 0.0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        auto [rel, abs_err] =
            input_grad_errors(cases[i].build, cases[i].shapes, 400 + i, cases[i].lo, cases[i].hi);
        c.expect(rel <= 1e-5, std::string(cases[i].name) + " rel err " + fmt(rel));
        c.expect(abs_err <= 1e-9, std::string(cases[i].name) + " abs err " + fmt(abs_err));
        worst_rel = std::max(worst_rel, rel);
        worst_abs = std::max(worst_abs, abs_err);
    }

    // End to end through the denoiser network on 20 parameters.
    nn::UNetConfig mc;
    mc.width = 8;
    mc.levels = 2;
    mc.res_blocks = 2;
    nn::UNet net(mc);
    net.init_params(47);
    {
        Rng rng(48);
        for (double& v : net.params().at("head.conv.w").value) v = rng.uniform(-0.2, 0.2);
        for (double& v : net.params().at("head.conv.b").value) v = rng.uniform(-0.05, 0.05);
    }
    Rng rng(49);
    std::vector<double> xv(4 * 512), target(4 * 512);
    for (double& v : xv) v = rng.uniform(-1.0, 1.0);
    for (double& v : target) v = rng.uniform(-1.0, 1.0);
    std::vector<int> steps{21};
    auto loss_value = [&] {
        nn::Tape t;
        nn::Node* out = net.forward(t, t.leaf(nn::Shape{1, 4, 8, 8, 8}, xv), steps);
        nn::Node* diff = nn::sub(t, out, t.leaf(out->shape, target));
        return nn::mean_all(t, nn::mul(t, diff, diff))->value[0];
    };
    std::vector<double> analytic;
    {
        nn::Tape t;
        nn::Node* out = net.forward(t, t.leaf(nn::Shape{1, 4, 8, 8, 8}, xv), steps);
        nn::Node* diff = nn::sub(t, out, t.leaf(out->shape, target));
        t.backward(nn::mean_all(t, nn::mul(t, diff, diff)));
        analytic = t.param_gradients(net.params());
    }
    std::vector<double> flat = net.params().flatten();
    Rng pick(51);
    double e2e_rel = 0.0;
    const double h = 1e-5;
    for (int probe = 0; probe < 20; ++probe) {
        auto idx = static_cast<std::size_t>(pick.uniform_int(flat.size()));
        double saved = flat[idx];
        flat[idx] = saved + h;
        net.params().unflatten(flat);
        double fp = loss_value();
        flat[idx] = saved - h;
        net.params().unflatten(flat);
        double fm = loss_value();
        flat[idx] = saved;
        net.params().unflatten(flat);
        double fd = (fp - fm) / (2.0 * h);
        double an = analytic[idx];
        double rel = std::abs(fd - an) / std::max(std::abs(an), 1e-4);
        e2e_rel = std::max(e2e_rel, rel);
    }
    c.expect(e2e_rel <= 1e-4, "end-to-end rel err " + fmt(e2e_rel));
    c << cases.size() << " ops, worst rel " << fmt(worst_rel) << " / abs " << fmt(worst_abs)
      << "; net rel " << fmt(e2e_rel);
    return c;
}

// --- 5: schedule and forward-process invariants -----------------------------

Checker schedule_invariants() {
    Checker c;
    for (const char* kind : {"cosine", "linear"}) {
        ScheduleConfig cfg;
        cfg.kind = kind;
        cfg.steps = 1000;
        NoiseSchedule sched(cfg);
        double worst_vp = 0.0;
        bool monotone = true;
        for (int i = 0; i <= cfg.steps; ++i) {
            double a = sched.alpha(i), s = sched.sigma(i);
            worst_vp = std::max(worst_vp, std::abs(a * a + s * s - 1.0));
            if (i >= 1 && !(sched.snr(i) < sched.snr(i - 1))) monotone = false;
        }
        c.expect(worst_vp <= 1e-12, std::string(kind) + " alpha^2+sigma^2 off by " + fmt(worst_vp));
        c.expect(monotone, std::string(kind) + " snr not strictly decreasing");
        c.expect(sched.alpha_bar(0) == 1.0, std::string(kind) + " abar(0) != 1");
    }

    ScheduleConfig cfg;
    cfg.steps = 100;
    ChannelSchedules sched{cfg};
    const int r = 8;
    const std::size_t n = static_cast<std::size_t>(4) * r * r * r;
    Rng rng(derive_seed(51, 0));
    std::vector<double> clean(n);
    for (double& v : clean) v = rng.uniform(-2.0, 2.0);
    std::vector<int> zero{0};
    std::vector<double> eps(n);
    for (double& v : eps) v = rng.normal();
    std::vector<double> same = perturb(clean, r, zero, eps, sched);
    c.expect(same == clean, "perturb at step 0 is not the identity");

    PosteriorCoeffs p1 = posterior_coeffs(sched.density, 1);
    c.expect(p1.clean_coeff == 1.0 && p1.state_coeff == 0.0 && p1.variance == 0.0,
             "posterior at step 1 does not collapse onto the estimate");

    // Standard-normal data stays standard normal under the forward process.
    const int draws = 200;
    std::vector<int> mid{50};
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0;
    for (int d = 0; d < draws; ++d) {
        for (double& v : clean) v = rng.normal();
        for (double& v : eps) v = rng.normal();
        std::vector<double> z = perturb(clean, r, mid, eps, sched);
        for (double v : z) {
            sum += v;
            sum2 += v * v;
            ++count;
        }
    }
    double m = sum / static_cast<double>(count);
    double var = sum2 / static_cast<double>(count) - m * m;
    c.expect(std::abs(var - 1.0) <= 0.05, "marginal variance " + fmt(var));
    c << "vp exact, snr monotone, marginal var " << fmt(var) << " on " << count << " draws";
    return c;
}

// --- 6: sampler against oracle denoisers ------------------------------------

struct ConstOracle : Denoiser {
    std::vector<double> field;
    nn::Node* predict(nn::Tape& tape, nn::Node* v_t, std::span<const int>) override {
        std::vector<double> out;
        out.reserve(v_t->value.size());
        while (out.size() < v_t->value.size()) out.insert(out.end(), field.begin(), field.end());
        return tape.leaf(v_t->shape, out);
    }
};

struct SnapOracle : Denoiser {
    std::vector<double> a, b;
    nn::Node* predict(nn::Tape& tape, nn::Node* v_t, std::span<const int>) override {
        double da = 0.0, db = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            da += (v_t->value[i] - a[i]) * (v_t->value[i] - a[i]);
            db += (v_t->value[i] - b[i]) * (v_t->value[i] - b[i]);
        }
        return tape.leaf(v_t->shape, da <= db ? a : b);
    }
};

Checker sampler_oracles() {
    Checker c;
    const int r = 4;
    GroupStats identity;

    ConstOracle oracle;
    oracle.field.resize(static_cast<std::size_t>(4) * r * r * r);
    Rng rng(derive_seed(61, 0));
    for (double& v : oracle.field) v = rng.uniform(-1.5, 1.5);
    ScheduleConfig cfg;
    cfg.steps = 50;
    ChannelSchedules sched{cfg};
    SamplerConfig mean_cfg;
    mean_cfg.seed = 9;
    mean_cfg.deterministic_mean = true;
    VoxelGrid got = ancestral_sample(oracle, sched, identity, r, mean_cfg);
    double dev = 0.0;
    std::vector<double> got_field = grid_to_field(got);
    for (std::size_t i = 0; i < got_field.size(); ++i)
        dev = std::max(dev, std::abs(got_field[i] - oracle.field[i]));
    c.expect(dev <= 1e-6, "constant-oracle mean sample off by " + fmt(dev));

    // Guidance pulls a two-grid memorizer toward the observed grid.
    VoxelGrid red = VoxelGrid::filled(r, 2.0, {2.0, -2.0, -2.0});
    VoxelGrid blue = VoxelGrid::filled(r, 2.0, {-2.0, -2.0, 2.0});
    std::vector<VoxelGrid> dataset{red, blue};
    GroupStats stats = compute_group_stats(dataset);
    SnapOracle snap;
    snap.a = grid_to_field(red);
    normalize_field(snap.a, red.voxel_count(), stats);
    snap.b = grid_to_field(blue);
    normalize_field(snap.b, blue.voxel_count(), stats);

    ScheduleConfig short_cfg;
    short_cfg.steps = 16;
    ChannelSchedules short_sched{short_cfg};
    Intrinsics intr = Intrinsics::square(12);
    QuadratureConfig quad = default_quadrature(r);
    CameraPose pose = look_at({2.8, 1.2, 0.8}, {0, 0, 0});
    Observation obs{pose, render_image(red, pose, intr, quad, {})};
    GuidanceConfig guide;
    guide.inner_steps = 5;
    guide.step_size = 2.0;
    guide.lambda_noisy = 15.0;

    int red_wins = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SamplerConfig sc;
        sc.seed = seed;
        VoxelGrid out = guided_sample(snap, short_sched, stats, r, sc, guide, obs, intr, quad, {});
        if (l2(out.data, red.data) < l2(out.data, blue.data)) ++red_wins;
    }
    c.expect(red_wins >= 19, "guided runs picked the observed grid only " +
                                 std::to_string(red_wins) + "/20 times");

    GuidanceConfig none = guide;
    none.inner_steps = 0;
    SamplerConfig sc;
    sc.seed = 123;
    VoxelGrid guided = guided_sample(snap, short_sched, stats, r, sc, none, obs, intr, quad, {});
    VoxelGrid plain = ancestral_sample(snap, short_sched, stats, r, sc);
    c.expect(guided.data == plain.data, "zero-strength guidance altered the chain");
    c << "const oracle off " << fmt(dev) << ", guidance " << red_wins << "/20, K=0 bit-exact";
    return c;
}

// --- 7: a small model memorizes a four-grid dataset -------------------------

Checker overfit_generation() {
    Checker c;
    ActivationParams act;
    const int r = 8;
    std::vector<VoxelGrid> grids;
    for (int s = 0; s < 4; ++s)
        grids.push_back(voxelize_scene(random_scene(derive_seed(71, s)), r, act));

    nn::UNetConfig mc;
    mc.width = 8;
    mc.levels = 2;
    mc.res_blocks = 1;
    mc.time_dim = 32;
    mc.norm_groups = 4;
    ScheduleConfig sc;
    sc.steps = 64;
    DiffusionModel model(mc);
    model.init_params(derive_seed(72, 0));
    DiffusionTrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.batch_size = 8;
    tc.iterations = 2000;
    tc.seed = 73;
    Trainer trainer(model, ChannelSchedules{sc}, tc);
    trainer.set_dataset(grids);

    std::vector<double> losses;
    losses.reserve(tc.iterations);
    for (int i = 0; i < tc.iterations; ++i) losses.push_back(trainer.step().loss);
    double initial = mean(std::span(losses).subspan(0, 100));
    double final = mean(std::span(losses).subspan(losses.size() - 100));
    c.expect(final < 0.2 * initial,
             "smoothed loss " + fmt(initial) + " -> " + fmt(final) + " (needs < 20%)");

    std::vector<std::vector<double>> train_fields;
    for (const VoxelGrid& g : grids) {
        train_fields.push_back(grid_to_field(g));
        normalize_field(train_fields.back(), g.voxel_count(), trainer.stats());
    }
    int near_train = 0;
    double worst_margin = 1e9;
    for (int k = 0; k < 8; ++k) {
        SamplerConfig scfg;
        scfg.seed = derive_seed(74, k);
        VoxelGrid sample = ancestral_sample(model, trainer.schedules(), trainer.stats(), r, scfg);
        std::vector<double> f = grid_to_field(sample);
        normalize_field(f, sample.voxel_count(), trainer.stats());
        double best = 1e18;
        for (const auto& tf : train_fields) best = std::min(best, l2(f, tf));
        VoxelGrid fresh = voxelize_scene(random_scene(derive_seed(75, k)), r, act);
        std::vector<double> ff = grid_to_field(fresh);
        normalize_field(ff, fresh.voxel_count(), trainer.stats());
        double off = l2(f, ff);
        if (best < off) ++near_train;
        worst_margin = std::min(worst_margin, off - best);
    }
    c.expect(near_train >= 6,
             "only " + std::to_string(near_train) + "/8 samples near the training set");
    c << "loss " << fmt(initial) << " -> " << fmt(final) << " (" << fmt(100.0 * final / initial)
      << "%), " << near_train << "/8 samples nearest training data";
    return c;
}

// --- 8: optional paths reduce to the base path ------------------------------

Checker variant_equivalences() {
    Checker c;
    const int r = 4;
    const std::size_t n = static_cast<std::size_t>(4) * r * r * r;
    Rng rng(derive_seed(81, 0));
    std::vector<double> clean(2 * n), eps(2 * n);
    for (double& v : clean) v = rng.uniform(-2.0, 2.0);
    for (double& v : eps) v = rng.normal();
    std::vector<int> steps{3, 17};

    for (const char* kind : {"cosine", "linear"}) {
        ScheduleConfig cfg;
        cfg.kind = kind;
        cfg.steps = 32;
        ChannelSchedules shared{cfg};
        ChannelSchedules split{NoiseSchedule(cfg), NoiseSchedule(cfg)};
        std::vector<double> a = perturb(clean, r, steps, eps, shared);
        std::vector<double> b = perturb(clean, r, steps, eps, split);
        c.expect(a == b, std::string(kind) + " split schedules diverge from the shared path");
    }

    ScheduleConfig cfg;
    cfg.steps = 32;
    ChannelSchedules sched{cfg};
    nn::UNetConfig mc;
    mc.width = 4;
    mc.levels = 1;
    mc.res_blocks = 1;
    mc.time_dim = 8;
    mc.norm_groups = 2;
    DiffusionModel model(mc);
    model.init_params(derive_seed(82, 0));
    GroupStats stats;

    DiffusionLossConfig base;
    DiffusionLossConfig inf_tau;
    inf_tau.visibility_aware = true;
    inf_tau.visibility_tau = std::numeric_limits<double>::infinity();

    std::vector<double> base_grads, tau_grads;
    double base_loss = 0.0, tau_loss = 0.0;
    for (int pass = 0; pass < 2; ++pass) {
        nn::Tape tape;
        nn::Node* loss = diffusion_loss(tape, model, clean, r, steps, eps, sched,
                                        pass == 0 ? base : inf_tau, stats);
        tape.backward(loss);
        if (pass == 0) {
            base_loss = loss->value[0];
            base_grads = model.flat_gradients(tape);
        } else {
            tau_loss = loss->value[0];
            tau_grads = model.flat_gradients(tape);
        }
    }
    c.expect(base_loss == tau_loss, "infinite-threshold visibility loss differs from base");
    c.expect(base_grads == tau_grads, "infinite-threshold visibility gradients differ from base");
    c << "split==shared and tau=inf==base, bit for bit";
    return c;
}

// --- 9: pipeline reruns are byte-identical, artifacts round-trip ------------

int run_tool(const std::string& args, std::string* output = nullptr) {
    std::string cmd = std::string(VOXDIFF_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return -1;
    std::array<char, 4096> buf;
    std::string text;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) text.append(buf.data(), n);
    int status = pclose(pipe);
    if (output != nullptr) *output = text;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in.good()) return "<missing " + p.string() + ">";
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Checker pipeline_determinism() {
    Checker c;
    fs::path tmp = fs::temp_directory_path() /
                   ("voxdiff_accept_" + std::to_string(std::random_device{}()));
    fs::create_directories(tmp);

    for (const char* name : {"a", "b"}) {
        fs::path out = tmp / name;
        std::string flags =
            "--out " + out.string() +
            " --seed 9 --set dataset.n_scenes=2 --set dataset.n_views=6"
            " --set dataset.resolution=8 --set dataset.image_size=16"
            " --set fit.iterations=40 --set fit.rays_per_step=256"
            " --set unet.width=4 --set unet.levels=1 --set unet.res_blocks=1"
            " --set schedule.steps=8 --set train.iterations=20 --set train.batch_size=2"
            " --set guidance.inner_steps=2 --set io.log_every=0";
        std::string log;
        c.expect(run_tool("dataset build " + flags, &log) == 0, "dataset build failed: " + log);
        c.expect(run_tool("fit " + flags + " --holdout 1", &log) == 0, "fit failed: " + log);
        c.expect(run_tool("train " + flags, &log) == 0, "train failed: " + log);
        c.expect(run_tool("sample " + flags + " --preview", &log) == 0, "sample failed: " + log);
        c.expect(run_tool("reconstruct " + flags + " --scene 1 --view 2", &log) == 0,
                 "reconstruct failed: " + log);
        if (!c.ok) break;
    }

    int identical = 0;
    const std::vector<std::string> artifacts{
        "run.json",
        "dataset/manifest.json",
        "dataset/scene_0000/grid.vxgr",
        "dataset/scene_0000/view_0000.ppm",
        "dataset/fits/scene_0001.vxgr",
        "checkpoints/final.vxck",
        "traces/train.csv",
        "samples/sample_000.vxgr",
        "samples/sample_000.ppm",
        "recon/scene_0001_view_2.vxgr",
        "recon/scene_0001_view_2.ppm",
    };
    if (c.ok)
        for (const std::string& rel : artifacts) {
            bool same = file_bytes(tmp / "a" / rel) == file_bytes(tmp / "b" / rel);
            c.expect(same, rel + " differs between reruns");
            if (same) ++identical;
        }

    if (c.ok) {
        fs::path rt = tmp / "roundtrip";
        fs::create_directories(rt);

        fs::path grid_src = tmp / "a" / "samples" / "sample_000.vxgr";
        grid_write(grid_read(grid_src.string()), (rt / "grid.vxgr").string());
        c.expect(file_bytes(grid_src) == file_bytes(rt / "grid.vxgr"),
                 "grid write/read/write changed bytes");

        fs::path ck_src = tmp / "a" / "checkpoints" / "final.vxck";
        nn::CheckpointData ck = nn::read_checkpoint(ck_src.string());
        nn::write_checkpoint((rt / "ck.vxck").string(), ck.meta, ck.tensors);
        c.expect(file_bytes(ck_src) == file_bytes(rt / "ck.vxck"),
                 "checkpoint write/read/write changed bytes");

        fs::path ppm_src = tmp / "a" / "samples" / "sample_000.ppm";
        write_ppm(read_ppm(ppm_src.string()), (rt / "img.ppm").string());
        c.expect(file_bytes(ppm_src) == file_bytes(rt / "img.ppm"),
                 "ppm write/read/write changed bytes");

        Image img = read_ppm(ppm_src.string());
        write_pfm(img, (rt / "img1.pfm").string());
        write_pfm(read_pfm((rt / "img1.pfm").string()), (rt / "img2.pfm").string());
        c.expect(file_bytes(rt / "img1.pfm") == file_bytes(rt / "img2.pfm"),
                 "pfm write/read/write changed bytes");
        c << identical << "/" << artifacts.size() << " artifacts byte-identical, 4 round-trips exact";
    }
    fs::remove_all(tmp);
    return c;
}

// --- gate -------------------------------------------------------------------

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    Checker (*run)();
};

const Criterion kCriteria[] = {
    {1, "photometric gradients match finite differences", 30.0, renderer_gradient_check},
    {2, "rendering matches closed forms and conserves weight", 30.0, rendering_oracles},
    {3, "regularized fits clean unseen voxels at full held-out quality", 600.0,
     fit_regularization},
    {4, "autodiff ops and network gradients match finite differences", 120.0, autodiff_suite},
    {5, "noise schedule and forward-process invariants hold", 60.0, schedule_invariants},
    {6, "sampler reproduces oracles and guidance steers", 120.0, sampler_oracles},
    {7, "small denoiser memorizes a four-grid dataset", 900.0, overfit_generation},
    {8, "schedule split and visibility weighting reduce to the base path", 10.0,
     variant_equivalences},
    {9, "pipeline reruns are byte-identical and artifacts round-trip", 300.0,
     pipeline_determinism},
};

}  // namespace

int main(int argc, char** argv) {
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) {
        int id = std::atoi(argv[i]);
        if (id < 1 || id > 9) {
            std::fprintf(stderr, "usage: %s [criterion 1..9]...\n", argv[0]);
            return 1;
        }
        selected.push_back(id);
    }

    bool all_ok = true;
    for (const Criterion& cr : kCriteria) {
        if (!selected.empty() &&
            std::find(selected.begin(), selected.end(), cr.id) == selected.end())
            continue;
        auto start = std::chrono::steady_clock::now();
        Checker result = cr.run();
        double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (elapsed >= cr.budget_s) {
            result.ok = false;
            result.note << " FAILED[over budget " << fmt(cr.budget_s) << " s]";
        }
        std::printf("[%s] %d %s (%s; %.1f s)\n", result.ok ? "PASS" : "FAIL", cr.id, cr.name,
                    result.note.str().c_str(), elapsed);
        std::fflush(stdout);
        all_ok = all_ok && result.ok;
    }
    return all_ok ? 0 : 1;
}
