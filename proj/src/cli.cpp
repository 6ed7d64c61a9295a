#include "voxdiff/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "voxdiff/config.hpp"
#include "voxdiff/diffusion/process.hpp"
#include "voxdiff/diffusion/train.hpp"
#include "voxdiff/nn/checkpoint.hpp"
#include "voxdiff/threading.hpp"

namespace voxdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Streams for deriving per-stage seeds from the master --seed.
enum SeedStream : std::uint64_t {
    kSeedDataset = 1,
    kSeedFit = 2,
    kSeedTrain = 3,
    kSeedSample = 4,
    kSeedReconstruct = 5,
    kSeedModelInit = 6,
};

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out = "run";
    std::uint64_t seed = 0;
    int jobs = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON run configuration file");
    cmd->add_option("--set", o.sets,
                    "config override as section.key=value, may be repeated");
    cmd->add_option("--out", o.out, "run directory holding every artifact")
        ->capture_default_str();
    cmd->add_option("--seed", o.seed,
                    "master seed; stage seeds derive from it unless the config pins them")
        ->capture_default_str();
    cmd->add_option("--jobs", o.jobs,
                    "worker cap for dataset/fit stages; 0 defers to hardware and "
                    "VOXDIFF_THREADS")
        ->capture_default_str();
}

struct RunContext {
    RunConfig cfg;
    fs::path out;
    std::uint64_t seed = 0;
};

RunContext resolve_context(const CommonOpts& o) {
    json doc = json::object();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw std::invalid_argument("config: cannot open " + o.config_path);
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument("config: " + o.config_path + ": " + e.what());
        }
    }
    for (const std::string& s : o.sets) apply_override(doc, s);

    RunContext ctx;
    ctx.cfg = config_from_json(doc);
    ctx.seed = o.seed;
    auto explicit_seed = [&](const char* section) {
        return doc.contains(section) && doc.at(section).contains("seed");
    };
    if (!explicit_seed("dataset")) ctx.cfg.dataset.seed = derive_seed(o.seed, kSeedDataset);
    if (!explicit_seed("fit")) ctx.cfg.fit.seed = derive_seed(o.seed, kSeedFit);
    if (!explicit_seed("train")) ctx.cfg.train.seed = derive_seed(o.seed, kSeedTrain);
    if (o.jobs > 0) {
        ctx.cfg.dataset.jobs = o.jobs;
        ctx.cfg.fit.jobs = o.jobs;
    }
    ctx.cfg.validate();
    ctx.out = fs::path(o.out);
    return ctx;
}

void write_run_json(const RunContext& ctx, const std::string& command) {
    fs::create_directories(ctx.out);
    json doc{{"version", kToolVersion},
             {"command", command},
             {"seed", ctx.seed},
             {"config", config_to_json(ctx.cfg)}};
    std::ofstream out(ctx.out / "run.json");
    out << doc.dump(2) << '\n';
}

fs::path dataset_root(const RunContext& ctx) {
    fs::path p = ctx.cfg.io.dataset_dir;
    return p.is_absolute() ? p : ctx.out / p;
}

fs::path checkpoint_path(const RunContext& ctx, const std::string& flag_override) {
    if (!flag_override.empty()) return flag_override;
    if (!ctx.cfg.io.checkpoint.empty()) {
        fs::path p = ctx.cfg.io.checkpoint;
        return p.is_absolute() ? p : ctx.out / p;
    }
    return ctx.out / "checkpoints" / "final.vxck";
}

SceneDataset open_dataset(const RunContext& ctx) {
    fs::path root = dataset_root(ctx);
    if (!fs::exists(root / "manifest.json"))
        throw std::invalid_argument("no dataset at " + root.string() +
                                    "; run `voxdiff dataset build` first");
    return load_dataset(root.string());
}

void write_image_auto(const Image& img, const fs::path& path) {
    if (path.extension() == ".pfm")
        write_pfm(img, path.string());
    else
        write_ppm(img, path.string());
}

Image read_image_auto(const fs::path& path) {
    if (path.extension() == ".pfm") return read_pfm(path.string());
    return read_ppm(path.string());
}

Vec3 parse_vec3(const std::string& text) {
    Vec3 v{};
    std::istringstream in(text);
    char sep = ',';
    if (!(in >> v[0] >> sep >> v[1] >> sep >> v[2]))
        throw std::invalid_argument("--pose expects x,y,z, got \"" + text + "\"");
    return v;
}

int scene_index_of(const SceneDataset& ds, const std::string& key) {
    for (std::size_t i = 0; i < ds.scenes.size(); ++i)
        if (ds.scenes[i].id == key) return static_cast<int>(i);
    try {
        std::size_t pos = 0;
        int idx = std::stoi(key, &pos);
        if (pos == key.size() && idx >= 0 && idx < static_cast<int>(ds.scenes.size())) return idx;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument("--scene " + key + " is neither a scene id nor an index (0.." +
                                std::to_string(ds.scenes.size() - 1) + ")");
}

void run_dataset_build(const CommonOpts& o) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "dataset build");
    fs::path root = dataset_root(ctx);
    SceneDataset ds = build_dataset(ctx.cfg.dataset, root.string());
    std::cout << "dataset: " << ds.scenes.size() << " scenes x " << ctx.cfg.dataset.n_views
              << " views -> " << root.string() << "\n";
}

void run_fit(const CommonOpts& o, int scene, int holdout) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "fit");
    SceneDataset ds = open_dataset(ctx);
    if (holdout < 0 || holdout >= ctx.cfg.dataset.n_views)
        throw std::invalid_argument("--holdout must lie in [0, n_views)");
    if (scene >= static_cast<int>(ds.scenes.size()))
        throw std::invalid_argument("--scene index beyond the dataset");
    fs::create_directories(ctx.out / "traces");
    fs::create_directories(dataset_root(ctx) / "fits");

    const Intrinsics intr = ds.config.intrinsics();
    const ActivationParams act{};
    int begin = scene < 0 ? 0 : scene;
    int end = scene < 0 ? static_cast<int>(ds.scenes.size()) : scene + 1;
    for (int i = begin; i < end; ++i) {
        std::vector<View> views = load_views(ds, i);
        std::span<const View> all(views);
        auto train_views = all.subspan(0, views.size() - holdout);
        auto heldout = all.subspan(views.size() - holdout);

        FitConfig fit_cfg = ctx.cfg.fit;
        fit_cfg.seed = derive_seed(ctx.cfg.fit.seed, static_cast<std::uint64_t>(i));
        FitResult result =
            fit_relufield(train_views, heldout, intr, ds.config.resolution, act, fit_cfg);

        const std::string rel = "fits/" + ds.scenes[i].id + ".vxgr";
        grid_write(result.grid, (dataset_root(ctx) / rel).string());
        attach_fitted_grid(ds, i, rel);
        write_trace_csv((ctx.out / "traces" / ("fit_" + ds.scenes[i].id + ".csv")).string(),
                        result.trace);
        std::cout << "fit " << ds.scenes[i].id << ": heldout psnr ";
        if (std::isnan(result.heldout_psnr))
            std::cout << "n/a";
        else
            std::cout << result.heldout_psnr << " dB";
        std::cout << "\n";
    }
}

void run_train(const CommonOpts& o, const std::string& source, const std::string& resume) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "train");
    SceneDataset ds = open_dataset(ctx);

    std::vector<VoxelGrid> grids;
    grids.reserve(ds.scenes.size());
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        if (source == "fitted") {
            if (!ds.scenes[i].fitted_grid)
                throw std::invalid_argument(ds.scenes[i].id +
                                            " has no fitted grid; run `voxdiff fit` first or "
                                            "pass --grids truth");
            grids.push_back(load_fitted_grid(ds, static_cast<int>(i)));
        } else {
            grids.push_back(load_scene_grid(ds, static_cast<int>(i)));
        }
    }

    diffusion::DiffusionModel model(ctx.cfg.unet);
    model.init_params(derive_seed(ctx.cfg.train.seed, kSeedModelInit));
    diffusion::Trainer trainer(model, diffusion::ChannelSchedules{ctx.cfg.schedule},
                               ctx.cfg.train);
    trainer.set_dataset(grids);
    if (!resume.empty()) trainer.restore(nn::read_checkpoint(resume));

    fs::create_directories(ctx.out / "checkpoints");
    fs::create_directories(ctx.out / "traces");
    std::vector<diffusion::TrainTraceRow> rows;
    while (trainer.current_step() < ctx.cfg.train.iterations) {
        diffusion::TrainTraceRow row = trainer.step();
        rows.push_back(row);
        if (ctx.cfg.io.log_every > 0 && row.step % ctx.cfg.io.log_every == 0)
            std::cout << "step " << row.step << " loss " << row.loss << " grad " << row.grad_norm
                      << " lr " << row.lr << "\n";
        if (ctx.cfg.io.checkpoint_every > 0 && row.step % ctx.cfg.io.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "step_%06d.vxck", row.step);
            trainer.save_checkpoint(ctx.out / "checkpoints" / name);
        }
    }
    trainer.save_checkpoint(ctx.out / "checkpoints" / "final.vxck");
    diffusion::write_train_trace_csv(ctx.out / "traces" / "train.csv", rows);
    std::cout << "train: " << trainer.current_step() << " steps";
    if (!rows.empty()) std::cout << ", final loss " << rows.back().loss;
    std::cout << ", checkpoint " << (ctx.out / "checkpoints" / "final.vxck").string() << "\n";
}

diffusion::LoadedModel open_model(const RunContext& ctx, const std::string& flag_override) {
    fs::path path = checkpoint_path(ctx, flag_override);
    if (!fs::exists(path))
        throw std::invalid_argument("no checkpoint at " + path.string() +
                                    "; pass --checkpoint or train first");
    return diffusion::load_trained_model(path);
}

void run_sample(const CommonOpts& o, int count, const std::string& checkpoint, bool preview) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "sample");
    diffusion::LoadedModel lm = open_model(ctx, checkpoint);
    fs::create_directories(ctx.out / "samples");
    for (int k = 0; k < count; ++k) {
        diffusion::SamplerConfig sc;
        sc.seed = derive_seed(ctx.seed, kSeedSample, static_cast<std::uint64_t>(k));
        sc.bounds = lm.bounds;
        VoxelGrid grid = diffusion::ancestral_sample(*lm.model, lm.schedules, lm.stats,
                                                     lm.resolution, sc);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03d", k);
        fs::path grid_path = ctx.out / "samples" / (std::string(name) + ".vxgr");
        grid_write(grid, grid_path.string());
        if (preview) {
            double r = ctx.cfg.dataset.radius / std::sqrt(3.0);
            CameraPose pose = look_at({r, r, r}, {0, 0, 0});
            Image img = render_image(grid, pose, ctx.cfg.dataset.intrinsics(),
                                     default_quadrature(grid.resolution), {},
                                     resolve_jobs(o.jobs));
            write_image_auto(img, ctx.out / "samples" / (std::string(name) + ".ppm"));
        }
        std::cout << "sample " << k << " -> " << grid_path.string() << "\n";
    }
}

void run_reconstruct(const CommonOpts& o, const std::string& scene_key, int view,
                     const std::string& checkpoint) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "reconstruct");
    SceneDataset ds = open_dataset(ctx);
    int scene = scene_index_of(ds, scene_key);
    if (view < 0 || view >= ctx.cfg.dataset.n_views)
        throw std::invalid_argument("--view must lie in [0, n_views)");
    diffusion::LoadedModel lm = open_model(ctx, checkpoint);

    std::vector<View> views = load_views(ds, scene);
    diffusion::Observation obs{views[static_cast<std::size_t>(view)].pose,
                               views[static_cast<std::size_t>(view)].image};
    const Intrinsics intr = ds.config.intrinsics();
    const QuadratureConfig quad = default_quadrature(lm.resolution);
    const ActivationParams act{};

    diffusion::SamplerConfig sc;
    sc.seed = derive_seed(derive_seed(ctx.seed, kSeedReconstruct, static_cast<std::uint64_t>(scene)),
                          static_cast<std::uint64_t>(view));
    sc.bounds = lm.bounds;
    VoxelGrid grid = diffusion::guided_sample(*lm.model, lm.schedules, lm.stats, lm.resolution,
                                              sc, ctx.cfg.guidance, obs, intr, quad, act);

    fs::create_directories(ctx.out / "recon");
    std::string stem = ds.scenes[scene].id + "_view_" + std::to_string(view);
    fs::path grid_path = ctx.out / "recon" / (stem + ".vxgr");
    grid_write(grid, grid_path.string());
    Image rerender = render_image(grid, obs.pose, intr, quad, act, resolve_jobs(o.jobs));
    write_image_auto(rerender, ctx.out / "recon" / (stem + ".ppm"));
    std::cout << "reconstruct " << ds.scenes[scene].id << " view " << view << ": psnr vs input "
              << psnr(rerender, obs.image) << " dB -> " << grid_path.string() << "\n";
}

void run_render(const CommonOpts& o, const std::string& grid_path, const std::string& pose_text,
                int size, const std::string& image_out) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "render");
    VoxelGrid grid = grid_read(grid_path);
    CameraPose pose = look_at(parse_vec3(pose_text), {0, 0, 0});
    Intrinsics intr = Intrinsics::square(size > 0 ? size : ctx.cfg.dataset.image_size,
                                         ctx.cfg.dataset.focal_factor);
    Image img = render_image(grid, pose, intr, default_quadrature(grid.resolution), {},
                             resolve_jobs(o.jobs));
    fs::path out_path = image_out.empty() ? ctx.out / "render.ppm" : fs::path(image_out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_image_auto(img, out_path);
    std::cout << "render -> " << out_path.string() << "\n";
}

void run_eval_psnr(const std::string& a, const std::string& b) {
    Image ia = read_image_auto(a);
    Image ib = read_image_auto(b);
    std::printf("psnr: %.6f dB\n", psnr(ia, ib));
}

bool verify_check(const std::string& name, const std::function<void()>& body) {
    try {
        body();
        std::cout << "[ok]   " << name << "\n";
        return true;
    } catch (const std::exception& e) {
        std::cout << "[FAIL] " << name << ": " << e.what() << "\n";
        return false;
    }
}

void expect(bool cond, const std::string& what) {
    if (!cond) throw std::runtime_error(what);
}

int run_verify(const CommonOpts& o) {
    RunContext ctx = resolve_context(o);
    write_run_json(ctx, "verify");
    bool ok = true;

    ok &= verify_check("schedules preserve variance and lose signal monotonically", [] {
        for (const char* kind : {"cosine", "linear"}) {
            diffusion::ScheduleConfig cfg;
            cfg.kind = kind;
            cfg.steps = 256;
            diffusion::NoiseSchedule sched(cfg);
            expect(sched.alpha_bar(0) == 1.0, "abar(0) != 1");
            for (int i = 0; i <= cfg.steps; ++i) {
                double a = sched.alpha(i), s = sched.sigma(i);
                expect(std::abs(a * a + s * s - 1.0) <= 1e-12, "alpha^2+sigma^2 != 1");
                if (i > 0)
                    expect(sched.alpha_bar(i) < sched.alpha_bar(i - 1), "abar not decreasing");
            }
        }
    });

    ok &= verify_check("perturbation at step 0 is the identity", [] {
        diffusion::ScheduleConfig cfg;
        cfg.steps = 32;
        diffusion::ChannelSchedules sched{cfg};
        Rng rng(1);
        std::vector<double> clean(4 * 8), eps(clean.size());
        for (auto& v : clean) v = rng.uniform(-2.0, 2.0);
        for (auto& v : eps) v = rng.normal();
        std::vector<int> steps{0};
        expect(diffusion::perturb(clean, 2, steps, eps, sched) == clean, "perturb(0) changed V");
    });

    ok &= verify_check("posterior at the final step returns the estimate", [] {
        diffusion::ScheduleConfig cfg;
        cfg.steps = 32;
        diffusion::ChannelSchedules sched{cfg};
        Rng rng(2);
        std::vector<double> state(4), estimate(4);
        for (auto& v : state) v = rng.normal();
        for (auto& v : estimate) v = rng.normal();
        auto out = state;
        diffusion::posterior_step(out, estimate, 1, 1, sched, &rng);
        expect(out == estimate, "posterior(1) != estimate");
    });

    ok &= verify_check("ray compositing weights and tail transmittance sum to one", [] {
        VoxelGrid grid = voxelize_scene(random_scene(3), 8, {});
        const Intrinsics intr = Intrinsics::square(16);
        const QuadratureConfig quad = default_quadrature(8);
        CameraPose pose = look_at({3.0, 1.0, -2.0}, {0, 0, 0});
        for (int py = 0; py < 16; ++py)
            for (int px = 0; px < 16; ++px) {
                Ray ray = generate_ray(pose, intr, px, py, grid.bounds);
                RaySample s = render_ray(grid, ray, quad, {});
                double total = s.end_transmittance;
                for (double w : s.weights) total += w;
                expect(std::abs(total - 1.0) <= 1e-6, "sum w + T != 1");
            }
    });

    ok &= verify_check("photometric gradient agrees with finite differences", [] {
        VoxelGrid grid = voxelize_scene(random_scene(4), 4, {});
        const Intrinsics intr = Intrinsics::square(8);
        const QuadratureConfig quad = default_quadrature(4);
        CameraPose pose = look_at({2.0, -2.5, 1.0}, {0, 0, 0});
        VoxelGrid target = voxelize_scene(random_scene(5), 4, {});
        std::array<View, 1> views{View{pose, render_image(target, pose, intr, quad, {})}};
        auto grad = photometric_grad(grid, views, intr, quad, {});
        Rng rng(6);
        int checked = 0;
        while (checked < 5) {
            auto idx = rng.uniform_int(grad.size());
            if (std::abs(grad[idx]) <= 1e-8) continue;
            const double h = 1e-5;
            VoxelGrid plus = grid, minus = grid;
            plus.data[idx] += h;
            minus.data[idx] -= h;
            double fd = (photometric_loss(plus, views, intr, quad, {}) -
                         photometric_loss(minus, views, intr, quad, {})) /
                        (2.0 * h);
            expect(std::abs(fd - grad[idx]) <= 1e-5 * std::abs(grad[idx]),
                   "gradient mismatch at index " + std::to_string(idx));
            ++checked;
        }
    });

    ok &= verify_check("model checkpoints round trip bit-exactly", [&ctx] {
        nn::UNetConfig cfg;
        cfg.width = 4;
        cfg.levels = 1;
        cfg.res_blocks = 1;
        nn::UNet net(cfg);
        net.init_params(12);
        std::vector<nn::CheckpointTensor> tensors;
        nn::append_store_tensors(tensors, net.params(), "model.");
        fs::path tmp = ctx.out / "verify_ckpt.vxck";
        nn::write_checkpoint(tmp, json{{"kind", "verify"}}, tensors);
        nn::CheckpointData back = nn::read_checkpoint(tmp);
        nn::UNet other(cfg);
        other.init_params(13);
        nn::load_store_tensors(other.params(), back, "model.");
        expect(net.params().flatten() == other.params().flatten(), "parameters changed");
        fs::remove(tmp);
    });

    ok &= verify_check("grid files round trip bit-exactly", [&ctx] {
        VoxelGrid grid = voxelize_scene(random_scene(7), 8, {});
        fs::path a = ctx.out / "verify_a.vxgr";
        fs::path b = ctx.out / "verify_b.vxgr";
        grid_write(grid, a.string());
        VoxelGrid back = grid_read(a.string());
        grid_write(back, b.string());
        std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        expect(!ba.empty() && ba == bb, "grid bytes changed after a round trip");
        fs::remove(a);
        fs::remove(b);
    });

    ok &= verify_check("freshly initialized denoiser head predicts zero", [] {
        nn::UNetConfig cfg;
        cfg.width = 4;
        cfg.levels = 1;
        cfg.res_blocks = 1;
        nn::UNet net(cfg);
        net.init_params(20);
        nn::Tape tape;
        Rng rng(21);
        std::vector<double> x(4 * 64);
        for (auto& v : x) v = rng.normal();
        std::array<int, 1> steps{3};
        nn::Node* out = net.forward(tape, tape.leaf(nn::Shape{1, 4, 4, 4, 4}, x), steps);
        for (double v : out->value) expect(v == 0.0, "head output not zero");
    });

    return ok ? 0 : 2;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"voxdiff: voxel radiance fields with a diffusion prior"};
    app.require_subcommand(1);
    int rc = 0;
    CommonOpts common;

    CLI::App* dataset = app.add_subcommand("dataset", "dataset operations");
    dataset->require_subcommand(1);
    CLI::App* build = dataset->add_subcommand("build", "generate scenes, render views, "
                                                       "write the manifest");
    add_common(build, common);
    build->callback([&] { run_dataset_build(common); });

    CLI::App* fit = app.add_subcommand("fit", "fit radiance-field grids to posed images");
    add_common(fit, common);
    int fit_scene = -1, fit_holdout = 8;
    fit->add_option("--scene", fit_scene, "scene index, -1 fits every scene")
        ->capture_default_str();
    fit->add_option("--holdout", fit_holdout, "trailing views reserved for the psnr report")
        ->capture_default_str();
    fit->callback([&] { run_fit(common, fit_scene, fit_holdout); });

    CLI::App* train = app.add_subcommand("train", "train the diffusion prior over fitted grids");
    add_common(train, common);
    std::string train_source = "fitted", train_resume;
    train->add_option("--grids", train_source, "training grids: fitted or truth")
        ->check(CLI::IsMember({"fitted", "truth"}))
        ->capture_default_str();
    train->add_option("--resume", train_resume, "checkpoint to continue from");
    train->callback([&] { run_train(common, train_source, train_resume); });

    CLI::App* sample = app.add_subcommand("sample", "draw unconditional grids from the prior");
    add_common(sample, common);
    int sample_count = 1;
    std::string sample_ckpt;
    bool sample_preview = false;
    sample->add_option("--count", sample_count, "number of samples")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sample->add_option("--checkpoint", sample_ckpt, "model checkpoint path");
    sample->add_flag("--preview", sample_preview, "also render each sample to a ppm");
    sample->callback([&] { run_sample(common, sample_count, sample_ckpt, sample_preview); });

    CLI::App* recon = app.add_subcommand("reconstruct",
                                         "guided sampling conditioned on one posed view");
    add_common(recon, common);
    std::string recon_scene, recon_ckpt;
    int recon_view = 63;
    recon->add_option("--scene", recon_scene, "scene id or index")->required();
    recon->add_option("--view", recon_view, "view index used as the observation")
        ->capture_default_str();
    recon->add_option("--checkpoint", recon_ckpt, "model checkpoint path");
    recon->callback([&] { run_reconstruct(common, recon_scene, recon_view, recon_ckpt); });

    CLI::App* render = app.add_subcommand("render", "render a stored grid from a camera pose");
    add_common(render, common);
    std::string render_grid, render_pose = "2.8,2.8,2.8", render_image_out;
    int render_size = 0;
    render->add_option("--grid", render_grid, "grid file to render")->required();
    render->add_option("--pose", render_pose, "camera position x,y,z looking at the origin")
        ->capture_default_str();
    render->add_option("--size", render_size, "square image size, 0 uses dataset.image_size")
        ->capture_default_str();
    render->add_option("--image-out", render_image_out, "output image path, default "
                                                        "<out>/render.ppm");
    render->callback(
        [&] { run_render(common, render_grid, render_pose, render_size, render_image_out); });

    CLI::App* eval = app.add_subcommand("eval", "metrics");
    eval->require_subcommand(1);
    CLI::App* eval_psnr = eval->add_subcommand("psnr", "peak signal-to-noise ratio "
                                                       "between two images");
    std::string eval_a, eval_b;
    eval_psnr->add_option("--a", eval_a, "first image (ppm or pfm)")->required();
    eval_psnr->add_option("--b", eval_b, "second image (ppm or pfm)")->required();
    eval_psnr->callback([&] { run_eval_psnr(eval_a, eval_b); });

    CLI::App* verify = app.add_subcommand("verify",
                                          "run the built-in invariant checks and report "
                                          "line by line");
    add_common(verify, common);
    verify->callback([&] { rc = run_verify(common); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}

}  // namespace voxdiff
