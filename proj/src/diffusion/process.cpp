#include "voxdiff/diffusion/process.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace voxdiff::diffusion {

namespace {

constexpr std::uint64_t kSampleInitStream = 0x696e6974;
constexpr std::uint64_t kSampleStepStream = 0x73746570;

std::size_t voxels_of(int resolution) {
    return static_cast<std::size_t>(resolution) * resolution * resolution;
}

void check_batch(std::span<const double> batch, int resolution, std::size_t fields,
                 const char* what) {
    if (resolution < 1) throw std::invalid_argument(std::string(what) + ": bad resolution");
    if (batch.size() != fields * 4 * voxels_of(resolution))
        throw std::invalid_argument(std::string(what) + ": batch size does not match layout");
}

double group_scale(const GroupStats& s, int channel) {
    return channel == 0 ? s.density_scale : s.color_scale;
}

}  // namespace

std::vector<double> perturb(std::span<const double> clean, int resolution,
                            std::span<const int> steps, std::span<const double> eps,
                            const ChannelSchedules& sched) {
    std::size_t fields = steps.size();
    check_batch(clean, resolution, fields, "perturb");
    if (eps.size() != clean.size())
        throw std::invalid_argument("perturb: noise must match the batch");
    std::size_t vox = voxels_of(resolution);

    std::vector<double> out(clean.size());
    for (std::size_t f = 0; f < fields; ++f) {
        int i = steps[f];
        double ad = sched.density.alpha(i), sd = sched.density.sigma(i);
        double ac = sched.color.alpha(i), sc = sched.color.sigma(i);
        std::size_t base = f * 4 * vox;
        for (std::size_t e = 0; e < 4 * vox; ++e) {
            bool density = e < vox;
            double a = density ? ad : ac;
            double s = density ? sd : sc;
            out[base + e] = a * clean[base + e] + s * eps[base + e];
        }
    }
    return out;
}

void DiffusionLossConfig::validate() const {
    if (weight_mode != "simple" && weight_mode != "snr")
        throw std::invalid_argument("diffusion loss: weight_mode must be simple or snr");
}

void to_json(nlohmann::json& j, const DiffusionLossConfig& c) {
    j = {{"weight_mode", c.weight_mode},
         {"visibility_aware", c.visibility_aware},
         {"visibility_tau", c.visibility_tau}};
}

void from_json(const nlohmann::json& j, DiffusionLossConfig& c) {
    c.weight_mode = j.value("weight_mode", c.weight_mode);
    c.visibility_aware = j.value("visibility_aware", c.visibility_aware);
    c.visibility_tau = j.value("visibility_tau", c.visibility_tau);
}

nn::Node* diffusion_loss(nn::Tape& tape, Denoiser& model, std::span<const double> clean,
                         int resolution, std::span<const int> steps, std::span<const double> eps,
                         const ChannelSchedules& sched, const DiffusionLossConfig& cfg,
                         const GroupStats& stats) {
    cfg.validate();
    std::size_t fields = steps.size();
    if (fields == 0) throw std::invalid_argument("diffusion loss: empty batch");
    check_batch(clean, resolution, fields, "diffusion loss");
    for (int i : steps)
        if (i < 1 || i > sched.steps())
            throw std::out_of_range("diffusion loss: step index outside [1,T]");

    auto noisy = perturb(clean, resolution, steps, eps, sched);
    std::size_t vox = voxels_of(resolution);
    int n = static_cast<int>(fields);
    nn::Shape shape{n, 4, resolution, resolution, resolution};

    nn::Node* v_t = tape.leaf(shape, noisy);
    nn::Node* estimate = model.predict(tape, v_t, steps);
    for (double v : estimate->value)
        if (!std::isfinite(v))
            throw std::runtime_error("diffusion loss: non-finite model output");

    // One weight per element folds the group weighting, the visibility boost,
    // and the per-group means into a single weighted sum; with the boost off
    // the added 0.0 leaves the base weights bit-identical.
    double tau = cfg.visibility_aware ? cfg.visibility_tau
                                      : std::numeric_limits<double>::infinity();
    std::vector<double> weights(clean.size());
    for (std::size_t f = 0; f < fields; ++f) {
        int i = steps[f];
        double wd = 1.0, wc = 1.0;
        if (cfg.weight_mode == "snr") {
            wd = sched.density.snr_weight(i);
            wc = sched.color.snr_weight(i);
        }
        std::size_t base = f * 4 * vox;
        for (std::size_t v = 0; v < vox; ++v) {
            weights[base + v] = wd / (static_cast<double>(fields) * static_cast<double>(vox));
            double raw_density = clean[base + v] * stats.density_scale + stats.density_mean;
            double boost = raw_density > tau ? 1.0 : 0.0;
            double w = (wc + boost) / (static_cast<double>(fields) * 3.0 * static_cast<double>(vox));
            for (int c = 1; c < 4; ++c)
                weights[base + static_cast<std::size_t>(c) * vox + v] = w;
        }
    }

    nn::Node* target = tape.leaf(shape, clean);
    nn::Node* err = nn::sub(tape, estimate, target);
    return nn::sum_all(tape, nn::mul(tape, nn::mul(tape, err, err), tape.leaf(shape, weights)));
}

PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int i) {
    if (i < 1 || i > sched.steps())
        throw std::out_of_range("posterior: step index outside [1,T]");
    double ab_i = sched.alpha_bar(i);
    double ab_s = sched.alpha_bar(i - 1);
    double ratio2 = ab_i / ab_s;
    double denom = 1.0 - ab_i;
    return PosteriorCoeffs{std::sqrt(ab_s) * (1.0 - ratio2) / denom,
                           std::sqrt(ratio2) * (1.0 - ab_s) / denom,
                           (1.0 - ab_s) * (1.0 - ratio2) / denom};
}

void posterior_step(std::span<double> state, std::span<const double> clean_estimate,
                    int resolution, int i, const ChannelSchedules& sched, Rng* rng) {
    std::size_t vox = voxels_of(resolution);
    if (state.size() != clean_estimate.size() || state.size() % (4 * vox) != 0)
        throw std::invalid_argument("posterior: state and estimate must be matching field spans");
    auto cd = posterior_coeffs(sched.density, i);
    auto cc = posterior_coeffs(sched.color, i);
    double sd = std::sqrt(cd.variance);
    double sc = std::sqrt(cc.variance);
    // No rng means the caller wants the posterior mean; at i == 1 the
    // variance is exactly zero so no draws happen either way.
    bool need_noise = rng != nullptr && !(cd.variance == 0.0 && cc.variance == 0.0);
    for (std::size_t e = 0; e < state.size(); ++e) {
        bool density = (e % (4 * vox)) < vox;
        const auto& co = density ? cd : cc;
        double next = co.clean_coeff * clean_estimate[e] + co.state_coeff * state[e];
        if (need_noise) next += (density ? sd : sc) * rng->normal();
        state[e] = next;
    }
}

void GuidanceConfig::validate() const {
    if (inner_steps < 0) throw std::invalid_argument("guidance: inner_steps must be >= 0");
    if (inner_steps > 0 && !(step_size > 0.0))
        throw std::invalid_argument("guidance: step_size must be positive when steps are taken");
    if (lambda_noisy < 0.0 || lambda_denoised < 0.0)
        throw std::invalid_argument("guidance: lambda weights must be nonnegative");
    if (mode != "noisy" && mode != "denoised" && mode != "both")
        throw std::invalid_argument("guidance: mode must be noisy, denoised, or both");
}

void to_json(nlohmann::json& j, const GuidanceConfig& c) {
    j = {{"inner_steps", c.inner_steps},
         {"step_size", c.step_size},
         {"lambda_noisy", c.lambda_noisy},
         {"lambda_denoised", c.lambda_denoised},
         {"mode", c.mode},
         {"backprop_denoiser", c.backprop_denoiser}};
}

void from_json(const nlohmann::json& j, GuidanceConfig& c) {
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.step_size = j.value("step_size", c.step_size);
    c.lambda_noisy = j.value("lambda_noisy", c.lambda_noisy);
    c.lambda_denoised = j.value("lambda_denoised", c.lambda_denoised);
    c.mode = j.value("mode", c.mode);
    c.backprop_denoiser = j.value("backprop_denoiser", c.backprop_denoiser);
}

VoxelGrid guidance_grad(const VoxelGrid& current, const Observation& obs, const Intrinsics& intr,
                        const QuadratureConfig& quad, const ActivationParams& act,
                        const GuidanceConfig& cfg, const DenoiserContext* ctx) {
    cfg.validate();
    std::array<View, 1> views{View{obs.pose, obs.image}};
    VoxelGrid out(current.resolution, current.bounds);

    if (cfg.mode == "noisy" || cfg.mode == "both") {
        auto pg = photometric_grad(current, views, intr, quad, act);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] += -cfg.lambda_noisy * pg[i];
    }
    if (cfg.mode == "denoised" || cfg.mode == "both") {
        if (ctx == nullptr || ctx->model == nullptr || ctx->schedules == nullptr ||
            ctx->stats == nullptr)
            throw std::invalid_argument("guidance: denoised mode needs a denoiser context");
        std::size_t vox = current.voxel_count();
        auto field = grid_to_field(current);
        normalize_field(field, vox, *ctx->stats);

        nn::Tape tape;
        int r = current.resolution;
        nn::Node* v = tape.leaf(nn::Shape{1, 4, r, r, r}, field, cfg.backprop_denoiser);
        std::array<int, 1> steps{ctx->step};
        nn::Node* estimate = ctx->model->predict(tape, v, steps);

        auto est_field = estimate->value;
        denormalize_field(est_field, vox, *ctx->stats);
        VoxelGrid est_grid = field_to_grid(est_field, r, current.bounds);
        auto pg = photometric_grad(est_grid, views, intr, quad, act);

        if (!cfg.backprop_denoiser) {
            // Straight-through: the denoiser Jacobian is taken as identity,
            // so the raw-space gradient at the estimate is used directly.
            for (std::size_t i = 0; i < out.data.size(); ++i)
                out.data[i] += -cfg.lambda_denoised * pg[i];
        } else {
            std::vector<double> seed(field.size());
            for (std::size_t vi = 0; vi < vox; ++vi)
                for (int c = 0; c < 4; ++c)
                    seed[static_cast<std::size_t>(c) * vox + vi] =
                        pg[vi * 4 + static_cast<std::size_t>(c)] * group_scale(*ctx->stats, c);
            tape.backward_from(estimate, seed);
            for (std::size_t vi = 0; vi < vox; ++vi)
                for (int c = 0; c < 4; ++c)
                    out.data[vi * 4 + static_cast<std::size_t>(c)] +=
                        -cfg.lambda_denoised * v->grad[static_cast<std::size_t>(c) * vox + vi] /
                        group_scale(*ctx->stats, c);
        }
    }
    return out;
}

namespace {

VoxelGrid sample_core(Denoiser& model, const ChannelSchedules& sched, const GroupStats& stats,
                      int resolution, const SamplerConfig& sampler, const GuidanceConfig* guidance,
                      const Observation* obs, const Intrinsics* intr,
                      const QuadratureConfig* quad, const ActivationParams* act) {
    if (resolution < 1) throw std::invalid_argument("sampler: bad resolution");
    std::size_t vox = voxels_of(resolution);
    std::vector<double> state(4 * vox);
    Rng init(derive_seed(sampler.seed, kSampleInitStream));
    for (double& v : state) v = init.normal();

    auto emit_state = [&](std::vector<double> copy) {
        denormalize_field(copy, vox, stats);
        return field_to_grid(copy, resolution, sampler.bounds);
    };

    for (int i = sched.steps(); i >= 1; --i) {
        std::array<int, 1> steps{i};
        std::vector<double> estimate;
        {
            nn::Tape tape;
            nn::Node* v = tape.leaf(nn::Shape{1, 4, resolution, resolution, resolution}, state);
            estimate = model.predict(tape, v, steps)->value;
        }
        Rng step_rng(derive_seed(sampler.seed, kSampleStepStream, static_cast<std::uint64_t>(i)));
        posterior_step(state, estimate, resolution, i, sched,
                       sampler.deterministic_mean ? nullptr : &step_rng);

        if (guidance != nullptr && guidance->inner_steps > 0) {
            DenoiserContext ctx{&model, i - 1, &sched, &stats};
            for (int k = 0; k < guidance->inner_steps; ++k) {
                VoxelGrid cur = emit_state(state);
                VoxelGrid g = guidance_grad(cur, *obs, *intr, *quad, *act, *guidance, &ctx);
                for (std::size_t vi = 0; vi < vox; ++vi)
                    for (int c = 0; c < 4; ++c)
                        state[static_cast<std::size_t>(c) * vox + vi] +=
                            guidance->step_size *
                            g.data[vi * 4 + static_cast<std::size_t>(c)] *
                            group_scale(stats, c);
            }
        }
        for (double v : state)
            if (!std::isfinite(v))
                throw std::runtime_error("sampling diverged at step " + std::to_string(i));
        if (sampler.log_states != nullptr) sampler.log_states->push_back(emit_state(state));
    }
    return emit_state(state);
}

}  // namespace

VoxelGrid ancestral_sample(Denoiser& model, const ChannelSchedules& sched,
                           const GroupStats& stats, int resolution,
                           const SamplerConfig& sampler) {
    return sample_core(model, sched, stats, resolution, sampler, nullptr, nullptr, nullptr,
                       nullptr, nullptr);
}

VoxelGrid guided_sample(Denoiser& model, const ChannelSchedules& sched, const GroupStats& stats,
                        int resolution, const SamplerConfig& sampler,
                        const GuidanceConfig& guidance, const Observation& obs,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act) {
    guidance.validate();
    return sample_core(model, sched, stats, resolution, sampler, &guidance, &obs, &intr, &quad,
                       &act);
}

}  // namespace voxdiff::diffusion
