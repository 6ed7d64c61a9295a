#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxdiff/camera.hpp"
#include "voxdiff/diffusion/model.hpp"
#include "voxdiff/diffusion/schedule.hpp"
#include "voxdiff/image.hpp"
#include "voxdiff/render.hpp"
#include "voxdiff/rng.hpp"

namespace voxdiff::diffusion {

// Forward perturbation in normalized space, per channel group:
// state = alpha_g(i) * clean + sigma_g(i) * eps. `clean` holds one or more
// fields; `steps` gives one index in [0, T] per field.
std::vector<double> perturb(std::span<const double> clean, int resolution,
                            std::span<const int> steps, std::span<const double> eps,
                            const ChannelSchedules& sched);

struct DiffusionLossConfig {
    std::string weight_mode = "simple";  // "simple" (w=1) or "snr"
    // When on, color errors at voxels whose clean raw density exceeds tau get
    // an extra unit of weight, concentrating capacity on solid regions.
    bool visibility_aware = false;
    double visibility_tau = -8.0;

    void validate() const;
    bool operator==(const DiffusionLossConfig&) const = default;
};

void to_json(nlohmann::json& j, const DiffusionLossConfig& c);
void from_json(const nlohmann::json& j, DiffusionLossConfig& c);

// Records perturb + model + weighted squared error on the tape and returns
// the scalar loss node. Density errors are averaged with weight w_d(i) and
// color errors with w_c(i) plus the optional per-voxel visibility boost;
// `clean` is normalized, and the raw-space density used by the indicator is
// recovered through `stats`.
nn::Node* diffusion_loss(nn::Tape& tape, Denoiser& model, std::span<const double> clean,
                         int resolution, std::span<const int> steps, std::span<const double> eps,
                         const ChannelSchedules& sched, const DiffusionLossConfig& cfg,
                         const GroupStats& stats);

// Reverse-transition coefficients at step i for one schedule:
// posterior mean = clean_coeff * x_hat + state_coeff * v_i, plus Gaussian
// noise of the given variance. At i=1 the posterior collapses onto x_hat.
struct PosteriorCoeffs {
    double clean_coeff;
    double state_coeff;
    double variance;
};
PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int i);

// In-place V_i -> V_{i-1} on one or more fields, each channel group under its
// own schedule. rng may be null only when no noise is needed (i == 1 or
// deterministic callers).
void posterior_step(std::span<double> state, std::span<const double> clean_estimate,
                    int resolution, int i, const ChannelSchedules& sched, Rng* rng);

struct Observation {
    CameraPose pose;
    Image image;
};

struct GuidanceConfig {
    int inner_steps = 5;     // guidance updates per outer step
    double step_size = 0.01;
    double lambda_noisy = 1.0;
    double lambda_denoised = 1.0;
    std::string mode = "noisy";  // "noisy", "denoised", or "both"
    // Denoised mode treats the denoiser as the identity when mapping the
    // photometric gradient back to the state; this flag backpropagates
    // through the network instead.
    bool backprop_denoiser = false;

    void validate() const;
    bool operator==(const GuidanceConfig&) const = default;
};

void to_json(nlohmann::json& j, const GuidanceConfig& c);
void from_json(const nlohmann::json& j, GuidanceConfig& c);

// Everything the denoised guidance mode needs to form the clean estimate.
struct DenoiserContext {
    Denoiser* model = nullptr;
    int step = 0;
    const ChannelSchedules* schedules = nullptr;
    const GroupStats* stats = nullptr;
};

// Gradient of the observation log-likelihood surrogate log p(y|V), taken with
// respect to the raw grid values and returned in grid layout. Noisy mode is
// exactly -lambda_noisy times the photometric gradient at V; denoised mode
// evaluates the photometric gradient at the denoiser's clean estimate.
VoxelGrid guidance_grad(const VoxelGrid& current, const Observation& obs, const Intrinsics& intr,
                        const QuadratureConfig& quad, const ActivationParams& act,
                        const GuidanceConfig& cfg, const DenoiserContext* ctx = nullptr);

struct SamplerConfig {
    std::uint64_t seed = 0;
    // Replace every posterior draw with its mean.
    bool deterministic_mean = false;
    Bounds bounds{};
    // When set, receives the denormalized state after every outer step.
    std::vector<VoxelGrid>* log_states = nullptr;
};

// Plain ancestral generation: V_T ~ N(0,I) in normalized space, T posterior
// steps, denormalize.
VoxelGrid ancestral_sample(Denoiser& model, const ChannelSchedules& sched,
                           const GroupStats& stats, int resolution, const SamplerConfig& sampler);

// Ancestral generation with inner_steps gradient ascents on log p(y|V) after
// each posterior step. inner_steps = 0 reproduces ancestral_sample bit for
// bit under the same seed.
VoxelGrid guided_sample(Denoiser& model, const ChannelSchedules& sched, const GroupStats& stats,
                        int resolution, const SamplerConfig& sampler,
                        const GuidanceConfig& guidance, const Observation& obs,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act);

}  // namespace voxdiff::diffusion
