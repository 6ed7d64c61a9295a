#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxdiff/render.hpp"
#include "voxdiff/voxgrid.hpp"

namespace voxdiff {

struct FitConfig {
    int iterations = 2000;
    int rays_per_step = 4096;
    double learning_rate = 0.05;
    double lambda_density = 1e-4;  // sparsity pull toward d_min
    double lambda_color = 1e-4;    // constancy pull toward raw white
    double huber_delta = 1.0;
    double color_target = 4.59511985013459;  // logit(0.99)
    std::uint64_t seed = 0;
    bool stratified = true;
    int jobs = 1;

    void validate() const;
};

struct AdamState {
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected Adam update, in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr);

// Mean |raw density - d_min| over voxels. With grad_accum, adds
// weight * subgradient (sign / R^3, zero at equality) into channel 0.
double density_sparsity_loss(const VoxelGrid& grid, double d_min, double weight = 1.0,
                             std::vector<double>* grad_accum = nullptr);

// Mean elementwise Huber of (raw color - c_raw) over all color entries. With
// grad_accum, adds weight * exact gradient into channels 1..3.
double color_constancy_loss(const VoxelGrid& grid, double c_raw, double delta,
                            double weight = 1.0, std::vector<double>* grad_accum = nullptr);

struct FitTraceRow {
    int iteration;
    double photometric;
    double density_sparsity;
    double color_constancy;
    double total;
};

struct FitResult {
    VoxelGrid grid;
    std::vector<FitTraceRow> trace;
    double heldout_psnr;  // NaN when no held-out views were given
};

// Stage-1 scene fit: minimize photometric + lambda_d * sparsity +
// lambda_c * constancy with Adam over a fresh grid (raw density d_min, raw
// color c_raw everywhere). Ray minibatches and stratified jitter derive from
// config.seed. Throws std::runtime_error naming the iteration and term if the
// loss goes non-finite.
FitResult fit_relufield(std::span<const View> train_views, std::span<const View> heldout_views,
                        const Intrinsics& intr, int resolution, const ActivationParams& act,
                        const FitConfig& config);

void write_trace_csv(const std::string& path, std::span<const FitTraceRow> trace);

}  // namespace voxdiff
