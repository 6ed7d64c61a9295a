#include "voxdiff/fit.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <stdexcept>

#include "voxdiff/rng.hpp"

namespace voxdiff {

namespace {

constexpr std::uint64_t kBatchStream = 0x62617463ULL;   // ray minibatch picks
constexpr std::uint64_t kJitterStream = 0x71756164ULL;  // stratified quadrature

void require_finite(double value, const char* term, int iteration) {
    if (!std::isfinite(value))
        throw std::runtime_error("fit diverged at iteration " + std::to_string(iteration) +
                                 ": non-finite " + term + " term");
}

}  // namespace

void FitConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("fit: iterations must be >= 1");
    if (rays_per_step < 1) throw std::invalid_argument("fit: rays_per_step must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("fit: learning rate must be > 0");
    if (lambda_density < 0.0 || lambda_color < 0.0)
        throw std::invalid_argument("fit: loss weights must be >= 0");
    if (!(huber_delta > 0.0)) throw std::invalid_argument("fit: huber delta must be > 0");
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

double density_sparsity_loss(const VoxelGrid& grid, double d_min, double weight,
                             std::vector<double>* grad_accum) {
    const std::size_t n = grid.voxel_count();
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        const double r = grid.data[v * 4] - d_min;
        loss += std::abs(r);
        if (grad_accum && r != 0.0)
            (*grad_accum)[v * 4] += weight * (r > 0.0 ? inv_n : -inv_n);
    }
    return loss * inv_n;
}

double color_constancy_loss(const VoxelGrid& grid, double c_raw, double delta, double weight,
                            std::vector<double>* grad_accum) {
    const std::size_t n = grid.voxel_count() * 3;
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
        for (int ch = 1; ch < 4; ++ch) {
            const double r = grid.data[v * 4 + ch] - c_raw;
            const double a = std::abs(r);
            double dr;
            if (a < delta) {
                loss += 0.5 * r * r;
                dr = r;
            } else {
                loss += delta * (a - 0.5 * delta);
                dr = r > 0.0 ? delta : -delta;
            }
            if (grad_accum) (*grad_accum)[v * 4 + ch] += weight * dr * inv_n;
        }
    }
    return loss * inv_n;
}

FitResult fit_relufield(std::span<const View> train_views, std::span<const View> heldout_views,
                        const Intrinsics& intr, int resolution, const ActivationParams& act,
                        const FitConfig& config) {
    config.validate();
    if (train_views.empty()) throw std::invalid_argument("fit: need at least one training view");

    FitResult result{
        VoxelGrid::filled(resolution, act.d_min,
                          {config.color_target, config.color_target, config.color_target}),
        {}, std::numeric_limits<double>::quiet_NaN()};
    VoxelGrid& grid = result.grid;
    AdamState state(grid.value_count());

    QuadratureConfig quad = default_quadrature(resolution);
    quad.stratified = config.stratified;

    std::vector<PixelRay> rays(config.rays_per_step);
    std::vector<double> grad;
    result.trace.reserve(config.iterations);
    for (int iter = 0; iter < config.iterations; ++iter) {
        Rng batch_rng(derive_seed(config.seed, kBatchStream, iter));
        for (PixelRay& pr : rays) {
            pr.view = static_cast<int>(batch_rng.uniform_int(train_views.size()));
            pr.px = static_cast<int>(batch_rng.uniform_int(intr.width));
            pr.py = static_cast<int>(batch_rng.uniform_int(intr.height));
        }
        quad.seed = derive_seed(config.seed, kJitterStream, iter);

        const double photo = photometric_eval(grid, train_views, intr, quad, act, rays, &grad);
        require_finite(photo, "photometric", iter);
        const double ld = density_sparsity_loss(
            grid, act.d_min, config.lambda_density,
            config.lambda_density > 0.0 ? &grad : nullptr);
        require_finite(ld, "density sparsity", iter);
        const double lc = color_constancy_loss(
            grid, config.color_target, config.huber_delta, config.lambda_color,
            config.lambda_color > 0.0 ? &grad : nullptr);
        require_finite(lc, "color constancy", iter);

        adam_step(grid.data, grad, state, config.learning_rate);
        result.trace.push_back({iter, photo, ld, lc,
                                photo + config.lambda_density * ld + config.lambda_color * lc});
    }

    if (!heldout_views.empty()) {
        QuadratureConfig eval_quad = default_quadrature(resolution);
        double sum = 0.0;
        for (const View& v : heldout_views) {
            const Image rendered = render_image(grid, v.pose, intr, eval_quad, act, config.jobs);
            sum += psnr(rendered, v.image);
        }
        result.heldout_psnr = sum / static_cast<double>(heldout_views.size());
    }
    return result;
}

void write_trace_csv(const std::string& path, std::span<const FitTraceRow> trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write trace: " + path);
    out << "iteration,photometric,density_sparsity,color_constancy,total\n";
    char buf[256];
    for (const FitTraceRow& row : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", row.iteration,
                      row.photometric, row.density_sparsity, row.color_constancy, row.total);
        out << buf;
    }
    if (!out.good()) throw std::runtime_error("trace write failed: " + path);
}

}  // namespace voxdiff
