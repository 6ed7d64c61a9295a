#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "voxdiff/camera.hpp"
#include "voxdiff/image.hpp"
#include "voxdiff/voxgrid.hpp"

namespace voxdiff {

struct QuadratureConfig {
    int n_samples = 64;
    std::array<double, 3> background{1.0, 1.0, 1.0};
    bool stratified = false;
    std::uint64_t seed = 0;  // keys the per-ray jitter stream in stratified mode
};

// Default sample count 2R.
QuadratureConfig default_quadrature(int resolution);

struct RaySample {
    std::vector<double> weights;     // w_i = T_i * alpha_i, one per sample
    double end_transmittance = 1.0;  // T after the last sample
    std::array<double, 3> rgb{0, 0, 0};
};

struct View {
    CameraPose pose;
    Image image;
};

// Quadrature of the volume-rendering integral along one ray. Degenerate rays
// return pure background with end_transmittance 1.
RaySample render_ray(const VoxelGrid& grid, const Ray& ray, const QuadratureConfig& quad,
                     const ActivationParams& act, std::uint64_t ray_id = 0);

Image render_image(const VoxelGrid& grid, const CameraPose& pose, const Intrinsics& intr,
                   const QuadratureConfig& quad, const ActivationParams& act, int jobs = 1);

// A training ray addressed by (view index, pixel).
struct PixelRay {
    int view;
    int px;
    int py;
};

// Mean over the given rays of the squared rgb residual against the view
// images; when grad_out is non-null it receives the exact derivative with
// respect to every raw grid value (layout identical to grid.data, caller need
// not zero it). Loss and gradient share sample positions by construction.
double photometric_eval(const VoxelGrid& grid, std::span<const View> views,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act, std::span<const PixelRay> rays,
                        std::vector<double>* grad_out);

// Mean over every pixel of every view.
double photometric_loss(const VoxelGrid& grid, std::span<const View> views,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act);

std::vector<double> photometric_grad(const VoxelGrid& grid, std::span<const View> views,
                                     const Intrinsics& intr, const QuadratureConfig& quad,
                                     const ActivationParams& act);

// 10*log10(1/mse) on [0,1] images, capped at 99 dB.
double psnr(const Image& a, const Image& b);
inline constexpr double kPsnrCap = 99.0;

// Per-voxel maximum compositing weight over all rays of all poses: ~0 for
// free space and occluded voxels, ~1 for surfaces facing some camera.
std::vector<double> visibility_weights(const VoxelGrid& grid,
                                       std::span<const CameraPose> poses, const Intrinsics& intr,
                                       const QuadratureConfig& quad, const ActivationParams& act);

std::vector<PixelRay> all_pixel_rays(std::span<const View> views, const Intrinsics& intr);

}  // namespace voxdiff
