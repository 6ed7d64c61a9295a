#include "voxdiff/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "voxdiff/rng.hpp"
#include "voxdiff/threading.hpp"

namespace voxdiff {

namespace {

struct SampleRecord {
    InterpStencil st;
    double sigma;
    double alpha;
    double t_in;  // transmittance entering this sample
    std::array<double, 3> c;
};

// Shared forward march. Appends one record per sample when `records` is
// non-null, composites into rgb, and returns the final transmittance.
double march_ray(const VoxelGrid& grid, const Ray& ray, const QuadratureConfig& quad,
                 const ActivationParams& act, std::uint64_t ray_id,
                 std::array<double, 3>& rgb, std::vector<SampleRecord>* records,
                 std::vector<double>* weights) {
    rgb = {0.0, 0.0, 0.0};
    if (!ray.hits_bounds) {
        rgb = quad.background;
        return 1.0;
    }
    const int n = quad.n_samples;
    const double delta = (ray.t_far - ray.t_near) / n;
    Rng jitter_rng(derive_seed(quad.seed, ray_id));

    double transmittance = 1.0;
    for (int i = 0; i < n; ++i) {
        const double jitter = quad.stratified ? jitter_rng.uniform() : 0.5;
        const double t = ray.t_near + (i + jitter) * delta;
        const std::array<double, 3> p{ray.origin[0] + t * ray.direction[0],
                                      ray.origin[1] + t * ray.direction[1],
                                      ray.origin[2] + t * ray.direction[2]};
        const InterpStencil st = interp_stencil(grid, p);
        double f0 = 0.0, f1 = 0.0, f2 = 0.0, f3 = 0.0;
        for (int k = 0; k < 8; ++k) {
            const double w = st.weight[k];
            const double* f = grid.data.data() + st.base[k];
            f0 += w * f[0];
            f1 += w * f[1];
            f2 += w * f[2];
            f3 += w * f[3];
        }
        const double sigma = std::exp(act.alpha * f0 + act.beta);
        const double survival = std::exp(-sigma * delta);
        const double alpha = 1.0 - survival;
        const std::array<double, 3> c{sigmoid(f1), sigmoid(f2), sigmoid(f3)};

        const double w = transmittance * alpha;
        rgb[0] += w * c[0];
        rgb[1] += w * c[1];
        rgb[2] += w * c[2];
        if (weights) weights->push_back(w);
        if (records) records->push_back({st, sigma, alpha, transmittance, c});
        transmittance *= survival;
    }
    rgb[0] += transmittance * quad.background[0];
    rgb[1] += transmittance * quad.background[1];
    rgb[2] += transmittance * quad.background[2];
    return transmittance;
}

// Reverse sweep for one ray: scatters dL/d(raw grid values) given the
// upstream rgb gradient g. R_next tracks the expected color contributed after
// the current sample per unit of entering transmittance, which gives
// d rgb / d alpha_i = T_i * (c_i - R_{i+1}) without dividing by survival.
void backprop_ray(const VoxelGrid& grid, const QuadratureConfig& quad,
                  const ActivationParams& act, const std::vector<SampleRecord>& records,
                  double delta, const std::array<double, 3>& g, std::vector<double>& grad) {
    std::array<double, 3> r_next = quad.background;
    for (int i = static_cast<int>(records.size()) - 1; i >= 0; --i) {
        const SampleRecord& rec = records[i];
        const double dalpha = rec.t_in * (g[0] * (rec.c[0] - r_next[0]) +
                                          g[1] * (rec.c[1] - r_next[1]) +
                                          g[2] * (rec.c[2] - r_next[2]));
        const double survival = 1.0 - rec.alpha;
        double m = survival * rec.sigma;  // d alpha / d sigma / delta
        if (!std::isfinite(m)) m = 0.0;   // opaque saturation: exact limit is 0
        const double dv0 = dalpha * delta * m * act.alpha;

        const double w = rec.t_in * rec.alpha;
        std::array<double, 3> dvc;
        for (int ch = 0; ch < 3; ++ch)
            dvc[ch] = w * g[ch] * rec.c[ch] * (1.0 - rec.c[ch]);

        for (int k = 0; k < 8; ++k) {
            const double sw = rec.st.weight[k];
            double* gp = grad.data() + rec.st.base[k];
            gp[0] += sw * dv0;
            gp[1] += sw * dvc[0];
            gp[2] += sw * dvc[1];
            gp[3] += sw * dvc[2];
        }
        for (int ch = 0; ch < 3; ++ch)
            r_next[ch] = rec.alpha * rec.c[ch] + survival * r_next[ch];
    }
}

void check_views(std::span<const View> views, const Intrinsics& intr) {
    for (const View& v : views) {
        if (v.image.width != intr.width || v.image.height != intr.height)
            throw std::invalid_argument("photometric: view image does not match intrinsics");
    }
}

}  // namespace

QuadratureConfig default_quadrature(int resolution) {
    QuadratureConfig quad;
    quad.n_samples = std::max(2, 2 * resolution);
    return quad;
}

RaySample render_ray(const VoxelGrid& grid, const Ray& ray, const QuadratureConfig& quad,
                     const ActivationParams& act, std::uint64_t ray_id) {
    if (quad.n_samples < 2) throw std::invalid_argument("render_ray: n_samples must be >= 2");
    RaySample out;
    out.end_transmittance = march_ray(grid, ray, quad, act, ray_id, out.rgb, nullptr,
                                      &out.weights);
    return out;
}

Image render_image(const VoxelGrid& grid, const CameraPose& pose, const Intrinsics& intr,
                   const QuadratureConfig& quad, const ActivationParams& act, int jobs) {
    intr.validate();
    Image img(intr.width, intr.height);
    parallel_for(static_cast<std::size_t>(intr.height), jobs, [&](std::size_t py) {
        for (int px = 0; px < intr.width; ++px) {
            const Ray ray = generate_ray(pose, intr, px, static_cast<int>(py), grid.bounds);
            std::array<double, 3> rgb;
            march_ray(grid, ray, quad, act, static_cast<std::uint64_t>(py) * intr.width + px,
                      rgb, nullptr, nullptr);
            for (int c = 0; c < 3; ++c)
                img.at(px, static_cast<int>(py), c) = std::clamp(rgb[c], 0.0, 1.0);
        }
    });
    return img;
}

double photometric_eval(const VoxelGrid& grid, std::span<const View> views,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act, std::span<const PixelRay> rays,
                        std::vector<double>* grad_out) {
    check_views(views, intr);
    if (rays.empty()) throw std::invalid_argument("photometric_eval: empty ray set");
    if (grad_out) grad_out->assign(grid.value_count(), 0.0);

    const double inv_n = 1.0 / static_cast<double>(rays.size());
    std::vector<SampleRecord> records;
    records.reserve(quad.n_samples);
    double loss = 0.0;
    for (const PixelRay& pr : rays) {
        const View& view = views[pr.view];
        const Ray ray = generate_ray(view.pose, intr, pr.px, pr.py, grid.bounds);
        const std::uint64_t ray_id =
            (static_cast<std::uint64_t>(pr.view) * intr.height + pr.py) * intr.width + pr.px;
        records.clear();
        std::array<double, 3> rgb;
        march_ray(grid, ray, quad, act, ray_id, rgb, grad_out ? &records : nullptr, nullptr);

        std::array<double, 3> resid;
        for (int c = 0; c < 3; ++c) resid[c] = rgb[c] - view.image.at(pr.px, pr.py, c);
        loss += resid[0] * resid[0] + resid[1] * resid[1] + resid[2] * resid[2];

        if (grad_out && ray.hits_bounds) {
            const std::array<double, 3> g{2.0 * resid[0] * inv_n, 2.0 * resid[1] * inv_n,
                                          2.0 * resid[2] * inv_n};
            const double delta = (ray.t_far - ray.t_near) / quad.n_samples;
            backprop_ray(grid, quad, act, records, delta, g, *grad_out);
        }
    }
    return loss * inv_n;
}

std::vector<PixelRay> all_pixel_rays(std::span<const View> views, const Intrinsics& intr) {
    std::vector<PixelRay> rays;
    rays.reserve(views.size() * intr.width * intr.height);
    for (int v = 0; v < static_cast<int>(views.size()); ++v) {
        for (int py = 0; py < intr.height; ++py) {
            for (int px = 0; px < intr.width; ++px) rays.push_back({v, px, py});
        }
    }
    return rays;
}

double photometric_loss(const VoxelGrid& grid, std::span<const View> views,
                        const Intrinsics& intr, const QuadratureConfig& quad,
                        const ActivationParams& act) {
    const auto rays = all_pixel_rays(views, intr);
    return photometric_eval(grid, views, intr, quad, act, rays, nullptr);
}

std::vector<double> photometric_grad(const VoxelGrid& grid, std::span<const View> views,
                                     const Intrinsics& intr, const QuadratureConfig& quad,
                                     const ActivationParams& act) {
    const auto rays = all_pixel_rays(views, intr);
    std::vector<double> grad;
    photometric_eval(grid, views, intr, quad, act, rays, &grad);
    return grad;
}

double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("psnr: image dimensions differ");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = a.rgb[i] - b.rgb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::vector<double> visibility_weights(const VoxelGrid& grid,
                                       std::span<const CameraPose> poses, const Intrinsics& intr,
                                       const QuadratureConfig& quad,
                                       const ActivationParams& act) {
    if (poses.empty()) throw std::invalid_argument("visibility_weights: need at least one pose");
    std::vector<double> vis(grid.voxel_count(), 0.0);
    const int r = grid.resolution;
    const auto h = grid.cell_size();
    for (const CameraPose& pose : poses) {
        for (int py = 0; py < intr.height; ++py) {
            for (int px = 0; px < intr.width; ++px) {
                const Ray ray = generate_ray(pose, intr, px, py, grid.bounds);
                if (!ray.hits_bounds) continue;
                const double delta = (ray.t_far - ray.t_near) / quad.n_samples;
                double transmittance = 1.0;
                for (int i = 0; i < quad.n_samples; ++i) {
                    const double t = ray.t_near + (i + 0.5) * delta;
                    std::array<double, 3> p;
                    int cell[3];
                    for (int a = 0; a < 3; ++a) {
                        p[a] = ray.origin[a] + t * ray.direction[a];
                        cell[a] = std::clamp(
                            static_cast<int>(std::floor((p[a] - grid.bounds.min[a]) / h[a])), 0,
                            r - 1);
                    }
                    const std::array<double, 4> f = trilinear_interp(grid, p);
                    const double sigma = density_from_raw(f[0], act);
                    const double survival = std::exp(-sigma * delta);
                    const double w = transmittance * (1.0 - survival);
                    double& slot = vis[grid.voxel_index(cell[0], cell[1], cell[2])];
                    slot = std::max(slot, w);
                    transmittance *= survival;
                }
            }
        }
    }
    return vis;
}

}  // namespace voxdiff
