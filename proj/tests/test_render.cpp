#include "voxdiff/render.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "voxdiff/rng.hpp"

using namespace voxdiff;

namespace {

const ActivationParams kAct;

VoxelGrid soft_random_grid(int r, std::uint64_t seed) {
    VoxelGrid g(r, Bounds{});
    Rng rng(seed);
    for (std::size_t v = 0; v < g.voxel_count(); ++v) {
        g.data[v * 4 + 0] = rng.uniform(-4.0, 1.5);
        for (int c = 1; c < 4; ++c) g.data[v * 4 + c] = rng.uniform(-2.0, 2.0);
    }
    return g;
}

VoxelGrid uniform_grid(int r, double raw_density, std::array<double, 3> color) {
    return VoxelGrid::filled(r, raw_density,
                             {logit(color[0]), logit(color[1]), logit(color[2])});
}

Ray axis_ray(double t_near, double t_far) {
    return Ray{{-4.0, 0.0, 0.0}, {1.0, 0.0, 0.0}, t_near, t_far, true};
}

View make_view(const VoxelGrid& grid, const CameraPose& pose, const Intrinsics& intr,
               const QuadratureConfig& quad) {
    return View{pose, render_image(grid, pose, intr, quad, kAct)};
}

}  // namespace

TEST_SUITE("render") {

TEST_CASE("floor-density grid renders the background") {
    const VoxelGrid g = uniform_grid(8, kAct.d_min, {0.3, 0.3, 0.3});
    QuadratureConfig quad = default_quadrature(8);
    const auto poses = sample_spherical_poses(4, 4.0, 31);
    const Intrinsics intr = Intrinsics::square(8);
    for (const CameraPose& pose : poses)
        for (int px = 0; px < 8; px += 3) {
            const Ray ray = generate_ray(pose, intr, px, px, g.bounds);
            const RaySample s = render_ray(g, ray, quad, kAct);
            CHECK(s.end_transmittance >= 0.999);
            for (int c = 0; c < 3; ++c) CHECK(std::abs(s.rgb[c] - 1.0) < 1e-3);
        }
}

TEST_CASE("constant medium matches the exponential closed form") {
    const std::array<double, 3> color{0.8, 0.2, 0.2};
    const VoxelGrid g = uniform_grid(8, std::log(2.0), color);
    QuadratureConfig quad;
    quad.n_samples = 1024;
    const RaySample s = render_ray(g, axis_ray(3.0, 5.0), quad, kAct);
    const double trans = std::exp(-2.0 * 2.0);
    for (int c = 0; c < 3; ++c)
        CHECK(std::abs(s.rgb[c] - ((1.0 - trans) * color[c] + trans)) < 1e-3);
    CHECK(std::abs(s.end_transmittance - trans) < 1e-3);
}

TEST_CASE("constant medium quadrature is exact at any sample count") {
    const VoxelGrid g = uniform_grid(8, std::log(2.0), {0.8, 0.2, 0.2});
    const double trans = std::exp(-4.0);
    for (int n : {8, 64}) {
        QuadratureConfig quad;
        quad.n_samples = n;
        const RaySample s = render_ray(g, axis_ray(3.0, 5.0), quad, kAct);
        CHECK(std::abs(s.end_transmittance - trans) < 1e-12);
    }
}

TEST_CASE("opaque slab saturates to the medium color") {
    const std::array<double, 3> color{0.3, 0.9, 0.5};
    const VoxelGrid g = uniform_grid(8, std::log(1e4), color);
    QuadratureConfig quad;
    quad.n_samples = 64;
    const RaySample s = render_ray(g, axis_ray(3.0, 5.0), quad, kAct);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(s.rgb[c] - color[c]) < 1e-4);
    CHECK(s.end_transmittance < 1e-6);
}

TEST_CASE("degenerate rays return pure background") {
    const VoxelGrid g = soft_random_grid(4, 1);
    QuadratureConfig quad = default_quadrature(4);
    quad.background = {0.2, 0.4, 0.6};
    Ray miss = axis_ray(0.0, 1.0);
    miss.hits_bounds = false;
    const RaySample s = render_ray(g, miss, quad, kAct);
    CHECK(s.end_transmittance == 1.0);
    for (int c = 0; c < 3; ++c) CHECK(s.rgb[c] == doctest::Approx(quad.background[c]));
}

TEST_CASE("ray weights are a probability mass") {
    const VoxelGrid g = soft_random_grid(8, 2);
    QuadratureConfig quad = default_quadrature(8);
    const auto poses = sample_spherical_poses(4, 4.0, 33);
    const Intrinsics intr = Intrinsics::square(8);
    for (const CameraPose& pose : poses)
        for (int py = 0; py < 8; ++py)
            for (int px = 0; px < 8; ++px) {
                const Ray ray = generate_ray(pose, intr, px, py, g.bounds);
                const RaySample s = render_ray(g, ray, quad, kAct);
                double total = s.end_transmittance;
                for (double w : s.weights) {
                    CHECK(w >= 0.0);
                    total += w;
                }
                CHECK(std::abs(total - 1.0) < 1e-6);
            }
}

TEST_CASE("quadrature error decreases with sample count on a density ramp") {
    // raw density rises linearly with the x index, so sigma is exponential in
    // x and the transmittance integral has a closed form on the center span
    VoxelGrid g(8, Bounds{});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int k = 0; k < 8; ++k) {
                const std::size_t base = g.voxel_index(i, j, k) * 4;
                g.data[base + 0] = -6.0 + 1.2 * i;
                for (int c = 1; c < 4; ++c) g.data[base + c] = logit(0.6);
            }
    const double x0 = -0.875, x1 = 0.875;
    const double a = -1.8, b = 4.8;  // raw density = a + b*x on the span
    const double integral = (std::exp(a + b * x1) - std::exp(a + b * x0)) / b;
    const double trans = std::exp(-integral);
    const Ray ray{{x0, 0.0, 0.0}, {1.0, 0.0, 0.0}, 0.0, x1 - x0, true};

    double prev_err = 1e30;
    for (int n : {8, 32, 128, 512}) {
        QuadratureConfig quad;
        quad.n_samples = n;
        const RaySample s = render_ray(g, ray, quad, kAct);
        double err = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double expect = (1.0 - trans) * 0.6 + trans;
            err += (s.rgb[c] - expect) * (s.rgb[c] - expect);
        }
        err = std::sqrt(err);
        CHECK(err < prev_err);
        prev_err = err;
    }
    CHECK(prev_err < 1e-5);
}

TEST_CASE("rendered image has the requested dimensions") {
    const VoxelGrid g = soft_random_grid(4, 3);
    const Intrinsics intr{12, 7, 16.0, 6.0, 3.5};
    const Image img =
        render_image(g, sample_spherical_poses(1, 4.0, 35)[0], intr, default_quadrature(4), kAct);
    CHECK(img.width == 12);
    CHECK(img.height == 7);
}

TEST_CASE("rendering is deterministic including stratified mode") {
    const VoxelGrid g = soft_random_grid(6, 4);
    const CameraPose pose = sample_spherical_poses(1, 4.0, 37)[0];
    const Intrinsics intr = Intrinsics::square(16);
    QuadratureConfig quad = default_quadrature(6);
    quad.stratified = true;
    quad.seed = 912;
    const Image a = render_image(g, pose, intr, quad, kAct, 1);
    const Image b = render_image(g, pose, intr, quad, kAct, 1);
    const Image c = render_image(g, pose, intr, quad, kAct, 4);
    REQUIRE(a.rgb.size() == b.rgb.size());
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        CHECK(a.rgb[i] == b.rgb[i]);
        CHECK(a.rgb[i] == c.rgb[i]);
    }
}

TEST_CASE("self-rendered targets give vanishing loss") {
    const VoxelGrid g = soft_random_grid(6, 5);
    const Intrinsics intr = Intrinsics::square(8);
    const QuadratureConfig quad = default_quadrature(6);
    std::vector<View> views;
    for (const CameraPose& pose : sample_spherical_poses(2, 4.0, 39))
        views.push_back(make_view(g, pose, intr, quad));
    CHECK(photometric_loss(g, views, intr, quad, kAct) < 1e-10);
}

TEST_CASE("single-ray loss equals the squared residual") {
    const VoxelGrid g = soft_random_grid(4, 6);
    Intrinsics intr{1, 1, 2.0, 0.5, 0.5};
    const CameraPose pose = sample_spherical_poses(1, 4.0, 41)[0];
    const QuadratureConfig quad = default_quadrature(4);
    View v = make_view(g, pose, intr, quad);
    v.image.at(0, 0, 0) -= 0.1;
    CHECK(photometric_loss(g, {&v, 1}, intr, quad, kAct) == doctest::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("loss equals brute-force per-ray accumulation") {
    const VoxelGrid g = soft_random_grid(4, 7);
    Intrinsics intr{2, 2, 3.0, 1.0, 1.0};
    const QuadratureConfig quad = default_quadrature(4);
    std::vector<View> views;
    for (const CameraPose& pose : sample_spherical_poses(2, 4.0, 43)) {
        View v = make_view(soft_random_grid(4, 8), pose, intr, quad);
        v.pose = pose;
        views.push_back(v);
    }
    double manual = 0.0;
    int count = 0;
    for (const View& v : views)
        for (int py = 0; py < 2; ++py)
            for (int px = 0; px < 2; ++px) {
                const Ray ray = generate_ray(v.pose, intr, px, py, g.bounds);
                const RaySample s = render_ray(g, ray, quad, kAct);
                for (int c = 0; c < 3; ++c) {
                    const double r = s.rgb[c] - v.image.at(px, py, c);
                    manual += r * r;
                }
                ++count;
            }
    manual /= count;
    CHECK(photometric_loss(g, views, intr, quad, kAct) == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("gradient vanishes at zero residual") {
    const VoxelGrid g = soft_random_grid(4, 9);
    const Intrinsics intr = Intrinsics::square(6);
    const QuadratureConfig quad = default_quadrature(4);
    std::vector<View> views{make_view(g, sample_spherical_poses(1, 4.0, 45)[0], intr, quad)};
    const auto grad = photometric_grad(g, views, intr, quad, kAct);
    double max_abs = 0.0;
    for (double v : grad) max_abs = std::max(max_abs, std::abs(v));
    CHECK(max_abs < 1e-12);
}

static void check_fd(const VoxelGrid& fixed, const std::vector<View>& views,
                     const Intrinsics& intr, const QuadratureConfig& quad) {
    VoxelGrid g = fixed;
    const auto rays = all_pixel_rays(views, intr);
    std::vector<double> grad;
    photometric_eval(g, views, intr, quad, kAct, rays, &grad);

    const double h = 1e-4;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double keep = g.data[i];
        g.data[i] = keep + h;
        const double lp = photometric_eval(g, views, intr, quad, kAct, rays, nullptr);
        g.data[i] = keep - h;
        const double lm = photometric_eval(g, views, intr, quad, kAct, rays, nullptr);
        g.data[i] = keep;
        const double fd = (lp - lm) / (2.0 * h);
        if (std::abs(grad[i]) > 1e-8)
            max_rel = std::max(max_rel, std::abs(fd - grad[i]) / std::max(std::abs(fd), std::abs(grad[i])));
        else
            CHECK(std::abs(fd) < 1e-6);
    }
    CHECK(max_rel <= 1e-5);
}

TEST_CASE("analytic gradient matches central finite differences") {
    const VoxelGrid g = soft_random_grid(4, 10);
    const Intrinsics intr = Intrinsics::square(8);
    const QuadratureConfig quad = default_quadrature(4);
    std::vector<View> views;
    View v = make_view(soft_random_grid(4, 11), sample_spherical_poses(1, 4.0, 47)[0], intr, quad);
    views.push_back(v);
    check_fd(g, views, intr, quad);
}

TEST_CASE("stratified gradients reuse the loss sample positions") {
    const VoxelGrid g = soft_random_grid(4, 12);
    const Intrinsics intr = Intrinsics::square(8);
    QuadratureConfig quad = default_quadrature(4);
    quad.stratified = true;
    quad.seed = 5150;
    std::vector<View> views;
    views.push_back(make_view(soft_random_grid(4, 13), sample_spherical_poses(1, 4.0, 49)[0],
                              intr, quad));
    check_fd(g, views, intr, quad);
}

TEST_CASE("multi-view gradient is the ray-count weighted mean") {
    const VoxelGrid g = soft_random_grid(4, 14);
    const Intrinsics intr = Intrinsics::square(4);
    const QuadratureConfig quad = default_quadrature(4);
    const auto poses = sample_spherical_poses(2, 4.0, 51);
    std::vector<View> views;
    for (const CameraPose& pose : poses)
        views.push_back(make_view(soft_random_grid(4, 15), pose, intr, quad));
    const auto g12 = photometric_grad(g, views, intr, quad, kAct);
    const auto g1 = photometric_grad(g, {views.data(), 1}, intr, quad, kAct);
    const auto g2 = photometric_grad(g, {views.data() + 1, 1}, intr, quad, kAct);
    for (std::size_t i = 0; i < g12.size(); ++i)
        CHECK(g12[i] == doctest::Approx(0.5 * (g1[i] + g2[i])).epsilon(1e-12));
}

TEST_CASE("gradient stays finite through an opaque medium") {
    const VoxelGrid g = uniform_grid(4, 15.0, {0.5, 0.5, 0.5});
    const Intrinsics intr = Intrinsics::square(4);
    const QuadratureConfig quad = default_quadrature(4);
    std::vector<View> views;
    views.push_back(make_view(soft_random_grid(4, 16), sample_spherical_poses(1, 4.0, 53)[0],
                              intr, quad));
    const auto grad = photometric_grad(g, views, intr, quad, kAct);
    for (double v : grad) CHECK(std::isfinite(v));
}

TEST_CASE("psnr closed-form values and symmetry") {
    Image a(4, 4), b(4, 4);
    for (std::size_t i = 0; i < a.rgb.size(); ++i) a.rgb[i] = 0.5;
    b.rgb = a.rgb;
    CHECK(psnr(a, b) == doctest::Approx(99.0));
    for (std::size_t i = 0; i < b.rgb.size(); ++i) b.rgb[i] = 0.6;
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(psnr(a, b) == doctest::Approx(psnr(b, a)).epsilon(1e-12));
    Image c(3, 4);
    CHECK_THROWS_AS(psnr(a, c), std::invalid_argument);
}

TEST_CASE("visibility weights stay near zero for an empty grid") {
    const VoxelGrid g = uniform_grid(8, kAct.d_min, {0.5, 0.5, 0.5});
    const auto poses = sample_spherical_poses(4, 4.0, 55);
    const Intrinsics intr = Intrinsics::square(16);
    const auto vis =
        visibility_weights(g, poses, intr, default_quadrature(8), kAct);
    for (double v : vis) {
        CHECK(v >= 0.0);
        CHECK(v <= 1e-3);
    }
}

TEST_CASE("solid cube hides interior voxels from every camera") {
    const VoxelGrid g = uniform_grid(8, 2.0, {0.7, 0.7, 0.7});
    std::vector<CameraPose> poses;
    for (int axis = 0; axis < 3; ++axis)
        for (double s : {4.0, -4.0}) {
            Vec3 p{0.0, 0.0, 0.0};
            p[axis] = s;
            poses.push_back(look_at(p, {0.0, 0.0, 0.0}));
        }
    const Intrinsics intr = Intrinsics::square(32);
    const auto vis = visibility_weights(g, poses, intr, default_quadrature(8), kAct);
    for (double v : vis) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    double max_interior = 0.0;
    for (int i = 2; i <= 5; ++i)
        for (int j = 2; j <= 5; ++j)
            for (int k = 2; k <= 5; ++k)
                max_interior = std::max(max_interior, vis[g.voxel_index(i, j, k)]);
    CHECK(max_interior < 0.05);
    CHECK(vis[g.voxel_index(0, 3, 4)] > 0.5);
    CHECK(vis[g.voxel_index(7, 4, 3)] > 0.5);
    CHECK(vis[g.voxel_index(3, 0, 4)] > 0.5);
    CHECK(vis[g.voxel_index(4, 7, 3)] > 0.5);
    CHECK(vis[g.voxel_index(3, 4, 0)] > 0.5);
    CHECK(vis[g.voxel_index(4, 3, 7)] > 0.5);
}

TEST_CASE("mismatched view images are rejected") {
    const VoxelGrid g = soft_random_grid(4, 17);
    const Intrinsics intr = Intrinsics::square(8);
    const QuadratureConfig quad = default_quadrature(4);
    View v{sample_spherical_poses(1, 4.0, 57)[0], Image(4, 4)};
    std::vector<View> views{v};
    CHECK_THROWS_AS(photometric_loss(g, views, intr, quad, kAct), std::invalid_argument);
}

}  // TEST_SUITE
