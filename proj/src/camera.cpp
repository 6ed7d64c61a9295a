#include "voxdiff/camera.hpp"

#include <cmath>
#include <stdexcept>

#include "voxdiff/rng.hpp"

namespace voxdiff {

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw std::invalid_argument("normalized: zero vector");
    return {a[0] / n, a[1] / n, a[2] / n};
}

}  // namespace

void CameraPose::validate() const {
    const Vec3 cols[3] = {right(), down(), forward()};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double expect = (i == j) ? 1.0 : 0.0;
            if (std::abs(dot(cols[i], cols[j]) - expect) > 1e-9)
                throw std::invalid_argument("CameraPose: rotation is not orthonormal");
        }
    }
    const Vec3 rxd = cross(cols[0], cols[1]);
    if (std::abs(rxd[0] - cols[2][0]) > 1e-9 || std::abs(rxd[1] - cols[2][1]) > 1e-9 ||
        std::abs(rxd[2] - cols[2][2]) > 1e-9)
        throw std::invalid_argument("CameraPose: rotation determinant is not +1");
}

Intrinsics Intrinsics::square(int size, double focal_factor) {
    Intrinsics intr;
    intr.width = size;
    intr.height = size;
    intr.focal = focal_factor * size;
    intr.cx = 0.5 * size;
    intr.cy = 0.5 * size;
    return intr;
}

void Intrinsics::validate() const {
    if (width < 1 || height < 1) throw std::invalid_argument("Intrinsics: size must be >= 1");
    if (!(focal > 0.0)) throw std::invalid_argument("Intrinsics: focal must be > 0");
}

CameraPose look_at(const Vec3& position, const Vec3& target) {
    const Vec3 f = normalized({target[0] - position[0], target[1] - position[1],
                               target[2] - position[2]});
    Vec3 up{0.0, 0.0, 1.0};
    if (std::abs(dot(f, up)) > 0.999) up = {1.0, 0.0, 0.0};
    // down = -up projected off the forward axis
    Vec3 d{-up[0] + dot(up, f) * f[0], -up[1] + dot(up, f) * f[1], -up[2] + dot(up, f) * f[2]};
    d = normalized(d);
    const Vec3 r = cross(d, f);

    CameraPose pose;
    pose.position = position;
    pose.rotation = {r[0], d[0], f[0], r[1], d[1], f[1], r[2], d[2], f[2]};
    return pose;
}

std::vector<CameraPose> sample_spherical_poses(int n, double radius, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_spherical_poses: n must be >= 1");
    if (!(radius > 0.0)) throw std::invalid_argument("sample_spherical_poses: radius must be > 0");
    Rng rng(derive_seed(seed, 0x706f7365));  // "pose" stream
    std::vector<CameraPose> poses;
    poses.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - 2.0 * rng.uniform();
        const double phi = 2.0 * M_PI * rng.uniform();
        const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 p{radius * rxy * std::cos(phi), radius * rxy * std::sin(phi), radius * z};
        poses.push_back(look_at(p, {0.0, 0.0, 0.0}));
    }
    return poses;
}

std::vector<CameraPose> spiral_poses(int n, double radius, double turns) {
    if (n < 1) throw std::invalid_argument("spiral_poses: n must be >= 1");
    if (!(radius > 0.0)) throw std::invalid_argument("spiral_poses: radius must be > 0");
    std::vector<CameraPose> poses;
    poses.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double t = (n == 1) ? 0.5 : static_cast<double>(i) / (n - 1);
        const double z = 0.85 - 1.7 * t;
        const double phi = 2.0 * M_PI * turns * t;
        const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 p{radius * rxy * std::cos(phi), radius * rxy * std::sin(phi), radius * z};
        poses.push_back(look_at(p, {0.0, 0.0, 0.0}));
    }
    return poses;
}

bool intersect_aabb(const Vec3& origin, const Vec3& dir, const Bounds& bounds, double& t0,
                    double& t1) {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir[a] == 0.0) {
            if (origin[a] < bounds.min[a] || origin[a] > bounds.max[a]) return false;
            continue;
        }
        double lo = (bounds.min[a] - origin[a]) / dir[a];
        double hi = (bounds.max[a] - origin[a]) / dir[a];
        if (lo > hi) std::swap(lo, hi);
        t0 = std::max(t0, lo);
        t1 = std::min(t1, hi);
        if (t0 >= t1) return false;
    }
    return true;
}

Ray generate_ray(const CameraPose& pose, const Intrinsics& intr, int px, int py,
                 const Bounds& bounds) {
    if (px < 0 || px >= intr.width || py < 0 || py >= intr.height)
        throw std::invalid_argument("generate_ray: pixel out of range");
    const double u = (px + 0.5 - intr.cx) / intr.focal;
    const double v = (py + 0.5 - intr.cy) / intr.focal;
    const Vec3 dir_cam = normalized({u, v, 1.0});
    const auto& m = pose.rotation;
    const Vec3 dir{m[0] * dir_cam[0] + m[1] * dir_cam[1] + m[2] * dir_cam[2],
                   m[3] * dir_cam[0] + m[4] * dir_cam[1] + m[5] * dir_cam[2],
                   m[6] * dir_cam[0] + m[7] * dir_cam[1] + m[8] * dir_cam[2]};

    Ray ray;
    ray.origin = pose.position;
    ray.direction = dir;
    double t0, t1;
    if (intersect_aabb(ray.origin, dir, bounds, t0, t1)) {
        ray.t_near = t0;
        ray.t_far = t1;
        ray.hits_bounds = true;
    }
    return ray;
}

}  // namespace voxdiff
