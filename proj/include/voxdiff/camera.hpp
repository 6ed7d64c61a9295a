#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxdiff/voxgrid.hpp"

namespace voxdiff {

using Vec3 = std::array<double, 3>;

// Camera-to-world rotation, row-major. Camera frame convention: column 0 is
// right (+x image), column 1 is down (+y image), column 2 is the viewing
// direction (+z forward).
struct CameraPose {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 position{0, 0, 0};

    Vec3 right() const { return {rotation[0], rotation[3], rotation[6]}; }
    Vec3 down() const { return {rotation[1], rotation[4], rotation[7]}; }
    Vec3 forward() const { return {rotation[2], rotation[5], rotation[8]}; }

    // Throws std::invalid_argument unless the rotation is orthonormal with
    // det +1 (tolerance 1e-9).
    void validate() const;
};

struct Intrinsics {
    int width = 64;
    int height = 64;
    double focal = 89.6;
    double cx = 32.0;
    double cy = 32.0;

    // Default focal 1.4 * height frames the [-1,1]^3 cube at roughly 70% of
    // the image height from the default radius-4 camera sphere.
    static Intrinsics square(int size, double focal_factor = 1.4);

    void validate() const;
};

struct Ray {
    Vec3 origin{0, 0, 0};
    Vec3 direction{0, 0, 1};  // unit
    double t_near = 0.0;
    double t_far = 0.0;
    bool hits_bounds = false;  // false marks a degenerate ray (missed the grid)
};

// Deterministic look-at pose: forward points from `position` to `target`,
// image-down is anti-aligned with world +z (fallback +x near the poles).
CameraPose look_at(const Vec3& position, const Vec3& target);

// n poses at uniformly random points of the radius sphere, all looking at the
// origin. Pure function of (n, radius, seed).
std::vector<CameraPose> sample_spherical_poses(int n, double radius, std::uint64_t seed);

// Archimedean spiral over the sphere (z sweeps top to bottom over `turns`
// revolutions), looking at the origin. Deterministic test trajectory.
std::vector<CameraPose> spiral_poses(int n, double radius, double turns = 2.0);

// Ray through the center of pixel (px, py), clipped against `bounds`.
Ray generate_ray(const CameraPose& pose, const Intrinsics& intr, int px, int py,
                 const Bounds& bounds = {});

// Intersection of o + t*d with an axis-aligned box, restricted to t >= 0.
// Returns false when empty.
bool intersect_aabb(const Vec3& origin, const Vec3& dir, const Bounds& bounds, double& t0,
                    double& t1);

}  // namespace voxdiff
