#include "voxdiff/camera.hpp"

#include <cmath>

#include "doctest.h"

using namespace voxdiff;

namespace {

double norm3(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 rotate_back(const CameraPose& pose, const Vec3& world) {
    // camera-to-world transpose applied to a world-frame vector
    Vec3 out{};
    for (int c = 0; c < 3; ++c)
        out[c] = pose.rotation[0 * 3 + c] * world[0] + pose.rotation[1 * 3 + c] * world[1] +
                 pose.rotation[2 * 3 + c] * world[2];
    return out;
}

}  // namespace

TEST_SUITE("camera") {

TEST_CASE("spherical pose sampling is deterministic") {
    const auto a = sample_spherical_poses(1, 4.0, 1234);
    const auto b = sample_spherical_poses(1, 4.0, 1234);
    REQUIRE(a.size() == 1);
    for (int i = 0; i < 9; ++i) CHECK(a[0].rotation[i] == b[0].rotation[i]);
    for (int i = 0; i < 3; ++i) CHECK(a[0].position[i] == b[0].position[i]);
}

TEST_CASE("sampled poses sit on the sphere and look at the origin") {
    const auto poses = sample_spherical_poses(64, 4.0, 7);
    REQUIRE(poses.size() == 64);
    for (const CameraPose& p : poses) {
        CHECK(norm3(p.position) == doctest::Approx(4.0).epsilon(1e-9));
        p.validate();
        const Vec3 f = p.forward();
        for (int i = 0; i < 3; ++i)
            CHECK(f[i] == doctest::Approx(-p.position[i] / 4.0).epsilon(1e-9));
    }
}

TEST_CASE("different seeds move the poses") {
    const auto a = sample_spherical_poses(4, 4.0, 1);
    const auto b = sample_spherical_poses(4, 4.0, 2);
    double max_diff = 0.0;
    for (int i = 0; i < 3; ++i) max_diff = std::max(max_diff, std::abs(a[0].position[i] - b[0].position[i]));
    CHECK(max_diff > 1e-3);
}

TEST_CASE("look-at handles positions on the vertical axis") {
    const CameraPose p = look_at({0.0, 0.0, 4.0}, {0.0, 0.0, 0.0});
    p.validate();
    const Vec3 f = p.forward();
    CHECK(f[2] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("spiral poses cover the sphere top to bottom") {
    const auto poses = spiral_poses(32, 4.0);
    REQUIRE(poses.size() == 32);
    for (const CameraPose& p : poses) {
        CHECK(norm3(p.position) == doctest::Approx(4.0).epsilon(1e-9));
        p.validate();
    }
    CHECK(poses.front().position[2] > 3.0);
    CHECK(poses.back().position[2] < -3.0);
}

TEST_CASE("square intrinsics center the principal point") {
    const Intrinsics intr = Intrinsics::square(64);
    CHECK(intr.width == 64);
    CHECK(intr.height == 64);
    CHECK(intr.cx == doctest::Approx(32.0));
    CHECK(intr.cy == doctest::Approx(32.0));
    CHECK(intr.focal == doctest::Approx(1.4 * 64.0));
    intr.validate();
}

TEST_CASE("ray through the principal point follows the camera forward axis") {
    const auto poses = sample_spherical_poses(8, 4.0, 11);
    Intrinsics intr = Intrinsics::square(9);
    intr.cx = 4.5;
    intr.cy = 4.5;
    for (const CameraPose& p : poses) {
        const Ray r = generate_ray(p, intr, 4, 4);
        const Vec3 f = p.forward();
        for (int i = 0; i < 3; ++i) CHECK(r.direction[i] == doctest::Approx(f[i]).epsilon(1e-9));
    }
}

TEST_CASE("generated directions are unit length") {
    const auto poses = sample_spherical_poses(3, 4.0, 13);
    const Intrinsics intr = Intrinsics::square(16);
    for (const CameraPose& p : poses)
        for (int py = 0; py < 16; py += 5)
            for (int px = 0; px < 16; px += 5) {
                const Ray r = generate_ray(p, intr, px, py);
                CHECK(norm3(r.direction) == doctest::Approx(1.0).epsilon(1e-9));
            }
}

TEST_CASE("pixels mirrored about the principal point mirror the camera-frame direction") {
    const CameraPose pose = sample_spherical_poses(1, 4.0, 17)[0];
    Intrinsics intr = Intrinsics::square(10);
    const Ray a = generate_ray(pose, intr, 2, 3);
    const Ray b = generate_ray(pose, intr, 7, 6);  // (w-1-px, h-1-py) mirrors pixel centers
    const Vec3 ca = rotate_back(pose, a.direction);
    const Vec3 cb = rotate_back(pose, b.direction);
    CHECK(ca[0] == doctest::Approx(-cb[0]).epsilon(1e-9));
    CHECK(ca[1] == doctest::Approx(-cb[1]).epsilon(1e-9));
    CHECK(ca[2] == doctest::Approx(cb[2]).epsilon(1e-9));
}

TEST_CASE("pixel indices outside the image are rejected") {
    const CameraPose pose = sample_spherical_poses(1, 4.0, 19)[0];
    const Intrinsics intr = Intrinsics::square(8);
    CHECK_THROWS_AS(generate_ray(pose, intr, 8, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_ray(pose, intr, 0, -1), std::invalid_argument);
}

TEST_CASE("rays are clipped to the grid bounds") {
    const CameraPose pose = look_at({4.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
    Intrinsics intr = Intrinsics::square(9);
    intr.cx = 4.5;
    intr.cy = 4.5;
    const Bounds bounds{};
    const Ray center = generate_ray(pose, intr, 4, 4, bounds);
    CHECK(center.hits_bounds);
    CHECK(center.t_near == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(center.t_far == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("rays that miss the bounds are flagged degenerate") {
    CameraPose pose = look_at({4.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
    // flip forward away from the cube while keeping the frame orthonormal
    for (int i = 0; i < 3; ++i) {
        pose.rotation[i * 3 + 0] = -pose.rotation[i * 3 + 0];
        pose.rotation[i * 3 + 2] = -pose.rotation[i * 3 + 2];
    }
    pose.validate();
    Intrinsics intr = Intrinsics::square(9);
    const Ray r = generate_ray(pose, intr, 4, 4, Bounds{});
    CHECK_FALSE(r.hits_bounds);
}

TEST_CASE("pose sampling rejects empty or degenerate requests") {
    CHECK_THROWS_AS(sample_spherical_poses(0, 4.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(sample_spherical_poses(1, 0.0, 1), std::invalid_argument);
}

}  // TEST_SUITE
