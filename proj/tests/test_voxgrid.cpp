#include "voxdiff/voxgrid.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "voxdiff/rng.hpp"

using namespace voxdiff;
namespace fs = std::filesystem;

namespace {

VoxelGrid random_grid(int r, std::uint64_t seed) {
    VoxelGrid g(r, Bounds{});
    Rng rng(seed);
    for (double& v : g.data) v = rng.uniform(-5.0, 5.0);
    return g;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("voxdiff_test_" + std::to_string(Rng(std::random_device{}()).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
};

}  // namespace

TEST_SUITE("voxgrid") {

TEST_CASE("interpolation at a voxel center returns the stored feature") {
    VoxelGrid g = random_grid(5, 1);
    for (int i : {0, 2, 4})
        for (int j : {1, 3})
            for (int k : {0, 4}) {
                const auto c = g.voxel_center(i, j, k);
                const auto f = trilinear_interp(g, c);
                const std::size_t base = g.voxel_index(i, j, k) * VoxelGrid::kChannels;
                for (int ch = 0; ch < 4; ++ch)
                    CHECK(f[ch] == doctest::Approx(g.data[base + ch]).epsilon(1e-12));
            }
}

TEST_CASE("midpoint of adjacent centers averages the two features") {
    VoxelGrid g = random_grid(4, 2);
    const auto a = g.voxel_center(1, 2, 0);
    const auto b = g.voxel_center(2, 2, 0);
    const std::array<double, 3> mid{(a[0] + b[0]) / 2, a[1], a[2]};
    const auto f = trilinear_interp(g, mid);
    const std::size_t ia = g.voxel_index(1, 2, 0) * 4;
    const std::size_t ib = g.voxel_index(2, 2, 0) * 4;
    for (int ch = 0; ch < 4; ++ch)
        CHECK(f[ch] == doctest::Approx(0.5 * (g.data[ia + ch] + g.data[ib + ch])).epsilon(1e-12));
}

TEST_CASE("queries far outside bounds clamp to the nearest boundary center") {
    VoxelGrid g = random_grid(4, 3);
    const auto f = trilinear_interp(g, {100.0, -50.0, 7.0});
    const auto ref = trilinear_interp(g, g.voxel_center(3, 0, 3));
    const std::array<double, 3> inside{g.voxel_center(3, 0, 3)[0], g.voxel_center(3, 0, 3)[1],
                                       7.0};
    const auto fz = trilinear_interp(g, inside);
    for (int ch = 0; ch < 4; ++ch) {
        CHECK(f[ch] == doctest::Approx(ref[ch]).epsilon(1e-12));
        CHECK(f[ch] == doctest::Approx(fz[ch]).epsilon(1e-12));
    }
}

TEST_CASE("interpolation is linear between adjacent voxel centers") {
    VoxelGrid g = random_grid(6, 4);
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const int axis = static_cast<int>(rng.uniform_int(3));
        int idx[3] = {static_cast<int>(rng.uniform_int(6)), static_cast<int>(rng.uniform_int(6)),
                      static_cast<int>(rng.uniform_int(6))};
        if (idx[axis] == 5) idx[axis] = 4;
        int nxt[3] = {idx[0], idx[1], idx[2]};
        ++nxt[axis];
        const auto pa = g.voxel_center(idx[0], idx[1], idx[2]);
        const auto pb = g.voxel_center(nxt[0], nxt[1], nxt[2]);
        const auto fa = trilinear_interp(g, pa);
        const auto fb = trilinear_interp(g, pb);
        const double f = rng.uniform();
        std::array<double, 3> p;
        for (int a = 0; a < 3; ++a) p[a] = (1 - f) * pa[a] + f * pb[a];
        const auto fm = trilinear_interp(g, p);
        for (int ch = 0; ch < 4; ++ch) {
            const double expect = (1 - f) * fa[ch] + f * fb[ch];
            CHECK(fm[ch] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("non-finite query point is rejected") {
    VoxelGrid g = random_grid(2, 5);
    CHECK_THROWS_AS(trilinear_interp(g, {std::nan(""), 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("density activation closed-form values") {
    const ActivationParams act;
    CHECK(density_from_raw(0.0, act) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(density_from_raw(-10.0, act) == doctest::Approx(std::exp(-10.0)).epsilon(1e-15));
    CHECK(density_from_raw(1.0, act) == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
}

TEST_CASE("density activation respects scale and offset") {
    const ActivationParams act(2.0, -1.0, -10.0);
    CHECK(density_from_raw(0.5, act) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(density_from_raw(1.0, act) == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
}

TEST_CASE("color activation closed-form values") {
    const auto mid = color_from_raw({0.0, 0.0, 0.0});
    for (double v : mid) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
    const auto skew = color_from_raw({-std::log(3.0), 0.0, std::log(3.0)});
    CHECK(skew[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(skew[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(skew[2] == doctest::Approx(0.75).epsilon(1e-12));
    const auto sat = color_from_raw({100.0, 100.0, 100.0});
    for (double v : sat) CHECK(std::abs(v - 1.0) < 1e-9);
}

TEST_CASE("activations are strictly increasing") {
    const ActivationParams act;
    double prev_d = -1.0, prev_c = -1.0;
    for (double v = -12.0; v <= 12.0; v += 0.5) {
        const double d = density_from_raw(v, act);
        const double c = color_from_raw({v, v, v})[0];
        CHECK(d > prev_d);
        CHECK(c > prev_c);
        prev_d = d;
        prev_c = c;
    }
}

TEST_CASE("activation parameters must keep the floor density negligible") {
    CHECK_NOTHROW(ActivationParams(1.0, 0.0, -10.0));
    CHECK_THROWS_AS(ActivationParams(1.0, 0.0, -2.0), std::invalid_argument);
    CHECK_THROWS_AS(ActivationParams(1.0, 8.0, -10.0), std::invalid_argument);
}

TEST_CASE("sigmoid and logit are inverses") {
    for (double p : {0.01, 0.25, 0.5, 0.75, 0.99})
        CHECK(sigmoid(logit(p)) == doctest::Approx(p).epsilon(1e-12));
}

TEST_CASE("write then read reproduces the grid bit for bit") {
    TempDir tmp;
    VoxelGrid g = random_grid(7, 6);
    quantize_to_storage(g);
    const fs::path p = tmp.path / "grid.vxgr";
    grid_write(g, p.string());
    const VoxelGrid h = grid_read(p.string());
    CHECK(h.resolution == g.resolution);
    for (int a = 0; a < 3; ++a) {
        CHECK(h.bounds.min[a] == g.bounds.min[a]);
        CHECK(h.bounds.max[a] == g.bounds.max[a]);
    }
    REQUIRE(h.data.size() == g.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(h.data[i] == g.data[i]);
}

TEST_CASE("file header layout is stable") {
    TempDir tmp;
    VoxelGrid g(2, Bounds{});
    const fs::path p = tmp.path / "grid.vxgr";
    grid_write(g, p.string());
    std::ifstream in(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 48 + 2 * 2 * 2 * 4 * 4 + 4);
    CHECK(bytes.substr(0, 4) == "VXGR");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version u32 little-endian
    CHECK(static_cast<unsigned char>(bytes[8]) == 2);  // resolution
    CHECK(static_cast<unsigned char>(bytes[12]) == 4); // channels
}

TEST_CASE("reader rejects corrupted files with distinct errors") {
    TempDir tmp;
    VoxelGrid g = random_grid(3, 7);
    quantize_to_storage(g);
    const fs::path p = tmp.path / "grid.vxgr";
    grid_write(g, p.string());
    std::ifstream in(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    auto write_variant = [&](const std::string& data) {
        const fs::path q = tmp.path / "bad.vxgr";
        std::ofstream out(q, std::ios::binary);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.close();
        return q.string();
    };

    SUBCASE("missing file") {
        try {
            grid_read((tmp.path / "nope.vxgr").string());
            FAIL("expected error");
        } catch (const GridIoError& e) {
            CHECK(e.code() == GridIoError::Code::open_failed);
        }
    }
    SUBCASE("wrong magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        try {
            grid_read(write_variant(bad));
            FAIL("expected error");
        } catch (const GridIoError& e) {
            CHECK(e.code() == GridIoError::Code::bad_magic);
        }
    }
    SUBCASE("unknown version") {
        std::string bad = bytes;
        bad[4] = 9;
        try {
            grid_read(write_variant(bad));
            FAIL("expected error");
        } catch (const GridIoError& e) {
            CHECK(e.code() == GridIoError::Code::bad_version);
        }
    }
    SUBCASE("truncated payload") {
        try {
            grid_read(write_variant(bytes.substr(0, bytes.size() / 2)));
            FAIL("expected error");
        } catch (const GridIoError& e) {
            CHECK(e.code() == GridIoError::Code::truncated);
        }
    }
    SUBCASE("flipped payload byte fails the checksum") {
        std::string bad = bytes;
        bad[70] = static_cast<char>(bad[70] ^ 0x40);
        try {
            grid_read(write_variant(bad));
            FAIL("expected error");
        } catch (const GridIoError& e) {
            CHECK(e.code() == GridIoError::Code::bad_checksum);
        }
    }
}

TEST_CASE("grid validation rejects non-finite values") {
    VoxelGrid g = random_grid(2, 8);
    CHECK_NOTHROW(g.validate());
    g.data[5] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

}  // TEST_SUITE
