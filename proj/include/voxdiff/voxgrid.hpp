#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxdiff {

struct Bounds {
    std::array<double, 3> min{-1.0, -1.0, -1.0};
    std::array<double, 3> max{1.0, 1.0, 1.0};

    double extent(int axis) const { return max[axis] - min[axis]; }
};

// Raw voxel field V: R x R x R voxels, 4 channels each. Channel 0 is the raw
// (pre-exponential) density, channels 1..3 the raw (pre-sigmoid) color.
// Storage order: index = ((x*R + y)*R + z)*4 + c.
struct VoxelGrid {
    int resolution = 0;
    Bounds bounds;
    std::vector<double> data;

    static constexpr int kChannels = 4;

    VoxelGrid() = default;
    VoxelGrid(int resolution, Bounds bounds = {});

    // Uniform grid with one raw density and one raw color everywhere.
    static VoxelGrid filled(int resolution, double raw_density,
                            const std::array<double, 3>& raw_color, Bounds bounds = {});

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(resolution) * resolution * resolution;
    }
    std::size_t value_count() const { return voxel_count() * kChannels; }

    std::size_t voxel_index(int x, int y, int z) const {
        return (static_cast<std::size_t>(x) * resolution + y) * resolution + z;
    }
    double& at(int x, int y, int z, int c) { return data[voxel_index(x, y, z) * 4 + c]; }
    double at(int x, int y, int z, int c) const { return data[voxel_index(x, y, z) * 4 + c]; }

    // Cell size along each axis; voxel centers sit at min + (i + 0.5) * cell.
    std::array<double, 3> cell_size() const;
    std::array<double, 3> voxel_center(int x, int y, int z) const;

    // Throws std::invalid_argument on non-finite data, wrong data length, or
    // inverted bounds.
    void validate() const;
};

// Density / color activation constants. Construction enforces
// exp(alpha * d_min + beta) < 1e-3, i.e. the minimum raw density decodes to
// (near) zero absorption.
struct ActivationParams {
    double alpha = 1.0;
    double beta = 0.0;
    double d_min = -10.0;

    ActivationParams() = default;
    ActivationParams(double alpha, double beta, double d_min);
};

// Trilinear interpolation stencil at a world point: the 8 surrounding voxel
// indices (channel-0 offsets into data) and their blend weights. Out-of-bounds
// points clamp to the boundary cell centers.
struct InterpStencil {
    std::array<std::size_t, 8> base;  // data offset of channel 0 of each corner
    std::array<double, 8> weight;
};

InterpStencil interp_stencil(const VoxelGrid& grid, const std::array<double, 3>& x);

// Trilinear blend of the 8 surrounding voxel features.
std::array<double, 4> trilinear_interp(const VoxelGrid& grid, const std::array<double, 3>& x);

double density_from_raw(double v0, const ActivationParams& act);
std::array<double, 3> color_from_raw(const std::array<double, 3>& v);

double sigmoid(double x);
double logit(double p);

// --- Grid file I/O ------------------------------------------------------
//
// Little-endian layout: magic "VXGR", u32 version (=1), u32 resolution,
// u32 channels (=4), 6 x f64 bounds (min xyz, max xyz), R^3*4 f32 payload in
// C order (x slowest, channel fastest), u32 CRC32 of the payload bytes.

class GridIoError : public std::runtime_error {
public:
    enum class Code {
        open_failed,
        bad_magic,
        bad_version,
        bad_dims,
        truncated,
        bad_checksum,
        write_failed,
    };

    GridIoError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

void grid_write(const VoxelGrid& grid, const std::string& path);
VoxelGrid grid_read(const std::string& path);

// Rounds every value through f32, the on-disk precision. Grids produced by the
// pipeline are quantized before use so that disk round-trips are bit-exact.
void quantize_to_storage(VoxelGrid& grid);

}  // namespace voxdiff
