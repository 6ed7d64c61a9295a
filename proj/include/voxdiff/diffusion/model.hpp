#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "voxdiff/nn/checkpoint.hpp"
#include "voxdiff/nn/unet.hpp"
#include "voxdiff/voxgrid.hpp"

namespace voxdiff::diffusion {

// Diffusion states are channel-planar: channel 0 is the raw density plane,
// channels 1..3 the raw color planes, each of resolution^3 values in grid
// index order. Grids store the same values channel-interleaved.
std::vector<double> grid_to_field(const VoxelGrid& grid);
VoxelGrid field_to_grid(std::span<const double> field, int resolution, Bounds bounds = {});

// Dataset-wide affine normalization, one (mean, scale) pair per channel
// group so density and color both land near unit scale.
struct GroupStats {
    double density_mean = 0.0;
    double density_scale = 1.0;
    double color_mean = 0.0;
    double color_scale = 1.0;

    bool operator==(const GroupStats&) const = default;
};

void to_json(nlohmann::json& j, const GroupStats& s);
void from_json(const nlohmann::json& j, GroupStats& s);

// Population statistics over all grids; a degenerate (zero variance) group
// keeps scale 1 and notes the fallback on stderr.
GroupStats compute_group_stats(std::span<const VoxelGrid> grids);

// In-place (value - mean) / scale per channel group. The span may hold one
// field or a whole batch; `voxels` is resolution^3 of a single field.
void normalize_field(std::span<double> field, std::size_t voxels, const GroupStats& stats);
void denormalize_field(std::span<double> field, std::size_t voxels, const GroupStats& stats);

// Anything that can predict the clean field from a noisy one. Implemented by
// the trained U-Nets and by hand-built oracles in tests.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    // v_t: (N,4,R,R,R) in normalized space; returns the clean estimate with
    // the same shape.
    virtual nn::Node* predict(nn::Tape& tape, nn::Node* v_t, std::span<const int> steps) = 0;
};

// The trainable denoiser in either variant. "single" runs one U-Net over all
// four channels; "double" runs a density U-Net and a color U-Net that sees
// the density estimate.
class DiffusionModel : public Denoiser {
public:
    explicit DiffusionModel(nn::UNetConfig cfg);

    const nn::UNetConfig& config() const { return cfg_; }
    void init_params(std::uint64_t seed);

    nn::Node* predict(nn::Tape& tape, nn::Node* v_t, std::span<const int> steps) override;

    std::size_t param_count() const;
    std::vector<double> flat_params() const;
    void set_flat_params(std::span<const double> flat);
    // Gradients for every parameter after tape.backward, in flat_params order.
    std::vector<double> flat_gradients(const nn::Tape& tape) const;

    void append_checkpoint_tensors(std::vector<nn::CheckpointTensor>& out) const;
    void load_checkpoint_tensors(const nn::CheckpointData& ckpt);

private:
    nn::UNetConfig cfg_;
    std::optional<nn::UNet> single_;
    std::optional<nn::DoubleUNet> pair_;
};

}  // namespace voxdiff::diffusion
