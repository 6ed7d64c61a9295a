#include "voxdiff/diffusion/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace voxdiff::diffusion {

std::vector<double> grid_to_field(const VoxelGrid& grid) {
    std::size_t n = grid.voxel_count();
    std::vector<double> field(n * VoxelGrid::kChannels);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < VoxelGrid::kChannels; ++c)
            field[static_cast<std::size_t>(c) * n + v] = grid.data[v * VoxelGrid::kChannels + c];
    return field;
}

VoxelGrid field_to_grid(std::span<const double> field, int resolution, Bounds bounds) {
    VoxelGrid grid(resolution, bounds);
    std::size_t n = grid.voxel_count();
    if (field.size() != n * VoxelGrid::kChannels)
        throw std::invalid_argument("field size does not match resolution");
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < VoxelGrid::kChannels; ++c)
            grid.data[v * VoxelGrid::kChannels + c] = field[static_cast<std::size_t>(c) * n + v];
    return grid;
}

void to_json(nlohmann::json& j, const GroupStats& s) {
    j = nlohmann::json{{"density_mean", s.density_mean},
                       {"density_scale", s.density_scale},
                       {"color_mean", s.color_mean},
                       {"color_scale", s.color_scale}};
}

void from_json(const nlohmann::json& j, GroupStats& s) {
    j.at("density_mean").get_to(s.density_mean);
    j.at("density_scale").get_to(s.density_scale);
    j.at("color_mean").get_to(s.color_mean);
    j.at("color_scale").get_to(s.color_scale);
}

GroupStats compute_group_stats(std::span<const VoxelGrid> grids) {
    if (grids.empty()) throw std::invalid_argument("group stats need at least one grid");
    double sum_d = 0.0, sum_c = 0.0;
    std::size_t n_d = 0, n_c = 0;
    for (const auto& g : grids) {
        for (std::size_t v = 0; v < g.voxel_count(); ++v) {
            sum_d += g.data[v * 4];
            sum_c += g.data[v * 4 + 1] + g.data[v * 4 + 2] + g.data[v * 4 + 3];
        }
        n_d += g.voxel_count();
        n_c += g.voxel_count() * 3;
    }
    GroupStats stats;
    stats.density_mean = sum_d / static_cast<double>(n_d);
    stats.color_mean = sum_c / static_cast<double>(n_c);

    double var_d = 0.0, var_c = 0.0;
    for (const auto& g : grids)
        for (std::size_t v = 0; v < g.voxel_count(); ++v) {
            double dd = g.data[v * 4] - stats.density_mean;
            var_d += dd * dd;
            for (int c = 1; c < 4; ++c) {
                double dc = g.data[v * 4 + static_cast<std::size_t>(c)] - stats.color_mean;
                var_c += dc * dc;
            }
        }
    var_d /= static_cast<double>(n_d);
    var_c /= static_cast<double>(n_c);

    if (var_d > 0.0) {
        stats.density_scale = std::sqrt(var_d);
    } else {
        std::cerr << "note: constant density group, normalization scale left at 1\n";
    }
    if (var_c > 0.0) {
        stats.color_scale = std::sqrt(var_c);
    } else {
        std::cerr << "note: constant color group, normalization scale left at 1\n";
    }
    return stats;
}

namespace {

void affine_field(std::span<double> field, std::size_t voxels, const GroupStats& s,
                  bool forward) {
    std::size_t per_field = voxels * 4;
    if (voxels == 0 || field.size() % per_field != 0)
        throw std::invalid_argument("field span must hold whole 4-channel fields");
    for (std::size_t i = 0; i < field.size(); ++i) {
        bool density = (i % per_field) < voxels;  // leading plane of each field
        double mean = density ? s.density_mean : s.color_mean;
        double scale = density ? s.density_scale : s.color_scale;
        field[i] = forward ? (field[i] - mean) / scale : field[i] * scale + mean;
    }
}

}  // namespace

void normalize_field(std::span<double> field, std::size_t voxels, const GroupStats& stats) {
    affine_field(field, voxels, stats, true);
}

void denormalize_field(std::span<double> field, std::size_t voxels, const GroupStats& stats) {
    affine_field(field, voxels, stats, false);
}

DiffusionModel::DiffusionModel(nn::UNetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.variant == "single") {
        cfg_.in_channels = 4;
        cfg_.out_channels = 4;
        single_.emplace(cfg_);
    } else {
        pair_.emplace(cfg_);
    }
}

void DiffusionModel::init_params(std::uint64_t seed) {
    if (single_) single_->init_params(seed);
    else pair_->init_params(seed);
}

nn::Node* DiffusionModel::predict(nn::Tape& t, nn::Node* v_t, std::span<const int> steps) {
    if (single_) return single_->forward(t, v_t, steps);
    nn::Node* d_t = nn::slice_channels(t, v_t, 0, 1);
    nn::Node* c_t = nn::slice_channels(t, v_t, 1, 3);
    auto [d_hat, c_hat] = pair_->forward(t, d_t, c_t, steps);
    return nn::concat_channels(t, d_hat, c_hat);
}

std::size_t DiffusionModel::param_count() const {
    if (single_) return single_->params().total_values();
    return pair_->density().params().total_values() + pair_->color().params().total_values();
}

std::vector<double> DiffusionModel::flat_params() const {
    if (single_) return single_->params().flatten();
    auto flat = pair_->density().params().flatten();
    auto color = pair_->color().params().flatten();
    flat.insert(flat.end(), color.begin(), color.end());
    return flat;
}

void DiffusionModel::set_flat_params(std::span<const double> flat) {
    if (flat.size() != param_count())
        throw std::invalid_argument("flat parameter size does not match the model");
    if (single_) {
        single_->params().unflatten(flat);
        return;
    }
    std::size_t nd = pair_->density().params().total_values();
    pair_->density().params().unflatten(flat.subspan(0, nd));
    pair_->color().params().unflatten(flat.subspan(nd));
}

std::vector<double> DiffusionModel::flat_gradients(const nn::Tape& tape) const {
    if (single_) return tape.param_gradients(single_->params());
    auto flat = tape.param_gradients(pair_->density().params());
    auto color = tape.param_gradients(pair_->color().params());
    flat.insert(flat.end(), color.begin(), color.end());
    return flat;
}

void DiffusionModel::append_checkpoint_tensors(std::vector<nn::CheckpointTensor>& out) const {
    if (single_) {
        nn::append_store_tensors(out, single_->params(), "model.");
    } else {
        nn::append_store_tensors(out, pair_->density().params(), "model.density.");
        nn::append_store_tensors(out, pair_->color().params(), "model.color.");
    }
}

void DiffusionModel::load_checkpoint_tensors(const nn::CheckpointData& ckpt) {
    if (single_) {
        nn::load_store_tensors(single_->params(), ckpt, "model.");
    } else {
        nn::load_store_tensors(pair_->density().params(), ckpt, "model.density.");
        nn::load_store_tensors(pair_->color().params(), ckpt, "model.color.");
    }
}

}  // namespace voxdiff::diffusion
