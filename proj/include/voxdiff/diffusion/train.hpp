#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "voxdiff/diffusion/process.hpp"
#include "voxdiff/fit.hpp"

namespace voxdiff::diffusion {

struct DiffusionTrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 8;
    int iterations = 2000;
    double grad_clip = 500.0;      // global-norm ceiling
    int warmup_iterations = 100;   // linear ramp from zero
    DiffusionLossConfig loss;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const DiffusionTrainConfig& c);
void from_json(const nlohmann::json& j, DiffusionTrainConfig& c);

struct TrainTraceRow {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
};

void write_train_trace_csv(const std::filesystem::path& path,
                           std::span<const TrainTraceRow> rows);

// Denoising trainer: each step draws a batch of fields and timesteps, fresh
// noise, and applies one clipped Adam update. All randomness derives from
// (seed, step), so a restored run replays the schedule it would have seen.
class Trainer {
public:
    Trainer(DiffusionModel& model, ChannelSchedules schedules, DiffusionTrainConfig cfg);

    // Grids must share one resolution. Computes normalization stats over the
    // set and stores the normalized fields.
    void set_dataset(std::span<const VoxelGrid> grids);

    TrainTraceRow step();

    int current_step() const { return step_; }
    int resolution() const { return resolution_; }
    const GroupStats& stats() const { return stats_; }
    const ChannelSchedules& schedules() const { return schedules_; }
    // Post-clip gradient applied by the most recent step.
    const std::vector<double>& last_gradient() const { return last_grad_; }

    void save_checkpoint(const std::filesystem::path& path) const;
    // Restores parameters, optimizer moments, and the step counter. The
    // model/schedule configuration must match the checkpoint.
    void restore(const nn::CheckpointData& ckpt);

private:
    DiffusionModel& model_;
    ChannelSchedules schedules_;
    DiffusionTrainConfig cfg_;
    std::vector<double> dataset_;  // normalized fields, concatenated
    int resolution_ = 0;
    int count_ = 0;
    GroupStats stats_;
    Bounds bounds_{};
    AdamState adam_;
    int step_ = 0;
    std::vector<double> last_grad_;
};

// Everything a sampler needs, reloaded from a training checkpoint.
struct LoadedModel {
    std::unique_ptr<DiffusionModel> model;
    ChannelSchedules schedules;
    GroupStats stats;
    int resolution = 0;
    Bounds bounds{};
    int step = 0;
};

LoadedModel load_trained_model(const std::filesystem::path& path);

}  // namespace voxdiff::diffusion
