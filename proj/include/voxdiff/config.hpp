#pragma once

#include <span>
#include <string>

#include "json.hpp"
#include "voxdiff/diffusion/process.hpp"
#include "voxdiff/diffusion/schedule.hpp"
#include "voxdiff/diffusion/train.hpp"
#include "voxdiff/fit.hpp"
#include "voxdiff/nn/unet.hpp"
#include "voxdiff/scenegen.hpp"

namespace voxdiff {

inline constexpr const char* kToolVersion = "0.1.0";

struct IoConfig {
    std::string dataset_dir = "dataset";  // relative paths resolve under --out
    std::string checkpoint;               // empty means <out>/checkpoints/final.vxck
    int checkpoint_every = 500;           // 0 writes only the final checkpoint
    int log_every = 50;                   // 0 silences progress lines

    void validate() const;
};

// One document configuring the whole pipeline. Every field is optional in
// the JSON form and falls back to the defaults below.
struct RunConfig {
    DatasetConfig dataset;
    FitConfig fit;
    nn::UNetConfig unet;
    diffusion::ScheduleConfig schedule;
    diffusion::DiffusionTrainConfig train;
    diffusion::GuidanceConfig guidance;
    IoConfig io;

    void validate() const;
};

// Strict parse: any key outside the schema fails with its full path, e.g.
// "config: unknown key train.lr".
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& c);

// Applies one "section.key=value" assignment into the raw document. The
// value is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// File load (empty path = defaults) + overrides + strict parse + validate.
RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides);

}  // namespace voxdiff
