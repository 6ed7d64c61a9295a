#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxdiff/nn/tensor.hpp"

namespace voxdiff::nn {

// Container for trained parameters plus whatever metadata the producer needs
// (configs, schedules, step counters). Layout: "VXCK" magic, u32 version,
// u64 header length, JSON header {meta, tensor directory}, then one f64
// little-endian payload per tensor in directory order, then a CRC32 of the
// header and payload bytes.
struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct CheckpointData {
    nlohmann::json meta;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      std::span<const CheckpointTensor> tensors);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Store <-> checkpoint bridging. Tensor names are prefix + parameter name.
void append_store_tensors(std::vector<CheckpointTensor>& out, const ParamStore& store,
                          const std::string& prefix = "");
// Fills every store parameter from the checkpoint; missing names or shape
// mismatches throw.
void load_store_tensors(ParamStore& store, const CheckpointData& ckpt,
                        const std::string& prefix = "");

}  // namespace voxdiff::nn
