#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "voxdiff/nn/tensor.hpp"

namespace voxdiff::nn {

struct UNetConfig {
    int in_channels = 4;
    int out_channels = 4;
    int width = 16;                 // channel count, constant across levels
    int levels = 2;                 // number of 2x downsamples
    int res_blocks = 2;             // residual blocks per level
    std::vector<int> attention_resolutions;
    int time_dim = 0;               // 0 means 4*width
    int norm_groups = 8;
    std::string variant = "single";

    int resolved_time_dim() const { return time_dim > 0 ? time_dim : 4 * width; }
    void validate() const;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

// Raw sinusoidal step encoding: interleaved (sin, cos) pairs over
// log-spaced frequencies with base 10000. dim must be even.
std::vector<double> sinusoid_embedding(int step, int dim);

// 3D U-Net predicting the clean field from a noisy one. Encoder levels run
// res blocks then 2x average pooling; the decoder mirrors them with nearest
// upsampling + conv and skip concatenations. Each res block receives a
// per-sample time embedding. The output head is zero-initialized.
class UNet {
public:
    explicit UNet(UNetConfig cfg);

    const UNetConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Fan-in-scaled uniform weights, zero biases, identity norms; the output
    // head stays zero so an untrained net predicts 0.
    void init_params(std::uint64_t seed);

    // x: (N, in_channels, R, R, R), one timestep index per sample.
    Node* forward(Tape& tape, Node* x, std::span<const int> steps);

private:
    UNetConfig cfg_;
    ParamStore store_;

    enum class Init { fan_in, zero, one };
    std::vector<std::pair<Init, int>> init_plan_;  // per parameter: kind, fan-in

    void register_tensor(const std::string& name, Shape shape, Init kind, int fan);
    void register_conv3(const std::string& prefix, int cout, int cin, bool zero);
    void register_conv1(const std::string& prefix, int cout, int cin);
    void register_linear(const std::string& prefix, int out, int in);
    void register_norm(const std::string& prefix, int channels);
    void register_res_block(const std::string& prefix, int cin, int cout);
    void register_attention(const std::string& prefix, int channels);

    Node* res_block(Tape& t, const std::string& prefix, Node* x, Node* emb, int cin, int cout);
    Node* attention_block(Tape& t, const std::string& prefix, Node* x);
    Node* maybe_attend(Tape& t, const std::string& prefix, Node* x, int resolution);
};

// Two cooperating denoisers: one for the density channel, one for color.
// The color net sees the density net's clean estimate alongside the noisy
// color channels, so color can only react to density through that estimate.
class DoubleUNet {
public:
    explicit DoubleUNet(UNetConfig base);

    UNet& density() { return density_; }
    UNet& color() { return color_; }
    const UNet& density() const { return density_; }
    const UNet& color() const { return color_; }

    void init_params(std::uint64_t seed);

    // d_t: (N,1,R,R,R), c_t: (N,3,R,R,R) -> (density estimate, color estimate)
    std::pair<Node*, Node*> forward(Tape& tape, Node* d_t, Node* c_t,
                                    std::span<const int> steps);

private:
    UNet density_;
    UNet color_;
};

}  // namespace voxdiff::nn
