#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace voxdiff::diffusion {

struct ScheduleConfig {
    int steps = 1000;
    std::string kind = "cosine";  // or "linear"
    double cosine_s = 0.008;
    double beta_start = 1e-4;  // linear variant only
    double beta_end = 0.02;
    double snr_cap = 1e4;

    void validate() const;
    bool operator==(const ScheduleConfig&) const = default;
};

void to_json(nlohmann::json& j, const ScheduleConfig& c);
void from_json(const nlohmann::json& j, ScheduleConfig& c);

// Discrete variance-preserving noise schedule: tabulated cumulative signal
// fractions with alpha_i = sqrt(abar_i), sigma_i = sqrt(1 - abar_i), so
// alpha^2 + sigma^2 = 1 holds by construction. abar_0 is exactly 1.
class NoiseSchedule {
public:
    explicit NoiseSchedule(ScheduleConfig cfg);

    const ScheduleConfig& config() const { return cfg_; }
    int steps() const { return cfg_.steps; }

    double alpha_bar(int i) const;
    double alpha(int i) const;
    double sigma(int i) const;
    // alpha^2/sigma^2; infinite at i=0.
    double snr(int i) const;
    // Per-step loss weight SNR(i-1) - SNR(i), clipped to [0, snr_cap].
    // At i=1 the previous SNR is infinite, so the cap itself is returned.
    double snr_weight(int i) const;

private:
    ScheduleConfig cfg_;
    std::vector<double> alpha_bar_;  // indices 0..steps

    void check_index(int i, int lo) const;
};

// Independent schedules for the density channel and the color channels.
struct ChannelSchedules {
    NoiseSchedule density;
    NoiseSchedule color;

    ChannelSchedules(NoiseSchedule d, NoiseSchedule c);
    explicit ChannelSchedules(const ScheduleConfig& shared)
        : ChannelSchedules(NoiseSchedule(shared), NoiseSchedule(shared)) {}

    int steps() const { return density.steps(); }
};

}  // namespace voxdiff::diffusion
