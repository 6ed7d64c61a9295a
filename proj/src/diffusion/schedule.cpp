#include "voxdiff/diffusion/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace voxdiff::diffusion {

void ScheduleConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be positive");
    if (kind != "cosine" && kind != "linear")
        throw std::invalid_argument("schedule: kind must be cosine or linear");
    if (cosine_s <= 0.0) throw std::invalid_argument("schedule: cosine_s must be positive");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    if (snr_cap <= 0.0) throw std::invalid_argument("schedule: snr_cap must be positive");
}

void to_json(nlohmann::json& j, const ScheduleConfig& c) {
    j = nlohmann::json{{"steps", c.steps},         {"kind", c.kind},
                       {"cosine_s", c.cosine_s},   {"beta_start", c.beta_start},
                       {"beta_end", c.beta_end},   {"snr_cap", c.snr_cap}};
}

void from_json(const nlohmann::json& j, ScheduleConfig& c) {
    c = ScheduleConfig{};
    if (j.contains("steps")) j.at("steps").get_to(c.steps);
    if (j.contains("kind")) j.at("kind").get_to(c.kind);
    if (j.contains("cosine_s")) j.at("cosine_s").get_to(c.cosine_s);
    if (j.contains("beta_start")) j.at("beta_start").get_to(c.beta_start);
    if (j.contains("beta_end")) j.at("beta_end").get_to(c.beta_end);
    if (j.contains("snr_cap")) j.at("snr_cap").get_to(c.snr_cap);
}

NoiseSchedule::NoiseSchedule(ScheduleConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int t = cfg_.steps;
    alpha_bar_.resize(static_cast<std::size_t>(t) + 1);
    if (cfg_.kind == "cosine") {
        double s = cfg_.cosine_s;
        auto f = [s](double u) {
            double c = std::cos((u + s) / (1.0 + s) * std::numbers::pi / 2.0);
            return c * c;
        };
        double f0 = f(0.0);
        for (int i = 0; i <= t; ++i)
            alpha_bar_[static_cast<std::size_t>(i)] = f(static_cast<double>(i) / t) / f0;
    } else {
        double acc = 1.0;
        alpha_bar_[0] = 1.0;
        for (int i = 1; i <= t; ++i) {
            double frac = t > 1 ? static_cast<double>(i - 1) / (t - 1) : 0.0;
            double beta = cfg_.beta_start + (cfg_.beta_end - cfg_.beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar_[static_cast<std::size_t>(i)] = acc;
        }
    }
    alpha_bar_[0] = 1.0;
    for (int i = 1; i <= t; ++i) {
        auto idx = static_cast<std::size_t>(i);
        if (!(alpha_bar_[idx] > 0.0 && alpha_bar_[idx] < alpha_bar_[idx - 1]))
            throw std::runtime_error("schedule: cumulative signal must strictly decrease in (0,1)");
    }
}

void NoiseSchedule::check_index(int i, int lo) const {
    if (i < lo || i > cfg_.steps)
        throw std::out_of_range("schedule: step index " + std::to_string(i) + " outside [" +
                                std::to_string(lo) + "," + std::to_string(cfg_.steps) + "]");
}

double NoiseSchedule::alpha_bar(int i) const {
    check_index(i, 0);
    return alpha_bar_[static_cast<std::size_t>(i)];
}

double NoiseSchedule::alpha(int i) const { return std::sqrt(alpha_bar(i)); }

double NoiseSchedule::sigma(int i) const { return std::sqrt(1.0 - alpha_bar(i)); }

double NoiseSchedule::snr(int i) const {
    double ab = alpha_bar(i);
    if (ab == 1.0) return std::numeric_limits<double>::infinity();
    return ab / (1.0 - ab);
}

double NoiseSchedule::snr_weight(int i) const {
    check_index(i, 1);
    if (i == 1) return cfg_.snr_cap;
    double w = snr(i - 1) - snr(i);
    return std::clamp(w, 0.0, cfg_.snr_cap);
}

ChannelSchedules::ChannelSchedules(NoiseSchedule d, NoiseSchedule c)
    : density(std::move(d)), color(std::move(c)) {
    if (density.steps() != color.steps())
        throw std::invalid_argument("channel schedules must share the step count");
}

}  // namespace voxdiff::diffusion
