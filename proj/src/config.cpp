#include "voxdiff/config.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>

namespace voxdiff {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& path) {
    if (!j.is_object())
        throw std::invalid_argument("config: " + path + " must be an object");
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
    require_object(j, path);
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known)
            throw std::invalid_argument("config: unknown key " +
                                        (path.empty() ? key : path + "." + key));
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

void parse_dataset(const json& j, DatasetConfig& c) {
    check_keys(j, "dataset", {"n_scenes", "n_views", "resolution", "image_size", "radius",
                              "focal_factor", "seed", "jobs"});
    read(j, "n_scenes", c.n_scenes);
    read(j, "n_views", c.n_views);
    read(j, "resolution", c.resolution);
    read(j, "image_size", c.image_size);
    read(j, "radius", c.radius);
    read(j, "focal_factor", c.focal_factor);
    read(j, "seed", c.seed);
    read(j, "jobs", c.jobs);
}

void parse_fit(const json& j, FitConfig& c) {
    check_keys(j, "fit", {"iterations", "rays_per_step", "learning_rate", "lambda_density",
                          "lambda_color", "huber_delta", "color_target", "seed", "stratified",
                          "jobs"});
    read(j, "iterations", c.iterations);
    read(j, "rays_per_step", c.rays_per_step);
    read(j, "learning_rate", c.learning_rate);
    read(j, "lambda_density", c.lambda_density);
    read(j, "lambda_color", c.lambda_color);
    read(j, "huber_delta", c.huber_delta);
    read(j, "color_target", c.color_target);
    read(j, "seed", c.seed);
    read(j, "stratified", c.stratified);
    read(j, "jobs", c.jobs);
}

void parse_io(const json& j, IoConfig& c) {
    check_keys(j, "io", {"dataset_dir", "checkpoint", "checkpoint_every", "log_every"});
    read(j, "dataset_dir", c.dataset_dir);
    read(j, "checkpoint", c.checkpoint);
    read(j, "checkpoint_every", c.checkpoint_every);
    read(j, "log_every", c.log_every);
}

}  // namespace

void IoConfig::validate() const {
    if (dataset_dir.empty()) throw std::invalid_argument("io: dataset_dir must not be empty");
    if (checkpoint_every < 0) throw std::invalid_argument("io: checkpoint_every must be >= 0");
    if (log_every < 0) throw std::invalid_argument("io: log_every must be >= 0");
}

void RunConfig::validate() const {
    dataset.validate();
    fit.validate();
    unet.validate();
    schedule.validate();
    train.validate();
    guidance.validate();
    io.validate();
}

RunConfig config_from_json(const json& doc) {
    check_keys(doc, "", {"dataset", "fit", "unet", "schedule", "train", "guidance", "io"});
    RunConfig c;
    if (doc.contains("dataset")) parse_dataset(doc.at("dataset"), c.dataset);
    if (doc.contains("fit")) parse_fit(doc.at("fit"), c.fit);
    if (doc.contains("unet")) {
        check_keys(doc.at("unet"), "unet",
                   {"in_channels", "out_channels", "width", "levels", "res_blocks",
                    "attention_resolutions", "time_dim", "norm_groups", "variant"});
        doc.at("unet").get_to(c.unet);
    }
    if (doc.contains("schedule")) {
        check_keys(doc.at("schedule"), "schedule",
                   {"steps", "kind", "cosine_s", "beta_start", "beta_end", "snr_cap"});
        doc.at("schedule").get_to(c.schedule);
    }
    if (doc.contains("train")) {
        check_keys(doc.at("train"), "train",
                   {"learning_rate", "batch_size", "iterations", "grad_clip",
                    "warmup_iterations", "loss", "seed"});
        if (doc.at("train").contains("loss"))
            check_keys(doc.at("train").at("loss"), "train.loss",
                       {"weight_mode", "visibility_aware", "visibility_tau"});
        doc.at("train").get_to(c.train);
    }
    if (doc.contains("guidance")) {
        check_keys(doc.at("guidance"), "guidance",
                   {"inner_steps", "step_size", "lambda_noisy", "lambda_denoised", "mode",
                    "backprop_denoiser"});
        doc.at("guidance").get_to(c.guidance);
    }
    if (doc.contains("io")) parse_io(doc.at("io"), c.io);
    return c;
}

json config_to_json(const RunConfig& c) {
    return json{
        {"dataset",
         {{"n_scenes", c.dataset.n_scenes},
          {"n_views", c.dataset.n_views},
          {"resolution", c.dataset.resolution},
          {"image_size", c.dataset.image_size},
          {"radius", c.dataset.radius},
          {"focal_factor", c.dataset.focal_factor},
          {"seed", c.dataset.seed},
          {"jobs", c.dataset.jobs}}},
        {"fit",
         {{"iterations", c.fit.iterations},
          {"rays_per_step", c.fit.rays_per_step},
          {"learning_rate", c.fit.learning_rate},
          {"lambda_density", c.fit.lambda_density},
          {"lambda_color", c.fit.lambda_color},
          {"huber_delta", c.fit.huber_delta},
          {"color_target", c.fit.color_target},
          {"seed", c.fit.seed},
          {"stratified", c.fit.stratified},
          {"jobs", c.fit.jobs}}},
        {"unet", c.unet},
        {"schedule", c.schedule},
        {"train", c.train},
        {"guidance", c.guidance},
        {"io",
         {{"dataset_dir", c.io.dataset_dir},
          {"checkpoint", c.io.checkpoint},
          {"checkpoint_every", c.io.checkpoint_every},
          {"log_every", c.io.log_every}}}};
}

void apply_override(json& doc, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("config: override must look like section.key=value, got \"" +
                                    assignment + "\"");
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // bare strings need no quoting
    }

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        auto dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty())
            throw std::invalid_argument("config: override path \"" + path + "\" has an empty key");
        if (dot == std::string::npos) {
            (*node)[key] = std::move(parsed);
            return;
        }
        node = &(*node)[key];
        if (!node->is_object() && !node->is_null())
            throw std::invalid_argument("config: override path \"" + path +
                                        "\" descends into a non-object");
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw std::invalid_argument("config: cannot open " + path);
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument("config: " + path + ": " + e.what());
        }
    }
    for (const std::string& o : overrides) apply_override(doc, o);
    RunConfig c = config_from_json(doc);
    c.validate();
    return c;
}

}  // namespace voxdiff
