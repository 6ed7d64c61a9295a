#include "voxdiff/diffusion/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace voxdiff::diffusion {

namespace {

constexpr std::uint64_t kBatchStream = 0x62746368;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;

nlohmann::json bounds_to_json(const Bounds& b) {
    return {{"min", b.min}, {"max", b.max}};
}

Bounds bounds_from_json(const nlohmann::json& j) {
    Bounds b;
    j.at("min").get_to(b.min);
    j.at("max").get_to(b.max);
    return b;
}

}  // namespace

void DiffusionTrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad_clip must be > 0");
    if (warmup_iterations < 0) throw std::invalid_argument("train: warmup_iterations must be >= 0");
    loss.validate();
}

void to_json(nlohmann::json& j, const DiffusionTrainConfig& c) {
    j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
         {"iterations", c.iterations},       {"grad_clip", c.grad_clip},
         {"warmup_iterations", c.warmup_iterations},
         {"loss", c.loss},                   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DiffusionTrainConfig& c) {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.warmup_iterations = j.value("warmup_iterations", c.warmup_iterations);
    if (j.contains("loss")) j.at("loss").get_to(c.loss);
    c.seed = j.value("seed", c.seed);
}

void write_train_trace_csv(const std::filesystem::path& path,
                           std::span<const TrainTraceRow> rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open trace file " + path.string());
    out << "step,loss,grad_norm,lr\n";
    out.precision(17);
    for (const auto& r : rows)
        out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.lr << '\n';
}

Trainer::Trainer(DiffusionModel& model, ChannelSchedules schedules, DiffusionTrainConfig cfg)
    : model_(model), schedules_(std::move(schedules)), cfg_(std::move(cfg)),
      adam_(model.param_count()) {
    cfg_.validate();
}

void Trainer::set_dataset(std::span<const VoxelGrid> grids) {
    if (grids.empty()) throw std::invalid_argument("trainer: dataset is empty");
    resolution_ = grids[0].resolution;
    bounds_ = grids[0].bounds;
    for (const auto& g : grids)
        if (g.resolution != resolution_)
            throw std::invalid_argument("trainer: dataset grids must share one resolution");
    stats_ = compute_group_stats(grids);
    std::size_t vox = grids[0].voxel_count();
    dataset_.clear();
    dataset_.reserve(grids.size() * 4 * vox);
    for (const auto& g : grids) {
        auto field = grid_to_field(g);
        dataset_.insert(dataset_.end(), field.begin(), field.end());
    }
    normalize_field(dataset_, vox, stats_);
    count_ = static_cast<int>(grids.size());
}

TrainTraceRow Trainer::step() {
    if (count_ == 0) throw std::logic_error("trainer: dataset not set");
    std::size_t vox = static_cast<std::size_t>(resolution_) * resolution_ * resolution_;
    std::size_t field_len = 4 * vox;
    int batch = cfg_.batch_size;
    int t_max = schedules_.steps();

    Rng pick(derive_seed(cfg_.seed, kBatchStream, static_cast<std::uint64_t>(step_)));
    std::vector<double> clean(static_cast<std::size_t>(batch) * field_len);
    std::vector<int> steps(batch);
    for (int b = 0; b < batch; ++b) {
        auto idx = pick.uniform_int(static_cast<std::uint64_t>(count_));
        std::copy_n(dataset_.begin() + static_cast<std::ptrdiff_t>(idx * field_len), field_len,
                    clean.begin() + static_cast<std::ptrdiff_t>(b) * field_len);
        steps[b] = 1 + static_cast<int>(pick.uniform_int(static_cast<std::uint64_t>(t_max)));
    }
    Rng noise(derive_seed(cfg_.seed, kNoiseStream, static_cast<std::uint64_t>(step_)));
    std::vector<double> eps(clean.size());
    for (double& e : eps) e = noise.normal();

    nn::Tape tape;
    nn::Node* loss_node =
        diffusion_loss(tape, model_, clean, resolution_, steps, eps, schedules_, cfg_.loss, stats_);
    double loss = loss_node->value[0];
    if (!std::isfinite(loss))
        throw std::runtime_error("training diverged at step " + std::to_string(step_));
    tape.backward(loss_node);

    auto grad = model_.flat_gradients(tape);
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) {
        double s = cfg_.grad_clip / norm;
        for (double& g : grad) g *= s;
    }
    last_grad_ = grad;

    double lr = cfg_.learning_rate;
    if (cfg_.warmup_iterations > 0)
        lr *= std::min(1.0, static_cast<double>(step_ + 1) / cfg_.warmup_iterations);

    auto params = model_.flat_params();
    adam_step(params, grad, adam_, lr);
    model_.set_flat_params(params);

    ++step_;
    return TrainTraceRow{step_, loss, norm, lr};
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    nlohmann::json meta = {{"kind", "diffusion"},
                           {"step", step_},
                           {"opt_step", adam_.step},
                           {"resolution", resolution_},
                           {"bounds", bounds_to_json(bounds_)},
                           {"model", model_.config()},
                           {"schedules",
                            {{"density", schedules_.density.config()},
                             {"color", schedules_.color.config()}}},
                           {"stats", stats_},
                           {"train", cfg_}};
    std::vector<nn::CheckpointTensor> tensors;
    model_.append_checkpoint_tensors(tensors);
    auto n = static_cast<int>(model_.param_count());
    tensors.push_back({"opt.m", {n}, adam_.m});
    tensors.push_back({"opt.v", {n}, adam_.v});
    nn::write_checkpoint(path, meta, tensors);
}

void Trainer::restore(const nn::CheckpointData& ckpt) {
    const auto& meta = ckpt.meta;
    if (meta.value("kind", "") != "diffusion")
        throw std::runtime_error("checkpoint is not a diffusion checkpoint");
    nlohmann::json have = model_.config();
    if (meta.at("model") != have)
        throw std::runtime_error("checkpoint model configuration does not match");
    ScheduleConfig d = meta.at("schedules").at("density");
    ScheduleConfig c = meta.at("schedules").at("color");
    if (d != schedules_.density.config() || c != schedules_.color.config())
        throw std::runtime_error("checkpoint schedule configuration does not match");

    model_.load_checkpoint_tensors(ckpt);
    const auto* m = ckpt.find("opt.m");
    const auto* v = ckpt.find("opt.v");
    if (m == nullptr || v == nullptr)
        throw std::runtime_error("checkpoint missing optimizer state");
    if (m->data.size() != model_.param_count() || v->data.size() != model_.param_count())
        throw std::runtime_error("checkpoint optimizer state has wrong size");
    adam_.m = m->data;
    adam_.v = v->data;
    adam_.step = meta.at("opt_step").get<std::int64_t>();
    step_ = meta.at("step").get<int>();
    stats_ = meta.at("stats").get<GroupStats>();
    resolution_ = meta.at("resolution").get<int>();
    bounds_ = bounds_from_json(meta.at("bounds"));
}

LoadedModel load_trained_model(const std::filesystem::path& path) {
    auto ckpt = nn::read_checkpoint(path);
    const auto& meta = ckpt.meta;
    if (meta.value("kind", "") != "diffusion")
        throw std::runtime_error("checkpoint is not a diffusion checkpoint");
    auto model = std::make_unique<DiffusionModel>(meta.at("model").get<nn::UNetConfig>());
    model->load_checkpoint_tensors(ckpt);
    ScheduleConfig d = meta.at("schedules").at("density");
    ScheduleConfig c = meta.at("schedules").at("color");
    return LoadedModel{std::move(model),
                       ChannelSchedules(NoiseSchedule(d), NoiseSchedule(c)),
                       meta.at("stats").get<GroupStats>(),
                       meta.at("resolution").get<int>(),
                       bounds_from_json(meta.at("bounds")),
                       meta.at("step").get<int>()};
}

}  // namespace voxdiff::diffusion
