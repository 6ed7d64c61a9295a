#include "voxdiff/nn/unet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "voxdiff/rng.hpp"

namespace voxdiff::nn {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Largest divisor of `channels` not exceeding the configured group count.
int groups_for(int channels, int requested) {
    for (int g = std::min(requested, channels); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace

void UNetConfig::validate() const {
    require(in_channels >= 1 && out_channels >= 1, "unet: channel counts must be positive");
    require(width >= 4, "unet: width must be at least 4");
    require(width % 2 == 0, "unet: width must be even");
    require(levels >= 1, "unet: at least one downsampling level");
    require(res_blocks >= 1, "unet: at least one residual block per level");
    require(time_dim >= 0, "unet: time_dim must be nonnegative");
    require(norm_groups >= 1, "unet: norm_groups must be positive");
    require(variant == "single" || variant == "double", "unet: variant must be single or double");
    for (int r : attention_resolutions)
        require(r >= 1, "unet: attention resolutions must be positive");
}

void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"out_channels", c.out_channels},
                       {"width", c.width},
                       {"levels", c.levels},
                       {"res_blocks", c.res_blocks},
                       {"attention_resolutions", c.attention_resolutions},
                       {"time_dim", c.time_dim},
                       {"norm_groups", c.norm_groups},
                       {"variant", c.variant}};
}

void from_json(const nlohmann::json& j, UNetConfig& c) {
    c = UNetConfig{};
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
    if (j.contains("out_channels")) j.at("out_channels").get_to(c.out_channels);
    if (j.contains("width")) j.at("width").get_to(c.width);
    if (j.contains("levels")) j.at("levels").get_to(c.levels);
    if (j.contains("res_blocks")) j.at("res_blocks").get_to(c.res_blocks);
    if (j.contains("attention_resolutions"))
        j.at("attention_resolutions").get_to(c.attention_resolutions);
    if (j.contains("time_dim")) j.at("time_dim").get_to(c.time_dim);
    if (j.contains("norm_groups")) j.at("norm_groups").get_to(c.norm_groups);
    if (j.contains("variant")) j.at("variant").get_to(c.variant);
}

std::vector<double> sinusoid_embedding(int step, int dim) {
    require(dim >= 2 && dim % 2 == 0, "sinusoid_embedding: dim must be even and >= 2");
    std::vector<double> out(static_cast<std::size_t>(dim));
    int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
        double phase = static_cast<double>(step) * freq;
        out[static_cast<std::size_t>(2 * k)] = std::sin(phase);
        out[static_cast<std::size_t>(2 * k + 1)] = std::cos(phase);
    }
    return out;
}

UNet::UNet(UNetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int w = cfg_.width;
    int td = cfg_.resolved_time_dim();

    register_conv3("stem", w, cfg_.in_channels, false);
    register_linear("time.l1", td, w);
    register_linear("time.l2", td, td);

    for (int l = 0; l < cfg_.levels; ++l) {
        std::string lvl = "down" + std::to_string(l);
        for (int b = 0; b < cfg_.res_blocks; ++b) {
            std::string prefix = lvl + ".block" + std::to_string(b);
            register_res_block(prefix, w, w);
            register_attention(prefix + ".attn", w);
        }
    }
    for (int b = 0; b < cfg_.res_blocks; ++b) {
        std::string prefix = "mid.block" + std::to_string(b);
        register_res_block(prefix, w, w);
        register_attention(prefix + ".attn", w);
    }
    for (int l = cfg_.levels - 1; l >= 0; --l) {
        std::string lvl = "up" + std::to_string(l);
        register_conv3(lvl + ".upconv", w, w, false);
        for (int b = 0; b < cfg_.res_blocks; ++b) {
            std::string prefix = lvl + ".block" + std::to_string(b);
            register_res_block(prefix, b == 0 ? 2 * w : w, w);
            register_attention(prefix + ".attn", w);
        }
    }
    register_norm("head.gn", w);
    register_conv3("head.conv", cfg_.out_channels, w, true);
}

void UNet::register_tensor(const std::string& name, Shape shape, Init kind, int fan) {
    store_.add(name, std::move(shape));
    init_plan_.emplace_back(kind, fan);
}

void UNet::register_conv3(const std::string& prefix, int cout, int cin, bool zero) {
    register_tensor(prefix + ".w", Shape{cout, cin, 3, 3, 3}, zero ? Init::zero : Init::fan_in,
                    cin * 27);
    register_tensor(prefix + ".b", Shape{cout}, Init::zero, 0);
}

void UNet::register_conv1(const std::string& prefix, int cout, int cin) {
    register_tensor(prefix + ".w", Shape{cout, cin}, Init::fan_in, cin);
    register_tensor(prefix + ".b", Shape{cout}, Init::zero, 0);
}

void UNet::register_linear(const std::string& prefix, int out, int in) {
    register_tensor(prefix + ".w", Shape{in, out}, Init::fan_in, in);
    register_tensor(prefix + ".b", Shape{out}, Init::zero, 0);
}

void UNet::register_norm(const std::string& prefix, int channels) {
    register_tensor(prefix + ".g", Shape{channels}, Init::one, 0);
    register_tensor(prefix + ".s", Shape{channels}, Init::zero, 0);
}

void UNet::register_res_block(const std::string& prefix, int cin, int cout) {
    register_norm(prefix + ".gn1", cin);
    register_conv3(prefix + ".conv1", cout, cin, false);
    register_linear(prefix + ".emb", cout, cfg_.resolved_time_dim());
    register_norm(prefix + ".gn2", cout);
    register_conv3(prefix + ".conv2", cout, cout, false);
    if (cin != cout) register_conv1(prefix + ".skip", cout, cin);
}

void UNet::register_attention(const std::string& prefix, int channels) {
    if (cfg_.attention_resolutions.empty()) return;
    register_norm(prefix + ".gn", channels);
    register_conv1(prefix + ".q", channels, channels);
    register_conv1(prefix + ".k", channels, channels);
    register_conv1(prefix + ".v", channels, channels);
    register_conv1(prefix + ".proj", channels, channels);
}

void UNet::init_params(std::uint64_t seed) {
    auto& ps = store_.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto [kind, fan] = init_plan_[i];
        switch (kind) {
            case Init::zero:
                std::fill(ps[i].value.begin(), ps[i].value.end(), 0.0);
                break;
            case Init::one:
                std::fill(ps[i].value.begin(), ps[i].value.end(), 1.0);
                break;
            case Init::fan_in: {
                Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
                double bound = 1.0 / std::sqrt(static_cast<double>(fan));
                for (double& v : ps[i].value) v = rng.uniform(-bound, bound);
                break;
            }
        }
    }
}

Node* UNet::res_block(Tape& t, const std::string& prefix, Node* x, Node* emb, int cin, int cout) {
    Node* h = groupnorm(t, x, t.param(store_, prefix + ".gn1.g"), t.param(store_, prefix + ".gn1.s"),
                        groups_for(cin, cfg_.norm_groups));
    h = silu(t, h);
    h = conv3d(t, h, t.param(store_, prefix + ".conv1.w"), t.param(store_, prefix + ".conv1.b"));
    Node* proj = matmul(t, emb, t.param(store_, prefix + ".emb.w"));
    proj = add_row(t, proj, t.param(store_, prefix + ".emb.b"));
    h = add_channel_vec(t, h, proj);
    h = groupnorm(t, h, t.param(store_, prefix + ".gn2.g"), t.param(store_, prefix + ".gn2.s"),
                  groups_for(cout, cfg_.norm_groups));
    h = silu(t, h);
    h = conv3d(t, h, t.param(store_, prefix + ".conv2.w"), t.param(store_, prefix + ".conv2.b"));
    Node* skip = x;
    if (cin != cout)
        skip = conv1x1(t, x, t.param(store_, prefix + ".skip.w"), t.param(store_, prefix + ".skip.b"));
    return add(t, h, skip);
}

Node* UNet::attention_block(Tape& t, const std::string& prefix, Node* x) {
    int n = x->shape[0], c = x->shape[1];
    int s = x->shape[2] * x->shape[3] * x->shape[4];
    Node* h = groupnorm(t, x, t.param(store_, prefix + ".gn.g"), t.param(store_, prefix + ".gn.s"),
                        groups_for(c, cfg_.norm_groups));
    Node* flat = reshape(t, h, Shape{n, c, s});
    Node* q = conv1x1(t, flat, t.param(store_, prefix + ".q.w"), t.param(store_, prefix + ".q.b"));
    Node* k = conv1x1(t, flat, t.param(store_, prefix + ".k.w"), t.param(store_, prefix + ".k.b"));
    Node* v = conv1x1(t, flat, t.param(store_, prefix + ".v.w"), t.param(store_, prefix + ".v.b"));
    Node* att = attention(t, q, k, v);
    att = conv1x1(t, att, t.param(store_, prefix + ".proj.w"), t.param(store_, prefix + ".proj.b"));
    return add(t, reshape(t, att, x->shape), x);
}

Node* UNet::maybe_attend(Tape& t, const std::string& prefix, Node* x, int resolution) {
    auto& res = cfg_.attention_resolutions;
    if (std::find(res.begin(), res.end(), resolution) == res.end()) return x;
    return attention_block(t, prefix, x);
}

Node* UNet::forward(Tape& t, Node* x, std::span<const int> steps) {
    require(x->shape.rank() == 5, "unet: input must be (N,C,D,H,W), got " + x->shape.str());
    require(x->shape[1] == cfg_.in_channels, "unet: expected " + std::to_string(cfg_.in_channels) +
                                                 " input channels, got " +
                                                 std::to_string(x->shape[1]));
    int n = x->shape[0];
    int r = x->shape[2];
    require(x->shape[3] == r && x->shape[4] == r, "unet: input must be cubic");
    require(r % (1 << cfg_.levels) == 0,
            "unet: resolution " + std::to_string(r) + " not divisible by 2^levels");
    require(static_cast<int>(steps.size()) == n, "unet: one timestep per sample required");

    // Per-sample sinusoidal encoding, then the shared 2-layer map.
    std::vector<double> san(static_cast<std::size_t>(n) * cfg_.width);
    for (int s = 0; s < n; ++s) {
        require(steps[static_cast<std::size_t>(s)] >= 0, "unet: negative timestep");
        auto e = sinusoid_embedding(steps[static_cast<std::size_t>(s)], cfg_.width);
        std::copy(e.begin(), e.end(), san.begin() + static_cast<std::ptrdiff_t>(s) * cfg_.width);
    }
    Node* emb = t.leaf(Shape{n, cfg_.width}, san);
    emb = matmul(t, emb, t.param(store_, "time.l1.w"));
    emb = add_row(t, emb, t.param(store_, "time.l1.b"));
    emb = silu(t, emb);
    emb = matmul(t, emb, t.param(store_, "time.l2.w"));
    emb = add_row(t, emb, t.param(store_, "time.l2.b"));
    emb = silu(t, emb);

    Node* h = conv3d(t, x, t.param(store_, "stem.w"), t.param(store_, "stem.b"));

    int w = cfg_.width;
    int res = r;
    std::vector<Node*> skips;
    for (int l = 0; l < cfg_.levels; ++l) {
        std::string lvl = "down" + std::to_string(l);
        for (int b = 0; b < cfg_.res_blocks; ++b) {
            std::string prefix = lvl + ".block" + std::to_string(b);
            h = res_block(t, prefix, h, emb, w, w);
            h = maybe_attend(t, prefix + ".attn", h, res);
        }
        skips.push_back(h);
        h = avgpool2(t, h);
        res /= 2;
    }
    for (int b = 0; b < cfg_.res_blocks; ++b) {
        std::string prefix = "mid.block" + std::to_string(b);
        h = res_block(t, prefix, h, emb, w, w);
        h = maybe_attend(t, prefix + ".attn", h, res);
    }
    for (int l = cfg_.levels - 1; l >= 0; --l) {
        std::string lvl = "up" + std::to_string(l);
        h = upsample_nearest2(t, h);
        res *= 2;
        h = conv3d(t, h, t.param(store_, lvl + ".upconv.w"), t.param(store_, lvl + ".upconv.b"));
        h = concat_channels(t, h, skips[static_cast<std::size_t>(l)]);
        for (int b = 0; b < cfg_.res_blocks; ++b) {
            std::string prefix = lvl + ".block" + std::to_string(b);
            h = res_block(t, prefix, h, emb, b == 0 ? 2 * w : w, w);
            h = maybe_attend(t, prefix + ".attn", h, res);
        }
    }
    h = groupnorm(t, h, t.param(store_, "head.gn.g"), t.param(store_, "head.gn.s"),
                  groups_for(w, cfg_.norm_groups));
    h = silu(t, h);
    return conv3d(t, h, t.param(store_, "head.conv.w"), t.param(store_, "head.conv.b"));
}

namespace {

UNetConfig derive_config(UNetConfig base, int in, int out) {
    base.in_channels = in;
    base.out_channels = out;
    return base;
}

}  // namespace

DoubleUNet::DoubleUNet(UNetConfig base)
    : density_(derive_config(base, 1, 1)), color_(derive_config(base, 4, 3)) {}

void DoubleUNet::init_params(std::uint64_t seed) {
    density_.init_params(derive_seed(seed, 0));
    color_.init_params(derive_seed(seed, 1));
}

std::pair<Node*, Node*> DoubleUNet::forward(Tape& t, Node* d_t, Node* c_t,
                                            std::span<const int> steps) {
    require(d_t->shape.rank() == 5 && d_t->shape[1] == 1, "double unet: density input must be (N,1,R,R,R)");
    require(c_t->shape.rank() == 5 && c_t->shape[1] == 3, "double unet: color input must be (N,3,R,R,R)");
    Node* d_hat = density_.forward(t, d_t, steps);
    Node* c_hat = color_.forward(t, concat_channels(t, c_t, d_hat), steps);
    return {d_hat, c_hat};
}

}  // namespace voxdiff::nn
