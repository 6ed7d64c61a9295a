#include "voxdiff/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxdiff::nn {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Spatial extent of a (N,C,...) tensor.
std::size_t spatial_size(const Shape& s) {
    std::size_t n = 1;
    for (int i = 2; i < s.rank(); ++i) n *= static_cast<std::size_t>(s[i]);
    return n;
}

}  // namespace

std::string Shape::str() const {
    std::string out = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(dims[i]);
    }
    return out + ")";
}

Param& ParamStore::add(const std::string& name, Shape shape) {
    require(!contains(name), "duplicate parameter name: " + name);
    index_.emplace(name, static_cast<int>(params_.size()));
    params_.push_back(Param{name, shape, std::vector<double>(shape.numel(), 0.0)});
    return params_.back();
}

Param& ParamStore::at(const std::string& name) {
    return params_[static_cast<std::size_t>(index_of(name))];
}

const Param& ParamStore::at(const std::string& name) const {
    return params_[static_cast<std::size_t>(index_of(name))];
}

int ParamStore::index_of(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter: " + name);
    return it->second;
}

std::size_t ParamStore::total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> flat;
    flat.reserve(total_values());
    for (const auto& p : params_) flat.insert(flat.end(), p.value.begin(), p.value.end());
    return flat;
}

void ParamStore::unflatten(std::span<const double> flat) {
    require(flat.size() == total_values(), "flat parameter size mismatch");
    std::size_t off = 0;
    for (auto& p : params_) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(),
                    p.value.begin());
        off += p.value.size();
    }
}

Node* Tape::make(Shape shape, std::vector<Node*> inputs) {
    auto node = std::make_unique<Node>();
    node->shape = std::move(shape);
    node->value.resize(node->shape.numel());
    node->inputs = std::move(inputs);
    for (Node* in : node->inputs)
        if (in->requires_grad) node->requires_grad = true;
    node->seq = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
}

Node* Tape::leaf(Shape shape, std::span<const double> data, bool requires_grad) {
    require(data.size() == shape.numel(), "leaf data does not match shape " + shape.str());
    Node* n = make(std::move(shape), {});
    std::copy(data.begin(), data.end(), n->value.begin());
    n->requires_grad = requires_grad;
    return n;
}

Node* Tape::constant(Shape shape, double fill) {
    Node* n = make(std::move(shape), {});
    std::fill(n->value.begin(), n->value.end(), fill);
    return n;
}

Node* Tape::param(ParamStore& store, const std::string& name) {
    const Param& p = store.at(name);
    Node* n = leaf(p.shape, p.value, true);
    bindings_.push_back(Binding{&store, store.index_of(name), n});
    return n;
}

void Tape::backward(Node* loss) {
    require(loss != nullptr && loss->value.size() == 1, "backward needs a scalar loss");
    const double one = 1.0;
    backward_from(loss, std::span<const double>(&one, 1));
}

void Tape::backward_from(Node* root, std::span<const double> seed) {
    require(root != nullptr && seed.size() == root->value.size(),
            "backward seed must match the root tensor");

    // Mark everything the root depends on.
    std::vector<char> reached(nodes_.size(), 0);
    std::vector<Node*> stack{root};
    reached[static_cast<std::size_t>(root->seq)] = 1;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        for (Node* in : n->inputs) {
            auto i = static_cast<std::size_t>(in->seq);
            if (!reached[i]) {
                reached[i] = 1;
                stack.push_back(in);
            }
        }
    }

    for (auto& n : nodes_) n->grad.assign(n->value.size(), 0.0);
    std::copy(seed.begin(), seed.end(), root->grad.begin());

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (!reached[static_cast<std::size_t>(n->seq)] || !n->requires_grad) continue;
        if (n->backprop) n->backprop();
    }
}

std::vector<double> Tape::param_gradients(const ParamStore& store) const {
    std::vector<double> flat(store.total_values(), 0.0);
    std::vector<std::size_t> offsets(store.size() + 1, 0);
    for (std::size_t i = 0; i < store.size(); ++i)
        offsets[i + 1] = offsets[i] + store.params()[i].value.size();
    for (const auto& b : bindings_) {
        if (b.store != &store || b.node->grad.empty()) continue;
        auto off = offsets[static_cast<std::size_t>(b.index)];
        for (std::size_t i = 0; i < b.node->grad.size(); ++i) flat[off + i] += b.node->grad[i];
    }
    return flat;
}

// --- elementwise -----------------------------------------------------------

Node* add(Tape& t, Node* a, Node* b) {
    require(a->shape == b->shape, "add: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    Node* out = t.make(a->shape, {a, b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
    out->backprop = [out, a, b] {
        if (a->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
    };
    return out;
}

Node* sub(Tape& t, Node* a, Node* b) {
    require(a->shape == b->shape, "sub: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    Node* out = t.make(a->shape, {a, b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] - b->value[i];
    out->backprop = [out, a, b] {
        if (a->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] -= out->grad[i];
    };
    return out;
}

Node* mul(Tape& t, Node* a, Node* b) {
    require(a->shape == b->shape, "mul: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    Node* out = t.make(a->shape, {a, b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * b->value[i];
    out->backprop = [out, a, b] {
        if (a->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->value[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->value[i];
    };
    return out;
}

Node* scale(Tape& t, Node* a, double s) {
    Node* out = t.make(a->shape, {a});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * s;
    out->backprop = [out, a, s] {
        if (a->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * s;
    };
    return out;
}

Node* silu(Tape& t, Node* a) {
    Node* out = t.make(a->shape, {a});
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        double s = sigmoid(a->value[i]);
        out->value[i] = a->value[i] * s;
    }
    out->backprop = [out, a] {
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            double x = a->value[i];
            double s = sigmoid(x);
            a->grad[i] += out->grad[i] * s * (1.0 + x * (1.0 - s));
        }
    };
    return out;
}

// --- reductions ------------------------------------------------------------

Node* sum_all(Tape& t, Node* a) {
    Node* out = t.make(Shape{1}, {a});
    double acc = 0.0;
    for (double v : a->value) acc += v;
    out->value[0] = acc;
    out->backprop = [out, a] {
        if (!a->requires_grad) return;
        double g = out->grad[0];
        for (double& gi : a->grad) gi += g;
    };
    return out;
}

Node* mean_all(Tape& t, Node* a) {
    Node* out = t.make(Shape{1}, {a});
    double acc = 0.0;
    for (double v : a->value) acc += v;
    double inv = 1.0 / static_cast<double>(a->value.size());
    out->value[0] = acc * inv;
    out->backprop = [out, a, inv] {
        if (!a->requires_grad) return;
        double g = out->grad[0] * inv;
        for (double& gi : a->grad) gi += g;
    };
    return out;
}

// --- dense -----------------------------------------------------------------

Node* matmul(Tape& t, Node* a, Node* b) {
    require(a->shape.rank() == 2 && b->shape.rank() == 2 && a->shape[1] == b->shape[0],
            "matmul: incompatible shapes " + a->shape.str() + " x " + b->shape.str());
    int n = a->shape[0], k = a->shape[1], m = b->shape[1];
    Node* out = t.make(Shape{n, m}, {a, b});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a->value[i * k + p] * b->value[p * m + j];
            out->value[i * m + j] = acc;
        }
    out->backprop = [out, a, b, n, k, m] {
        if (a->requires_grad)
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += out->grad[i * m + j] * b->value[p * m + j];
                    a->grad[i * k + p] += acc;
                }
        if (b->requires_grad)
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += a->value[i * k + p] * out->grad[i * m + j];
                    b->grad[p * m + j] += acc;
                }
    };
    return out;
}

Node* add_row(Tape& t, Node* x, Node* b) {
    require(x->shape.rank() == 2 && b->shape.rank() == 1 && b->shape[0] == x->shape[1],
            "add_row: incompatible shapes " + x->shape.str() + " + " + b->shape.str());
    int n = x->shape[0], m = x->shape[1];
    Node* out = t.make(x->shape, {x, b});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out->value[i * m + j] = x->value[i * m + j] + b->value[j];
    out->backprop = [out, x, b, n, m] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
        if (b->requires_grad)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) b->grad[j] += out->grad[i * m + j];
    };
    return out;
}

// --- convolutional blocks --------------------------------------------------

namespace {

// Copies one sample's channels into a zero-padded (C, D+2, H+2, W+2) buffer.
void pad_sample(const double* x, int c, int d, int h, int w, std::vector<double>& out) {
    int pd = d + 2, ph = h + 2, pw = w + 2;
    out.assign(static_cast<std::size_t>(c) * pd * ph * pw, 0.0);
    for (int ci = 0; ci < c; ++ci)
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y) {
                const double* src = x + ((static_cast<std::size_t>(ci) * d + z) * h + y) * w;
                double* dst =
                    out.data() + ((static_cast<std::size_t>(ci) * pd + z + 1) * ph + y + 1) * pw + 1;
                std::copy_n(src, w, dst);
            }
}

}  // namespace

Node* conv3d(Tape& t, Node* x, Node* w, Node* b) {
    require(x->shape.rank() == 5, "conv3d: input must be (N,C,D,H,W), got " + x->shape.str());
    require(w->shape.rank() == 5 && w->shape[2] == 3 && w->shape[3] == 3 && w->shape[4] == 3,
            "conv3d: kernel must be (Cout,Cin,3,3,3), got " + w->shape.str());
    require(w->shape[1] == x->shape[1], "conv3d: channel mismatch");
    require(b->shape == Shape{w->shape[0]}, "conv3d: bias must be (Cout)");

    int n = x->shape[0], cin = x->shape[1], d = x->shape[2], h = x->shape[3], wd = x->shape[4];
    int cout = w->shape[0];
    int pd = d + 2, ph = h + 2, pw = wd + 2;
    std::size_t sp = static_cast<std::size_t>(d) * h * wd;

    Node* out = t.make(Shape{n, cout, d, h, wd}, {x, w, b});
    std::vector<double> padded;
    for (int s = 0; s < n; ++s) {
        pad_sample(x->value.data() + static_cast<std::size_t>(s) * cin * sp, cin, d, h, wd, padded);
        for (int co = 0; co < cout; ++co) {
            double* o = out->value.data() + (static_cast<std::size_t>(s) * cout + co) * sp;
            std::fill_n(o, sp, b->value[static_cast<std::size_t>(co)]);
            for (int ci = 0; ci < cin; ++ci)
                for (int kd = 0; kd < 3; ++kd)
                    for (int kh = 0; kh < 3; ++kh)
                        for (int kw = 0; kw < 3; ++kw) {
                            double wv =
                                w->value[(((static_cast<std::size_t>(co) * cin + ci) * 3 + kd) * 3 +
                                          kh) *
                                             3 +
                                         kw];
                            if (wv == 0.0) continue;
                            for (int z = 0; z < d; ++z)
                                for (int y = 0; y < h; ++y) {
                                    const double* src =
                                        padded.data() +
                                        ((static_cast<std::size_t>(ci) * pd + z + kd) * ph + y +
                                         kh) *
                                            pw +
                                        kw;
                                    double* dst = o + (static_cast<std::size_t>(z) * h + y) * wd;
                                    for (int xx = 0; xx < wd; ++xx) dst[xx] += wv * src[xx];
                                }
                        }
        }
    }

    out->backprop = [out, x, w, b, n, cin, cout, d, h, wd, pd, ph, pw, sp] {
        std::vector<double> padded, gpad;
        for (int s = 0; s < n; ++s) {
            if (w->requires_grad)
                pad_sample(x->value.data() + static_cast<std::size_t>(s) * cin * sp, cin, d, h, wd,
                           padded);
            if (x->requires_grad)
                gpad.assign(static_cast<std::size_t>(cin) * pd * ph * pw, 0.0);
            for (int co = 0; co < cout; ++co) {
                const double* g = out->grad.data() + (static_cast<std::size_t>(s) * cout + co) * sp;
                if (b->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < sp; ++i) acc += g[i];
                    b->grad[static_cast<std::size_t>(co)] += acc;
                }
                for (int ci = 0; ci < cin; ++ci)
                    for (int kd = 0; kd < 3; ++kd)
                        for (int kh = 0; kh < 3; ++kh)
                            for (int kw = 0; kw < 3; ++kw) {
                                std::size_t wi =
                                    (((static_cast<std::size_t>(co) * cin + ci) * 3 + kd) * 3 + kh) *
                                        3 +
                                    kw;
                                double wv = w->value[wi];
                                double wacc = 0.0;
                                for (int z = 0; z < d; ++z)
                                    for (int y = 0; y < h; ++y) {
                                        std::size_t poff =
                                            ((static_cast<std::size_t>(ci) * pd + z + kd) * ph + y +
                                             kh) *
                                                pw +
                                            kw;
                                        const double* gr =
                                            g + (static_cast<std::size_t>(z) * h + y) * wd;
                                        if (x->requires_grad) {
                                            double* gp = gpad.data() + poff;
                                            for (int xx = 0; xx < wd; ++xx)
                                                gp[xx] += wv * gr[xx];
                                        }
                                        if (w->requires_grad) {
                                            const double* pv = padded.data() + poff;
                                            for (int xx = 0; xx < wd; ++xx)
                                                wacc += pv[xx] * gr[xx];
                                        }
                                    }
                                if (w->requires_grad) w->grad[wi] += wacc;
                            }
            }
            if (x->requires_grad) {
                double* gx = x->grad.data() + static_cast<std::size_t>(s) * cin * sp;
                for (int ci = 0; ci < cin; ++ci)
                    for (int z = 0; z < d; ++z)
                        for (int y = 0; y < h; ++y) {
                            const double* src =
                                gpad.data() +
                                ((static_cast<std::size_t>(ci) * pd + z + 1) * ph + y + 1) * pw + 1;
                            double* dst = gx + ((static_cast<std::size_t>(ci) * d + z) * h + y) * wd;
                            for (int xx = 0; xx < wd; ++xx) dst[xx] += src[xx];
                        }
            }
        }
    };
    return out;
}

Node* conv1x1(Tape& t, Node* x, Node* w, Node* b) {
    require(x->shape.rank() >= 3, "conv1x1: input must be (N,C,...), got " + x->shape.str());
    require(w->shape.rank() == 2 && w->shape[1] == x->shape[1],
            "conv1x1: weight must be (Cout,Cin)");
    require(b->shape == Shape{w->shape[0]}, "conv1x1: bias must be (Cout)");
    int n = x->shape[0], cin = x->shape[1], cout = w->shape[0];
    std::size_t sp = spatial_size(x->shape);

    Shape oshape = x->shape;
    oshape.dims[1] = cout;
    Node* out = t.make(oshape, {x, w, b});
    for (int s = 0; s < n; ++s)
        for (int co = 0; co < cout; ++co) {
            double* o = out->value.data() + (static_cast<std::size_t>(s) * cout + co) * sp;
            std::fill_n(o, sp, b->value[static_cast<std::size_t>(co)]);
            for (int ci = 0; ci < cin; ++ci) {
                double wv = w->value[static_cast<std::size_t>(co) * cin + ci];
                const double* xv = x->value.data() + (static_cast<std::size_t>(s) * cin + ci) * sp;
                for (std::size_t i = 0; i < sp; ++i) o[i] += wv * xv[i];
            }
        }
    out->backprop = [out, x, w, b, n, cin, cout, sp] {
        for (int s = 0; s < n; ++s)
            for (int co = 0; co < cout; ++co) {
                const double* g = out->grad.data() + (static_cast<std::size_t>(s) * cout + co) * sp;
                if (b->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < sp; ++i) acc += g[i];
                    b->grad[static_cast<std::size_t>(co)] += acc;
                }
                for (int ci = 0; ci < cin; ++ci) {
                    std::size_t xoff = (static_cast<std::size_t>(s) * cin + ci) * sp;
                    if (x->requires_grad) {
                        double wv = w->value[static_cast<std::size_t>(co) * cin + ci];
                        for (std::size_t i = 0; i < sp; ++i) x->grad[xoff + i] += wv * g[i];
                    }
                    if (w->requires_grad) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < sp; ++i) acc += x->value[xoff + i] * g[i];
                        w->grad[static_cast<std::size_t>(co) * cin + ci] += acc;
                    }
                }
            }
    };
    return out;
}

Node* groupnorm(Tape& t, Node* x, Node* gamma, Node* beta, int groups) {
    require(x->shape.rank() >= 3, "groupnorm: input must be (N,C,...), got " + x->shape.str());
    int n = x->shape[0], c = x->shape[1];
    require(groups >= 1 && c % groups == 0, "groupnorm: channels not divisible by groups");
    require(gamma->shape == Shape{c} && beta->shape == Shape{c},
            "groupnorm: affine parameters must be (C)");
    constexpr double kEps = 1e-5;
    int cpg = c / groups;
    std::size_t sp = spatial_size(x->shape);
    std::size_t m = static_cast<std::size_t>(cpg) * sp;

    Node* out = t.make(x->shape, {x, gamma, beta});
    auto xhat = std::make_shared<std::vector<double>>(x->value.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * groups);
    for (int s = 0; s < n; ++s)
        for (int g = 0; g < groups; ++g) {
            std::size_t base = (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(g) * cpg) * sp;
            double mean = 0.0;
            for (std::size_t i = 0; i < m; ++i) mean += x->value[base + i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                double d = x->value[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double inv = 1.0 / std::sqrt(var + kEps);
            (*inv_std)[static_cast<std::size_t>(s) * groups + g] = inv;
            for (std::size_t i = 0; i < m; ++i) {
                double xh = (x->value[base + i] - mean) * inv;
                (*xhat)[base + i] = xh;
                int ch = g * cpg + static_cast<int>(i / sp);
                out->value[base + i] = gamma->value[static_cast<std::size_t>(ch)] * xh +
                                       beta->value[static_cast<std::size_t>(ch)];
            }
        }

    out->backprop = [out, x, gamma, beta, n, c, groups, cpg, sp, m, xhat, inv_std] {
        for (int s = 0; s < n; ++s)
            for (int g = 0; g < groups; ++g) {
                std::size_t base =
                    (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(g) * cpg) * sp;
                if (gamma->requires_grad || beta->requires_grad)
                    for (std::size_t i = 0; i < m; ++i) {
                        int ch = g * cpg + static_cast<int>(i / sp);
                        double go = out->grad[base + i];
                        if (gamma->requires_grad)
                            gamma->grad[static_cast<std::size_t>(ch)] += go * (*xhat)[base + i];
                        if (beta->requires_grad) beta->grad[static_cast<std::size_t>(ch)] += go;
                    }
                if (!x->requires_grad) continue;
                double mh = 0.0, mhx = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    int ch = g * cpg + static_cast<int>(i / sp);
                    double hval = out->grad[base + i] * gamma->value[static_cast<std::size_t>(ch)];
                    mh += hval;
                    mhx += hval * (*xhat)[base + i];
                }
                mh /= static_cast<double>(m);
                mhx /= static_cast<double>(m);
                double inv = (*inv_std)[static_cast<std::size_t>(s) * groups + g];
                for (std::size_t i = 0; i < m; ++i) {
                    int ch = g * cpg + static_cast<int>(i / sp);
                    double hval = out->grad[base + i] * gamma->value[static_cast<std::size_t>(ch)];
                    x->grad[base + i] += inv * (hval - mh - (*xhat)[base + i] * mhx);
                }
            }
    };
    return out;
}

Node* avgpool2(Tape& t, Node* x) {
    require(x->shape.rank() == 5, "avgpool2: input must be (N,C,D,H,W)");
    int n = x->shape[0], c = x->shape[1], d = x->shape[2], h = x->shape[3], w = x->shape[4];
    require(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "avgpool2: spatial dims must be even");
    int od = d / 2, oh = h / 2, ow = w / 2;
    Node* out = t.make(Shape{n, c, od, oh, ow}, {x});
    auto in_at = [&](int s, int ci, int z, int y, int xx) {
        return x->value[(((static_cast<std::size_t>(s) * c + ci) * d + z) * h + y) * w + xx];
    };
    for (int s = 0; s < n; ++s)
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        double acc = 0.0;
                        for (int a = 0; a < 2; ++a)
                            for (int b2 = 0; b2 < 2; ++b2)
                                for (int e = 0; e < 2; ++e)
                                    acc += in_at(s, ci, 2 * z + a, 2 * y + b2, 2 * xx + e);
                        out->value[(((static_cast<std::size_t>(s) * c + ci) * od + z) * oh + y) * ow +
                                   xx] = acc / 8.0;
                    }
    out->backprop = [out, x, n, c, d, h, w, od, oh, ow] {
        if (!x->requires_grad) return;
        for (int s = 0; s < n; ++s)
            for (int ci = 0; ci < c; ++ci)
                for (int z = 0; z < od; ++z)
                    for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx) {
                            double g = out->grad[(((static_cast<std::size_t>(s) * c + ci) * od + z) *
                                                      oh +
                                                  y) *
                                                     ow +
                                                 xx] /
                                       8.0;
                            for (int a = 0; a < 2; ++a)
                                for (int b2 = 0; b2 < 2; ++b2)
                                    for (int e = 0; e < 2; ++e)
                                        x->grad[(((static_cast<std::size_t>(s) * c + ci) * d + 2 * z +
                                                  a) *
                                                     h +
                                                 2 * y + b2) *
                                                    w +
                                                2 * xx + e] += g;
                        }
    };
    return out;
}

Node* upsample_nearest2(Tape& t, Node* x) {
    require(x->shape.rank() == 5, "upsample_nearest2: input must be (N,C,D,H,W)");
    int n = x->shape[0], c = x->shape[1], d = x->shape[2], h = x->shape[3], w = x->shape[4];
    int od = d * 2, oh = h * 2, ow = w * 2;
    Node* out = t.make(Shape{n, c, od, oh, ow}, {x});
    for (int s = 0; s < n; ++s)
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx)
                        out->value[(((static_cast<std::size_t>(s) * c + ci) * od + z) * oh + y) * ow +
                                   xx] =
                            x->value[(((static_cast<std::size_t>(s) * c + ci) * d + z / 2) * h +
                                      y / 2) *
                                         w +
                                     xx / 2];
    out->backprop = [out, x, n, c, d, h, w, od, oh, ow] {
        if (!x->requires_grad) return;
        for (int s = 0; s < n; ++s)
            for (int ci = 0; ci < c; ++ci)
                for (int z = 0; z < od; ++z)
                    for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx)
                            x->grad[(((static_cast<std::size_t>(s) * c + ci) * d + z / 2) * h +
                                     y / 2) *
                                        w +
                                    xx / 2] +=
                                out->grad[(((static_cast<std::size_t>(s) * c + ci) * od + z) * oh +
                                           y) *
                                              ow +
                                          xx];
    };
    return out;
}

Node* concat_channels(Tape& t, Node* a, Node* b) {
    require(a->shape.rank() == b->shape.rank() && a->shape.rank() >= 3,
            "concat_channels: rank mismatch");
    for (int i = 0; i < a->shape.rank(); ++i)
        if (i != 1)
            require(a->shape[i] == b->shape[i], "concat_channels: non-channel dims must match");
    int n = a->shape[0], ca = a->shape[1], cb = b->shape[1];
    std::size_t sp = spatial_size(a->shape);
    Shape oshape = a->shape;
    oshape.dims[1] = ca + cb;
    Node* out = t.make(oshape, {a, b});
    for (int s = 0; s < n; ++s) {
        std::copy_n(a->value.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * ca * sp),
                    static_cast<std::size_t>(ca) * sp,
                    out->value.begin() +
                        static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * (ca + cb) * sp));
        std::copy_n(b->value.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * cb * sp),
                    static_cast<std::size_t>(cb) * sp,
                    out->value.begin() +
                        static_cast<std::ptrdiff_t>(
                            (static_cast<std::size_t>(s) * (ca + cb) + ca) * sp));
    }
    out->backprop = [out, a, b, n, ca, cb, sp] {
        for (int s = 0; s < n; ++s) {
            std::size_t obase = static_cast<std::size_t>(s) * (ca + cb) * sp;
            if (a->requires_grad) {
                std::size_t abase = static_cast<std::size_t>(s) * ca * sp;
                for (std::size_t i = 0; i < static_cast<std::size_t>(ca) * sp; ++i)
                    a->grad[abase + i] += out->grad[obase + i];
            }
            if (b->requires_grad) {
                std::size_t bbase = static_cast<std::size_t>(s) * cb * sp;
                for (std::size_t i = 0; i < static_cast<std::size_t>(cb) * sp; ++i)
                    b->grad[bbase + i] += out->grad[obase + static_cast<std::size_t>(ca) * sp + i];
            }
        }
    };
    return out;
}

Node* slice_channels(Tape& t, Node* x, int from, int count) {
    require(x->shape.rank() >= 3, "slice_channels: input must be (N,C,...)");
    int n = x->shape[0], c = x->shape[1];
    require(from >= 0 && count >= 1 && from + count <= c,
            "slice_channels: range [" + std::to_string(from) + "," +
                std::to_string(from + count) + ") outside " + std::to_string(c) + " channels");
    std::size_t sp = spatial_size(x->shape);
    Shape oshape = x->shape;
    oshape.dims[1] = count;
    Node* out = t.make(oshape, {x});
    for (int s = 0; s < n; ++s)
        std::copy_n(x->value.begin() +
                        static_cast<std::ptrdiff_t>((static_cast<std::size_t>(s) * c + from) * sp),
                    static_cast<std::size_t>(count) * sp,
                    out->value.begin() +
                        static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * count * sp));
    out->backprop = [out, x, n, c, from, count, sp] {
        if (!x->requires_grad) return;
        for (int s = 0; s < n; ++s) {
            std::size_t xbase = (static_cast<std::size_t>(s) * c + from) * sp;
            std::size_t obase = static_cast<std::size_t>(s) * count * sp;
            for (std::size_t i = 0; i < static_cast<std::size_t>(count) * sp; ++i)
                x->grad[xbase + i] += out->grad[obase + i];
        }
    };
    return out;
}

Node* add_channel_vec(Tape& t, Node* x, Node* e) {
    require(x->shape.rank() >= 3, "add_channel_vec: input must be (N,C,...)");
    require(e->shape == Shape({x->shape[0], x->shape[1]}),
            "add_channel_vec: embedding must be (N,C), got " + e->shape.str());
    int n = x->shape[0], c = x->shape[1];
    std::size_t sp = spatial_size(x->shape);
    Node* out = t.make(x->shape, {x, e});
    for (int s = 0; s < n; ++s)
        for (int ci = 0; ci < c; ++ci) {
            double ev = e->value[static_cast<std::size_t>(s) * c + ci];
            std::size_t base = (static_cast<std::size_t>(s) * c + ci) * sp;
            for (std::size_t i = 0; i < sp; ++i) out->value[base + i] = x->value[base + i] + ev;
        }
    out->backprop = [out, x, e, n, c, sp] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
        if (e->requires_grad)
            for (int s = 0; s < n; ++s)
                for (int ci = 0; ci < c; ++ci) {
                    std::size_t base = (static_cast<std::size_t>(s) * c + ci) * sp;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < sp; ++i) acc += out->grad[base + i];
                    e->grad[static_cast<std::size_t>(s) * c + ci] += acc;
                }
    };
    return out;
}

Node* reshape(Tape& t, Node* x, Shape shape) {
    require(shape.numel() == x->value.size(),
            "reshape: element count mismatch " + x->shape.str() + " -> " + shape.str());
    Node* out = t.make(std::move(shape), {x});
    out->value = x->value;
    out->backprop = [out, x] {
        if (!x->requires_grad) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
    };
    return out;
}

Node* attention(Tape& t, Node* q, Node* k, Node* v) {
    require(q->shape.rank() == 3 && q->shape == k->shape && q->shape == v->shape,
            "attention: q,k,v must share shape (N,C,S)");
    int n = q->shape[0], c = q->shape[1], sdim = q->shape[2];
    double scal = 1.0 / std::sqrt(static_cast<double>(c));
    std::size_t s2 = static_cast<std::size_t>(sdim) * sdim;

    Node* out = t.make(q->shape, {q, k, v});
    auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * s2);
    for (int s = 0; s < n; ++s) {
        const double* qv = q->value.data() + static_cast<std::size_t>(s) * c * sdim;
        const double* kv = k->value.data() + static_cast<std::size_t>(s) * c * sdim;
        const double* vv = v->value.data() + static_cast<std::size_t>(s) * c * sdim;
        double* att = weights->data() + static_cast<std::size_t>(s) * s2;
        for (int i = 0; i < sdim; ++i) {
            double row_max = -1e300;
            for (int j = 0; j < sdim; ++j) {
                double sc = 0.0;
                for (int ci = 0; ci < c; ++ci)
                    sc += qv[static_cast<std::size_t>(ci) * sdim + i] *
                          kv[static_cast<std::size_t>(ci) * sdim + j];
                sc *= scal;
                att[static_cast<std::size_t>(i) * sdim + j] = sc;
                row_max = std::max(row_max, sc);
            }
            double denom = 0.0;
            for (int j = 0; j < sdim; ++j) {
                double ev = std::exp(att[static_cast<std::size_t>(i) * sdim + j] - row_max);
                att[static_cast<std::size_t>(i) * sdim + j] = ev;
                denom += ev;
            }
            for (int j = 0; j < sdim; ++j) att[static_cast<std::size_t>(i) * sdim + j] /= denom;
        }
        double* o = out->value.data() + static_cast<std::size_t>(s) * c * sdim;
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < sdim; ++i) {
                double acc = 0.0;
                for (int j = 0; j < sdim; ++j)
                    acc += att[static_cast<std::size_t>(i) * sdim + j] *
                           vv[static_cast<std::size_t>(ci) * sdim + j];
                o[static_cast<std::size_t>(ci) * sdim + i] = acc;
            }
    }

    out->backprop = [out, q, k, v, n, c, sdim, scal, s2, weights] {
        std::vector<double> datt(s2), dscore(s2);
        for (int s = 0; s < n; ++s) {
            const double* att = weights->data() + static_cast<std::size_t>(s) * s2;
            const double* g = out->grad.data() + static_cast<std::size_t>(s) * c * sdim;
            const double* qv = q->value.data() + static_cast<std::size_t>(s) * c * sdim;
            const double* kv = k->value.data() + static_cast<std::size_t>(s) * c * sdim;
            const double* vv = v->value.data() + static_cast<std::size_t>(s) * c * sdim;
            if (v->requires_grad) {
                double* gv = v->grad.data() + static_cast<std::size_t>(s) * c * sdim;
                for (int ci = 0; ci < c; ++ci)
                    for (int j = 0; j < sdim; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < sdim; ++i)
                            acc += att[static_cast<std::size_t>(i) * sdim + j] *
                                   g[static_cast<std::size_t>(ci) * sdim + i];
                        gv[static_cast<std::size_t>(ci) * sdim + j] += acc;
                    }
            }
            if (!q->requires_grad && !k->requires_grad) continue;
            for (int i = 0; i < sdim; ++i)
                for (int j = 0; j < sdim; ++j) {
                    double acc = 0.0;
                    for (int ci = 0; ci < c; ++ci)
                        acc += g[static_cast<std::size_t>(ci) * sdim + i] *
                               vv[static_cast<std::size_t>(ci) * sdim + j];
                    datt[static_cast<std::size_t>(i) * sdim + j] = acc;
                }
            for (int i = 0; i < sdim; ++i) {
                double dot = 0.0;
                for (int j = 0; j < sdim; ++j)
                    dot += att[static_cast<std::size_t>(i) * sdim + j] *
                           datt[static_cast<std::size_t>(i) * sdim + j];
                for (int j = 0; j < sdim; ++j)
                    dscore[static_cast<std::size_t>(i) * sdim + j] =
                        att[static_cast<std::size_t>(i) * sdim + j] *
                        (datt[static_cast<std::size_t>(i) * sdim + j] - dot);
            }
            if (q->requires_grad) {
                double* gq = q->grad.data() + static_cast<std::size_t>(s) * c * sdim;
                for (int ci = 0; ci < c; ++ci)
                    for (int i = 0; i < sdim; ++i) {
                        double acc = 0.0;
                        for (int j = 0; j < sdim; ++j)
                            acc += dscore[static_cast<std::size_t>(i) * sdim + j] *
                                   kv[static_cast<std::size_t>(ci) * sdim + j];
                        gq[static_cast<std::size_t>(ci) * sdim + i] += scal * acc;
                    }
            }
            if (k->requires_grad) {
                double* gk = k->grad.data() + static_cast<std::size_t>(s) * c * sdim;
                for (int ci = 0; ci < c; ++ci)
                    for (int j = 0; j < sdim; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < sdim; ++i)
                            acc += dscore[static_cast<std::size_t>(i) * sdim + j] *
                                   qv[static_cast<std::size_t>(ci) * sdim + i];
                        gk[static_cast<std::size_t>(ci) * sdim + j] += scal * acc;
                    }
            }
        }
    };
    return out;
}

}  // namespace voxdiff::nn
