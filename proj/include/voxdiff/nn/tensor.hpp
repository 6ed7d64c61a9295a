#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace voxdiff::nn {

struct Shape {
    std::vector<int> dims;

    Shape() = default;
    Shape(std::initializer_list<int> d) : dims(d) {}
    explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

    std::size_t numel() const {
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
    int operator[](int i) const { return dims[i]; }
    int rank() const { return static_cast<int>(dims.size()); }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

// One value in the recorded computation. Nodes are created and owned by a
// Tape; `backprop` scatters this node's gradient into its inputs' gradients.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<Node*> inputs;
    std::function<void()> backprop;
    int seq = 0;
};

// Persistent named parameter tensor. Lives outside any tape; optimizer state
// is kept alongside so training loops can treat the store as one flat vector.
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

class ParamStore {
public:
    Param& add(const std::string& name, Shape shape);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    int index_of(const std::string& name) const;

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t total_values() const;

    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);

private:
    std::vector<Param> params_;  // insertion order is the canonical order
    std::unordered_map<std::string, int> index_;
};

// Records one forward computation. Backward runs the recorded closures in
// reverse creation order over the subgraph that reaches the loss.
class Tape {
public:
    Node* leaf(Shape shape, std::span<const double> data, bool requires_grad = false);
    Node* constant(Shape shape, double fill);
    // Leaf bound to a store parameter; its gradient is picked up by
    // param_gradients().
    Node* param(ParamStore& store, const std::string& name);

    Node* make(Shape shape, std::vector<Node*> inputs);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients through the
    // recorded graph. Loss must be scalar (numel 1).
    void backward(Node* loss);
    // Same sweep but seeded with an externally computed gradient of some
    // scalar with respect to `node`.
    void backward_from(Node* node, std::span<const double> seed);

    // Gradient of the last backward() with respect to every store parameter,
    // flattened in store order. Parameters never touched by the forward get
    // zeros. A tape may reference several stores (filtered by identity), so
    // stores must outlive the tape at a stable address.
    std::vector<double> param_gradients(const ParamStore& store) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Binding {
        const ParamStore* store;
        int index;
        Node* node;
    };
    std::vector<std::unique_ptr<Node>> nodes_;
    std::vector<Binding> bindings_;
};

// --- elementwise -----------------------------------------------------------
Node* add(Tape& t, Node* a, Node* b);
Node* sub(Tape& t, Node* a, Node* b);
Node* mul(Tape& t, Node* a, Node* b);
Node* scale(Tape& t, Node* a, double s);
Node* silu(Tape& t, Node* a);

// --- reductions ------------------------------------------------------------
Node* sum_all(Tape& t, Node* a);
Node* mean_all(Tape& t, Node* a);

// --- dense -----------------------------------------------------------------
// a: (N,K), b: (K,M) -> (N,M)
Node* matmul(Tape& t, Node* a, Node* b);
// x: (N,M) + row vector b: (M)
Node* add_row(Tape& t, Node* x, Node* b);

// --- convolutional blocks (N,C,D,H,W) -------------------------------------
// w: (Cout,Cin,3,3,3), b: (Cout); stride 1, zero padding 1.
Node* conv3d(Tape& t, Node* x, Node* w, Node* b);
// w: (Cout,Cin), b: (Cout)
Node* conv1x1(Tape& t, Node* x, Node* w, Node* b);
// Normalizes each (sample, channel group) to zero mean / unit variance
// (eps 1e-5), then applies per-channel affine gamma (C), beta (C).
Node* groupnorm(Tape& t, Node* x, Node* gamma, Node* beta, int groups);
// 2x average pooling over D,H,W (all must be even).
Node* avgpool2(Tape& t, Node* x);
// 2x nearest-neighbor upsampling over D,H,W.
Node* upsample_nearest2(Tape& t, Node* x);
Node* concat_channels(Tape& t, Node* a, Node* b);
// Channels [from, from+count) of a (N,C,...) tensor.
Node* slice_channels(Tape& t, Node* x, int from, int count);
// Adds e[n,c] to every spatial location of channel c in sample n.
Node* add_channel_vec(Tape& t, Node* x, Node* e);
// Same data, new shape (element counts must match).
Node* reshape(Tape& t, Node* x, Shape shape);

// Single-head dot-product attention over flattened positions.
// q,k,v: (N,C,S); scores scaled by 1/sqrt(C), softmax over source positions.
Node* attention(Tape& t, Node* q, Node* k, Node* v);

}  // namespace voxdiff::nn
