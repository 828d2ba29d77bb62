#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "depthc/errors.hpp"

namespace depthc {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);  // validates all dims >= 1
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit floats. Copies are shallow: they share
// the underlying buffer, and the buffer address is the tensor's identity on
// a Tape. Tensors are not mutated after construction except by an optimizer
// that owns them exclusively (mutable_data).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    // U(lo, hi) entries drawn from rng in row-major order.
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);

    bool defined() const { return block_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int i) const;
    int64_t size() const;  // element count
    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();
    double operator[](int64_t i) const { return data()[static_cast<size_t>(i)]; }
    double value() const;  // sole element of a 1-element tensor

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    // Identity used by Tape/GradientStore.
    const void* id() const { return block_.get(); }

private:
    struct Block {
        Shape shape;
        std::vector<double> values;
        bool requires_grad = false;
    };
    std::shared_ptr<Block> block_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// Gradients produced by one backward pass, keyed by tensor identity.
class GradientStore {
public:
    bool has(const Tensor& t) const;
    const std::vector<double>& grad(const Tensor& t) const;  // LookupError if absent
    Tensor grad_tensor(const Tensor& t) const;

private:
    friend class Tape;
    struct Entry {
        Tensor ref;
        Shape shape;
        std::vector<double> values;
    };
    std::unordered_map<const void*, Entry> grads_;
};

// Records every operation applied through it and replays them in reverse to
// accumulate gradients. Single writer: one tape builds one graph on one
// thread. Distinct tapes are fully independent.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
                  int stride, int padding);
    Tensor softmax_rows(const Tensor& x);
    Tensor relu(const Tensor& x);
    Tensor sigmoid(const Tensor& x);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& x, double factor);
    // s is a 1-element tensor; both s and x receive gradients.
    Tensor scale_by(const Tensor& s, const Tensor& x);
    // x: [C,H,W], s: [C]; out[c,:,:] = s[c] * x[c,:,:].
    Tensor channel_scale(const Tensor& x, const Tensor& s);
    Tensor concat_channels(const std::vector<Tensor>& xs);  // rank-3, same H,W
    Tensor concat_vec(const std::vector<Tensor>& xs);       // rank-1
    Tensor reshape(const Tensor& x, Shape shape);
    Tensor transpose2d(const Tensor& x);
    Tensor sum(const Tensor& x);           // -> [1]
    Tensor channel_mean(const Tensor& x);  // [C,H,W] -> [C]
    Tensor channel_var(const Tensor& x);   // population variance, [C,H,W] -> [C]
    Tensor upsample2_nearest(const Tensor& x);  // [C,H,W] -> [C,2H,2W]
    // Inverted dropout; identity when rate == 0. Mask drawn from rng.
    Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

    // Registers t as a leaf so it shows up in backward() results even if no
    // op consumed it.
    int watch(const Tensor& t);

    // loss must be a 1-element tensor. Gradients are produced for every
    // requires_grad tensor this tape has seen; tensors untouched by any op
    // get zero buffers.
    GradientStore backward(const Tensor& loss);

    bool recording() const { return recording_; }
    size_t node_count() const { return nodes_.size(); }

private:
    class BackwardPass;
    using BackFn = std::function<void(const std::vector<double>& gout, BackwardPass& bp)>;

    struct Node {
        // Shared ownership pins the block so its address cannot be reused
        // by a later tensor while this tape is alive; out.id() stays a
        // unique key for the tape's lifetime.
        Tensor out;
        bool requires_grad = false;  // leaf flag
        bool grad_needed = false;    // some requires_grad leaf below
        std::vector<int> parents;
        BackFn back;  // empty for leaves
    };

    class BackwardPass {
    public:
        BackwardPass(const Tape& tape, size_t n) : tape_(tape), bufs_(n) {}
        std::vector<double>& buf(int node);
        bool has(int node) const { return !bufs_[static_cast<size_t>(node)].empty(); }
        bool needed(int node) const;

    private:
        const Tape& tape_;
        std::vector<std::vector<double>> bufs_;
    };

    int ensure_leaf(const Tensor& t);
    int node_of(const Tensor& t) const;  // -1 if unseen
    Tensor result(Shape shape, std::vector<double> values, std::vector<int> parents,
                  BackFn back);
    Tensor result(Tensor out, std::vector<int> parents, BackFn back);

    bool recording_;
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> index_;
};

}  // namespace depthc
