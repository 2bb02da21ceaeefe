#pragma once

// Minimal reverse-mode automatic differentiation over dense float arrays.
//
// A Tape is a computation record rebuilt on every forward pass. Nodes are
// appended in creation order, so inputs always precede their consumers and
// backward() is a single reverse sweep. Each node keeps the closure that
// produced it, which lets replay() recompute the whole record.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace costom::ad {

using Shape = std::vector<int>;

// Buffers start on a fixed alignment so vectorized reductions split the
// same way on every run; with the default allocator the result could
// depend on where the heap placed the block.
using Buffer = std::vector<float, Eigen::aligned_allocator<float>>;

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

/// Dense row-major float array. Vectors have rank 1; most ops are 2-D.
struct Tensor {
    Shape shape;
    Buffer data;

    Tensor() = default;
    explicit Tensor(Shape s, float fill = 0.0f);
    Tensor(Shape s, const std::vector<float>& values);
    Tensor(Shape s, Buffer values);

    static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }
    static Tensor matrix(int rows, int cols, std::initializer_list<float> values);

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const;
    int cols() const;

    float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    std::span<float> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())}; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
    }

    bool all_finite() const;
    bool operator==(const Tensor& other) const = default;
};

/// Raised when an operation's shape or index contract is violated.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using NodeId = std::int32_t;
class Tape;

/// Handle to a node in a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    NodeId id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    bool requires_grad() const;
};

/// Gradients keyed by node id. Nodes outside the backward path are absent.
class GradientMap {
public:
    explicit GradientMap(std::size_t n = 0) : grads_(n), present_(n, false) {}

    bool contains(NodeId id) const { return id >= 0 && static_cast<std::size_t>(id) < present_.size() && present_[id]; }
    bool contains(Var v) const { return contains(v.id); }
    const Tensor& at(NodeId id) const;
    const Tensor& at(Var v) const { return at(v.id); }
    /// Nullptr when the node received no gradient.
    const Tensor* find(Var v) const { return contains(v.id) ? &grads_[v.id] : nullptr; }
    std::size_t count() const;

    Tensor& slot(NodeId id, const Shape& shape);

private:
    std::vector<Tensor> grads_;
    std::vector<bool> present_;
};

using Inputs = std::span<const Tensor* const>;
using ForwardFn = std::function<Tensor(Inputs)>;
// (inputs, output value, output grad, input grad slots; nullptr where no grad is wanted)
using BackwardFn = std::function<void(Inputs, const Tensor&, const Tensor&, std::span<Tensor* const>)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf owning a copy of its value.
    Var leaf(Tensor value, bool requires_grad = false);
    /// Leaf referencing external storage; the tensor must outlive the tape.
    Var param(const Tensor& external, bool requires_grad);
    /// New leaf with the same value that never propagates gradient.
    Var detach(Var v);

    Var record(std::string kind, std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd);

    const Tensor& value(NodeId id) const;
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    const std::string& kind(NodeId id) const { return nodes_[id].kind; }
    const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }
    std::size_t size() const { return nodes_.size(); }

    GradientMap backward(Var loss) const;

    /// Recomputes every node from the leaves in creation order.
    std::vector<Tensor> replay() const;

private:
    struct Node {
        std::string kind;
        std::vector<NodeId> inputs;
        Tensor owned;
        const Tensor* external = nullptr;
        bool requires_grad = false;
        ForwardFn fwd;
        BackwardFn bwd;
    };
    std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);               // [m,k] x [k,n]
Var transpose(Var a);                   // [m,n] -> [n,m]
Var add(Var a, Var b);                  // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                  // elementwise, same shape
Var scale(Var a, float s);
Var add_bias(Var x, Var bias);          // [m,n] + [n]
Var rms_norm(Var x, Var gain, float eps = 1e-5f);  // over the feature axis
Var gelu(Var x);                        // tanh approximation
Var embedding(Var table, std::span<const int> ids);  // [V,d] -> [len(ids), d]
Var softmax_rows(Var x);
/// Masks column j > row i + offset with -inf.
Var causal_mask(Var x, int offset = 0);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, int start, int width);
Var slice_rows(Var x, int start, int count);
/// Rows [start, start + payload.rows) of x replaced by payload.
Var replace_rows(Var x, int start, Var payload);
Var sum(Var x);
Var mean(Var x);

/// Mean over masked rows of -log softmax(logits)[target]. Weights must be >= 0.
Var softmax_cross_entropy(Var logits, std::span<const int> targets, std::span<const float> mask);

}  // namespace costom::ad
