#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "biattn/tensor.hpp"

namespace biattn {

class Graph;

/// Handle to a value recorded in a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// vector is already topologically sorted; backward walks it in reverse.
///
/// Parameters are bound by pointer and must outlive the graph. Their
/// gradients are accumulated into Tensor::grad() when backward() runs.
/// References returned by value() stay valid for the graph's lifetime.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf bound to an external tensor. Gradients flow to it iff
    /// tensor.requires_grad().
    Var param(Tensor& tensor) {
        Node n;
        n.op = "param";
        n.external = &tensor;
        n.requires_grad = tensor.requires_grad();
        n.sink = tensor.requires_grad() ? &tensor : nullptr;
        return push(std::move(n));
    }

    /// Leaf that owns its value and never receives gradients.
    Var constant(Tensor value) {
        Node n;
        n.op = "constant";
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// Appends the result of an operation. The backward function is kept only
    /// when some input needs a gradient.
    Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        for (std::size_t in : inputs) {
            if (in >= nodes_.size()) throw GraphError(std::string("input id out of range in ") + op);
            n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
        }
        n.inputs = std::move(inputs);
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_.at(id);
        return n.external ? *n.external : n.value;
    }

    bool needs_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient buffer of a node, allocated as zeros on first access.
    std::vector<double>& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
        return n.grad;
    }

    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void backward(Var output) {
        if (nodes_.empty()) throw GraphError("backward on an empty graph");
        if (output.graph != this) throw GraphError("backward on a value from another graph");
        if (value(output.id).numel() != 1) {
            throw GraphError("backward requires a scalar output, got shape " +
                             to_string(value(output.id).shape()));
        }
        backward_order_.clear();
        for (Node& n : nodes_) n.grad.clear();
        grad(output.id)[0] = 1.0;
        for (std::size_t id = output.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty()) continue;
            backward_order_.push_back(id);
            if (n.backward) n.backward(*this, id);
            if (n.sink) {
                auto& dst = n.sink->grad();
                if (dst.size() != n.grad.size()) dst.assign(n.grad.size(), 0.0);
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
            }
        }
    }

    /// When enabled, piecewise-linear ops (relu, maxpool) fold their discrete
    /// branch decisions into kink_signature(). Two evaluations with equal
    /// signatures lie on the same smooth piece of the program.
    void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
    bool tracking_kinks() const noexcept { return track_kinks_; }
    void mix_kink(std::uint64_t v) noexcept {
        kink_signature_ ^= v + 0x9e3779b97f4a7c15ULL + (kink_signature_ << 6) + (kink_signature_ >> 2);
    }
    std::uint64_t kink_signature() const noexcept { return kink_signature_; }

    /// Node ids visited by the last backward(), in visit order.
    const std::vector<std::size_t>& backward_order() const noexcept { return backward_order_; }

private:
    struct Node {
        const char* op = "";
        Tensor value;
        const Tensor* external = nullptr;
        Tensor* sink = nullptr;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;
    std::vector<std::size_t> backward_order_;
    bool track_kinks_ = false;
    std::uint64_t kink_signature_ = 0;
};

inline const Tensor& Var::value() const {
    if (!graph) throw GraphError("use of an unbound Var");
    return graph->value(id);
}

}  // namespace biattn
