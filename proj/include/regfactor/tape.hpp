#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "regfactor/tensor.hpp"

namespace regfactor {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    int64_t dim(size_t axis) const { return value().dim(axis); }
    size_t numel() const { return value().numel(); }
    double item() const { return value().item(); }

    Tape& tape() const { return *tape_; }
    size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    size_t id_ = 0;
};

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in execution order, so every operand precedes its
/// result. backward() walks the record once in reverse. A fresh tape is
/// built for every forward pass; leaves created with parameter() reference
/// external tensors that must outlive the tape, and their gradients are
/// accumulated into those tensors (repeated backward calls add up).
class Tape {
public:
    struct Node;
    // Receives the finished output node and its inputs. Implementations add
    // into in[i]->grad only when in[i]->needs_grad.
    using BackwardFn = std::function<void(const Node& out, std::span<Node* const> in)>;

    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor* leaf = nullptr;
        Buffer grad;
        bool needs_grad = false;
        std::string_view op;
        std::vector<size_t> inputs;
        BackwardFn backward;

        const Tensor& value() const { return external ? *external : owned; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Value that never receives a gradient.
    Var constant(Tensor value);

    // Leaf bound to `tensor`; repeated calls for the same tensor return the same Var.
    // Gradients flow only when tensor.requires_grad() is set.
    Var parameter(Tensor& tensor);

    // Appends an operation result. Throws NumericError if `value` is not finite.
    Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    // Reverse pass from a single-element loss. Throws ContractError otherwise.
    void backward(const Var& loss);

    // Gradient of an interior node after backward(); empty if it did not need one.
    std::span<const double> grad(const Var& v) const { return nodes_[v.id()]->grad; }

    const Node& node(size_t id) const { return *nodes_[id]; }
    size_t size() const { return nodes_.size(); }
    std::vector<std::string_view> op_names() const;

private:
    std::vector<std::unique_ptr<Node>> nodes_;
    std::unordered_map<const Tensor*, size_t> leaf_ids_;
};

}  // namespace regfactor
