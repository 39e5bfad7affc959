#include "regfactor/tape.hpp"

#include <algorithm>

#include "regfactor/errors.hpp"

namespace regfactor {

const Tensor& Var::value() const {
    if (!tape_) throw ContractError("use of an empty Var");
    return tape_->node(id_).value();
}

Var Tape::constant(Tensor value) {
    value.check_finite("constant");
    auto node = std::make_unique<Node>();
    node->owned = std::move(value);
    node->op = "constant";
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor& tensor) {
    if (auto it = leaf_ids_.find(&tensor); it != leaf_ids_.end()) return Var(this, it->second);
    tensor.check_finite("parameter");
    auto node = std::make_unique<Node>();
    node->external = &tensor;
    node->leaf = &tensor;
    node->needs_grad = tensor.requires_grad();
    node->op = "parameter";
    nodes_.push_back(std::move(node));
    leaf_ids_.emplace(&tensor, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    value.check_finite(op);
    auto node = std::make_unique<Node>();
    node->owned = std::move(value);
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
        if (&in.tape() != this) throw ContractError(std::string(op) + ": operand recorded on another tape");
        node->inputs.push_back(in.id());
        node->needs_grad = node->needs_grad || nodes_[in.id()]->needs_grad;
    }
    if (node->needs_grad) node->backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss recorded on another tape");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    const size_t root = loss.id();
    for (size_t i = 0; i <= root; ++i) {
        Node& n = *nodes_[i];
        if (n.needs_grad) {
            n.grad.assign(n.value().numel(), 0.0);
        } else {
            n.grad.clear();
        }
    }
    if (!nodes_[root]->needs_grad) return;
    nodes_[root]->grad[0] = 1.0;

    std::vector<Node*> ins;
    for (size_t i = root + 1; i-- > 0;) {
        Node& n = *nodes_[i];
        if (!n.needs_grad) continue;
        if (n.backward) {
            ins.clear();
            for (size_t id : n.inputs) ins.push_back(nodes_[id].get());
            n.backward(n, ins);
        }
        if (n.leaf) {
            std::span<double> dst = n.leaf->grad();
            for (size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
        }
    }
}

std::vector<std::string_view> Tape::op_names() const {
    std::vector<std::string_view> names;
    names.reserve(nodes_.size());
    for (const auto& n : nodes_) names.push_back(n->op);
    return names;
}

}  // namespace regfactor
