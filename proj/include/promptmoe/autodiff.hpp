#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "promptmoe/param.hpp"
#include "promptmoe/tensor.hpp"

// Tape-free reverse-mode differentiation over small dense tensors. Each op
// records its inputs and a backward closure; `backward` walks the graph in
// reverse topological order and finally accumulates leaf gradients into the
// ParamGroups they were bound from.
namespace pmoe::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows back
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;
    ParamGroup* param = nullptr;

    // Gradient buffer, zero-initialised on first use.
    Tensor& grad_buffer();
    void accumulate(const Tensor& g);
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }
    double item() const;
    // Gradient after backward(); zero tensor if nothing reached this node.
    Tensor grad() const;

    const NodePtr& node() const noexcept { return node_; }

private:
    NodePtr node_;
};

// Disables graph recording for its lifetime (inference paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

Var constant(Tensor value);
// Differentiable input that is not bound to a parameter (used by tests and
// the gradient checker to probe arbitrary functions).
Var variable(Tensor value);
// Binds a parameter: frozen groups (or no-grad mode) yield a constant.
Var leaf(ParamGroup& param);

// Builds a result node. `fn` is only attached when some input requires grad;
// it reads self.grad and accumulates into self.inputs[i]->grad_buffer().
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a · bᵀ
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double c);
Var add_row(const Var& a, const Var& bias);  // bias broadcast over rows
Var relu(const Var& a);
Var gelu(const Var& a);
// Softmax along the last axis of a rank-1/rank-2 tensor, at temperature t.
Var softmax_rows(const Var& x, double temperature = 1.0);
// Divides each row by its L2 norm; zero rows raise EvaluationError.
Var row_normalize(const Var& x);
Var mean_rows(const Var& x);  // [m×n] -> [n]
Var sum(const Var& x);        // -> [1]
Var mean(const Var& x);       // -> [1]
Var max_all(const Var& x);    // -> [1], gradient to the first maximiser
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var column(const Var& x, std::size_t c);  // [m×n] -> [m]
Var reshape(const Var& x, Shape shape);
Var select(const Var& x, const std::vector<std::size_t>& indices);  // rank-1 gather
// Σᵢ weights[i] · parts[i]; weights is rank-1 of length parts.size().
Var weighted_sum(const Var& weights, const std::vector<Var>& parts);

struct TopKVar {
    std::vector<std::size_t> indices;
    Var gates;
};

// Sparse gating: gates are the softmax over the k selected logits, so only
// the selected logits receive gradient.
TopKVar topk_select(const Var& logits, std::size_t k);

}  // namespace pmoe::ad
