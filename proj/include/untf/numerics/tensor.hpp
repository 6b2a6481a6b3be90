#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "untf/numerics/error.hpp"

namespace untf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const std::string& what) {
    throw ShapeError(std::string(op) + ": " + what);
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible extents " + to_string(a) + " vs " +
                     to_string(b));
}

/// Thread-local switch for graph recording. When disabled, ops produce
/// plain values with no adjoint closure.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Turns recording back on inside a NoGradGuard scope.
class EnableGradGuard {
public:
    EnableGradGuard() : prev_(GradMode::enabled()) { GradMode::set(true); }
    ~EnableGradGuard() { GradMode::set(prev_); }
    EnableGradGuard(const EnableGradGuard&) = delete;
    EnableGradGuard& operator=(const EnableGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> adjoint;

    bool is_leaf() const { return !adjoint; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying node; values
/// are immutable once an op has produced them, the grad buffer is not.
template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            shape_error("tensor", "shape " + to_string(shape) + " holds " +
                                      std::to_string(numel(shape)) + " values, got " +
                                      std::to_string(values.size()));
        for (std::size_t e : shape)
            if (e == 0) shape_error("tensor", "zero extent in " + to_string(shape));
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel(shape);
        return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        const auto n = numel(shape);
        return from(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }
    T item() const {
        if (size() != 1) shape_error("item", "tensor " + to_string(shape()) + " is not a scalar");
        return node_->value[0];
    }

    /// Mutable access for parameter updates. Only valid on leaves.
    std::vector<T>& mutable_values() {
        if (!node_->is_leaf()) throw ValidationError("mutable_values: tensor is not a leaf");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->is_leaf()) throw ValidationError("set_requires_grad: tensor is not a leaf");
        node_->requires_grad = on;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const {
        if (!has_grad()) throw ValidationError("grad: tensor has no gradient buffer");
        return node_->grad;
    }
    std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    /// New leaf sharing no graph history with this tensor.
    Tensor detach() const { return from(shape(), node_->value, false); }

    const char* op_name() const { return node_->op; }
    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Builds an op result. The adjoint is recorded only when graph recording
/// is on and some input requires a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<detail::Node<T>>> inputs,
                      std::function<void(detail::Node<T>&)> adjoint) {
    for (const T& v : value)
        if (!std::isfinite(v)) throw NumericFault(std::string(op) + ": non-finite output");
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    if (GradMode::enabled())
        for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->adjoint = std::move(adjoint);
    }
    return Tensor<T>(std::move(n));
}

/// Reverse pass from a scalar. Interior gradients are rebuilt on every call;
/// leaf gradients accumulate across calls until zero_grad().
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ValidationError("backward: loss must be a scalar, got " + to_string(loss.shape()));
    using N = detail::Node<T>;
    N* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS yields a topological order.
    std::vector<N*> order;
    std::unordered_set<N*> seen;
    std::vector<std::pair<N*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            N* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (N* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    root->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->adjoint(**it);
}

}  // namespace untf
