#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfm/errors.hpp"

namespace cfm {

// Dense NCHW shape. Row-major within each image plane.
struct Shape4 {
    std::int64_t n = 0;
    std::int64_t c = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    std::int64_t numel() const { return n * c * h * w; }

    bool operator==(const Shape4&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

inline Shape4 scalar_shape() { return Shape4{1, 1, 1, 1}; }

namespace detail {

// Thread-local autograd switch. When off, ops compute values only and the
// result is detached from its inputs.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename T>
struct Node {
    Shape4 shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first backward contribution
    bool requires_grad = false;  // leaf flag
    bool needs_grad = false;     // leaf flag or any parent needs it

    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Node(Shape4 s, std::vector<T> d, bool req)
        : shape(s), data(std::move(d)), requires_grad(req), needs_grad(req) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape.str());
        }
    }

    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

}  // namespace detail

// Disables graph recording for the enclosing scope (inference / oracles).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// Value-semantic handle to a node in the computation record. Copies alias the
// same storage. A tensor's data is written once by its producing op; the
// record formed by parent links is replayed in reverse by backward().
template <typename T>
class Tensor {
  public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape4 s, bool requires_grad = false) {
        return Tensor(std::make_shared<detail::Node<T>>(
            s, std::vector<T>(static_cast<std::size_t>(s.numel()), T(0)), requires_grad));
    }

    static Tensor full(Shape4 s, T value, bool requires_grad = false) {
        return Tensor(std::make_shared<detail::Node<T>>(
            s, std::vector<T>(static_cast<std::size_t>(s.numel()), value), requires_grad));
    }

    static Tensor from_data(Shape4 s, std::vector<T> d, bool requires_grad = false) {
        return Tensor(std::make_shared<detail::Node<T>>(s, std::move(d), requires_grad));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->shape.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool needs_grad() const { return node_->needs_grad; }

    std::span<T> data() { return {node_->data.data(), node_->data.size()}; }
    std::span<const T> data() const { return {node_->data.data(), node_->data.size()}; }

    // Gradient buffer; empty span until backward has touched this tensor.
    std::span<T> grad() { return {node_->grad.data(), node_->grad.size()}; }
    std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
    bool has_grad() const { return !node_->grad.empty(); }

    T& at(std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) {
        return node_->data[flat(n, c, i, j)];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) const {
        return node_->data[flat(n, c, i, j)];
    }

    T value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar tensor");
        return node_->data[0];
    }

    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
    void drop_grad() { node_->grad.clear(); }

    void ensure_grad() { node_->ensure_grad(); }

    NodePtr node() const { return node_; }
    detail::Node<T>* raw() const { return node_.get(); }

    // Reverse-mode sweep from this scalar. Visits each recorded node exactly
    // once in reverse topological order. Grads accumulate across repeated
    // calls; zero_grad() resets leaves.
    void backward() const {
        if (!defined()) throw ContractError("backward() on an undefined tensor");
        if (numel() != 1) {
            throw ContractError("backward() requires a scalar loss, got shape " + shape().str());
        }
        std::vector<detail::Node<T>*> order = topo_order();
        // Op outputs are transient per sweep; only leaf grads accumulate
        // across repeated backward calls.
        for (detail::Node<T>* nd : order) {
            if (!nd->parents.empty()) nd->grad.clear();
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);

        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node<T>* nd = *it;
            if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
        }
    }

  private:
    std::size_t flat(std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) const {
        const Shape4& s = node_->shape;
        return static_cast<std::size_t>(((n * s.c + c) * s.h + i) * s.w + j);
    }

    std::vector<detail::Node<T>*> topo_order() const {
        std::vector<detail::Node<T>*> order;
        std::unordered_set<detail::Node<T>*> seen;
        // Iterative DFS; child pushed after all parents are done.
        struct Frame {
            detail::Node<T>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({node_.get(), 0});
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                detail::Node<T>* p = f.node->parents[f.next_parent++].get();
                if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
        return order;
    }

    NodePtr node_;
};

namespace detail {

// Shared op plumbing: creates the output node and wires the record when grad
// mode is on and any input participates in differentiation.
template <typename T>
Tensor<T> make_op_output(Shape4 shape, std::vector<T> data,
                         std::vector<std::shared_ptr<Node<T>>> parents,
                         std::function<void(Node<T>&)> backward_fn) {
    auto out = std::make_shared<Node<T>>(shape, std::move(data), false);
    bool track = grad_mode_flag();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p->needs_grad;
        track = any;
    }
    if (track) {
        out->needs_grad = true;
        out->parents = std::move(parents);
        out->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(out);
}

template <typename T>
void accumulate(Node<T>& into, const std::vector<T>& contribution) {
    into.ensure_grad();
    const std::size_t n = contribution.size();
    for (std::size_t i = 0; i < n; ++i) into.grad[i] += contribution[i];
}

}  // namespace detail

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

}  // namespace cfm
