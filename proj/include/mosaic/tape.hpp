#pragma once

// Reverse-mode gradient tape over a fixed set of tensor operations.
//
// Every operation records its output value plus a backward rule that reads
// input values back from the tape. A node only keeps its backward rule when at
// least one input requires a gradient, so a tape built from constants is a
// plain value cache and records no operations.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic {

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward fn) {
#ifndef NDEBUG
        if (!value.all_finite()) throw NumericError("non-finite value produced by a recorded op");
#endif
        Node n;
        n.value = std::move(value);
        for (const auto& v : inputs) {
            if (v.tape != this) throw std::logic_error("op mixes variables from different tapes");
            n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        }
        if (n.requires_grad) {
            n.backward = std::move(fn);
            ++recorded_;
        }
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
        return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                      std::move(fn));
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

    // Gradient buffer for an input, zero-initialised on first use; nullptr
    // when the input does not need a gradient.
    T* grad_buffer(Var<T> v) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
        return n.grad.data();
    }

    void accumulate(Var<T> v, const Tensor<T>& g) {
        T* buf = grad_buffer(v);
        if (!buf) return;
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }

    void backward(Var<T> root) {
        if (value(root).size() != 1) throw DimensionError("backward() from a non-scalar root needs a seed");
        backward(root, Tensor<T>(value(root).shape(), T{1}));
    }

    // Replays the tape in reverse recorded order from `root`. Gradients of
    // intermediate nodes are released once consumed; leaf gradients stay.
    void backward(Var<T> root, Tensor<T> seed) {
        seed.require_same(value(root), "backward seed");
        for (auto& n : nodes_) n.grad = Tensor<T>();
        if (!nodes_[root.id].requires_grad) return;
        nodes_[root.id].grad = std::move(seed);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            Tensor<T> g = std::move(n.grad);
            n.grad = Tensor<T>();
            n.backward(*this, g);
        }
    }

    // Gradient of a leaf after backward(); zeros when nothing reached it.
    Tensor<T> grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    // Number of operations that carry a backward rule.
    std::size_t recorded_ops() const noexcept { return recorded_; }

    std::size_t value_bytes() const noexcept {
        std::size_t b = 0;
        for (const auto& n : nodes_) b += n.value.size() * sizeof(T);
        return b;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Backward backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    std::deque<Node> nodes_;
    std::size_t recorded_ = 0;
};

}  // namespace mosaic
