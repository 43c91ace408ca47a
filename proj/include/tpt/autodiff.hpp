#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "tpt/tensor.hpp"

namespace tpt::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Ordered record of differentiable operations.
///
/// Nodes that do not depend on any gradient-requiring leaf carry no backward
/// closure, so forward passes over frozen weights cost no more than plain
/// evaluation. A tape and its vars belong to one thread at a time.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Leaf bound to an external tensor. When the tensor requires grad,
    /// backward() accumulates into its gradient buffer.
    Var leaf(Tensor& tensor);
    /// Non-differentiable leaf borrowing `tensor`; it must outlive the tape.
    Var constant(const Tensor& tensor);
    Var constant(Tensor&& tensor);

    const Tensor& value(Var v) const;
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
    /// Gradient of the last backward() w.r.t. `v`; empty if `v` carries none.
    std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }

    /// Reverse-mode sweep from a scalar. Internal node gradients are reset at
    /// the start of every call; gradients of leaf tensors accumulate across
    /// calls until the caller zeroes them.
    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    /// Ids of nodes in the order their backward closures ran during the
    /// most recent backward().
    const std::vector<std::uint32_t>& last_backward_order() const noexcept {
        return backward_order_;
    }

    // Used by op implementations.
    using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;
    Var push(Tensor value, bool needs_grad, BackwardFn backward);
    std::vector<double>& grad_buffer(std::uint32_t id) { return nodes_[id].grad; }
    const Tensor& value_of(std::uint32_t id) const;

private:
    struct Node {
        const Tensor* borrowed = nullptr;
        Tensor owned;
        Tensor* param = nullptr;
        bool needs_grad = false;
        std::vector<double> grad;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
    std::vector<std::uint32_t> backward_order_;
};

Var matmul(Var a, Var b);
Var transpose(Var x);
Var add(Var a, Var b);
/// Adds `y` to `x`, repeating `y`'s rows down `x` (bias rows, positional tables).
Var add_tiled(Var x, Var y);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
/// Sum of all entries, as a one-element tensor.
Var sum(Var x);
/// Row-wise softmax with max subtraction.
Var softmax_rows(Var x);
/// Natural log with the input clamped below at 1e-12.
Var log(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
/// Divides each row by max(||row||, 1e-12).
Var l2_normalize_rows(Var x);
/// Mean over rows, producing a single row.
Var mean_rows(Var x);
/// Mean over consecutive groups of `block` rows.
Var block_mean_rows(Var x, std::size_t block);
Var select_rows(Var x, std::span<const std::size_t> indices);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);

/// Multi-head scaled dot-product attention over independent blocks of
/// `seq_len` rows. q, k and v are [blocks*seq_len x dim].
Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len,
              bool causal);

} // namespace tpt::ad
