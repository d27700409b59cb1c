// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a graph node. Every operation that touches
// a tensor requiring gradients records a node that holds its inputs and a
// backward rule; `backward(loss)` linearizes the reachable graph into a Tape
// and replays it in reverse. Scalars are templated so the same graph can run
// in float for training and in double for finite-difference checking.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmmix/error.hpp"

namespace cmmix::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass touches the node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
    const char* op = "leaf";

    T* grad_buffer();  // allocates zeros on first use
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Resets the gradient to zeros (allocating it if needed).
    void zero_grad();
    /// Scalar value of a one-element tensor.
    T item() const;

    /// A new leaf holding a copy of the data, cut from the graph.
    Tensor detach() const;

    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Whether new operations record backward rules (thread-local, on by default).
bool grad_enabled();

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Reverse topological replay list for one loss.
template <typename T>
class Tape {
public:
    /// Records every node reachable from `loss` that requires gradients,
    /// ordered so that inputs precede the operations consuming them.
    static Tape record(const Tensor<T>& loss);

    const std::vector<Node<T>*>& nodes() const { return order_; }
    /// Seeds d(loss)/d(loss) = 1 and runs backward rules in reverse order.
    void run();

private:
    std::vector<Node<T>*> order_;
    Node<T>* loss_ = nullptr;
};

/// Populates `.grad()` of every leaf reachable from the scalar `loss`.
/// Leaf gradients accumulate; call zero_grad() between steps.
template <typename T>
void backward(const Tensor<T>& loss);

// ---- elementwise -----------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
/// x[..., n] + bias[n]; the only rank-mismatched binary operation.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

// ---- reductions ------------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// ---- linear algebra (rank-2) -----------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T without materializing the transpose.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// ---- normalization ---------------------------------------------------------

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// log(softmax(x)) along the last axis, computed stably.
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x);
/// Normalizes over the last axis, then applies gamma/beta of that length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));
/// Divides each row by its Euclidean norm. A zero row is a contract error.
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& x);

// ---- structural (rank-2) ---------------------------------------------------

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows);
/// Builds one row per entry of `source`: row source[i] of `rows` when
/// source[i] >= 0, otherwise a copy of the single-row `fill`.
template <typename T>
Tensor<T> interleave_rows(const Tensor<T>& rows, const Tensor<T>& fill,
                          std::span<const long> source);
/// Mean of the rows sharing a group id; output has one row per group.
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& a, std::span<const std::size_t> group,
                       std::size_t n_groups);

}  // namespace cmmix::tensor
