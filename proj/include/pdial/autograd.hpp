#pragma once

// Reverse-mode differentiation over dense tensors. The tape is implicit: every
// op returns a Var whose node keeps its parents alive and a closure that pushes
// the node's gradient into them. The graph is rebuilt on every forward pass and
// released when the last Var referencing it goes away.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pdial/tensor.hpp"

namespace pdial {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward (always for leaves)
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;
    bool is_leaf = false;
    const char* op = "const";

    void ensure_grad() {
        if (grad.data.size() != value.data.size()) grad = Tensor<T>(value.shape);
    }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables recording for the current thread while alive (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    T item() const { return node_->value.item(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<T>> node_;
};

/// A named trainable leaf. Its value is shared by every graph that reads it,
/// so encoder and decoder paths that use the same Parameter share storage.
template <class T>
class Parameter {
public:
    Parameter(std::string name, Tensor<T> init) : name_(std::move(name)), node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(init);
        node_->grad = Tensor<T>(node_->value.shape);
        node_->requires_grad = true;
        node_->is_leaf = true;
        node_->op = "param";
    }

    const std::string& name() const { return name_; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& grad() { return node_->grad; }
    const Tensor<T>& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape; }
    Var<T> var() const { return Var<T>(node_); }
    void zero_grad() { std::fill(node_->grad.data.begin(), node_->grad.data.end(), T(0)); }

private:
    std::string name_;
    std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value);

// -- linear algebra ---------------------------------------------------------

/// a[m x k] * b[k x n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// a[m x k] * b[n x k]^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Adds bias[n] to every row of a[... x n].
template <class T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias);

template <class T>
Var<T> scale(const Var<T>& a, double c);

/// sum_i coefs[i] * terms[i], accumulated left to right.
template <class T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const double> coefs);

// -- elementwise ------------------------------------------------------------

/// tanh-approximation GELU.
template <class T>
Var<T> gelu(const Var<T>& x);

template <class T>
Var<T> sigmoid(const Var<T>& x);

/// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& rng);

// -- reductions and normalization --------------------------------------------

/// Row-wise softmax over the last dimension. masked[i] != 0 excludes element i;
/// excluded entries come out exactly 0. A fully excluded row is an error.
template <class T>
Var<T> softmax_masked(const Var<T>& x, std::span<const std::uint8_t> masked);

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps);

/// Mean over rows: [m x n] -> [1 x n].
template <class T>
Var<T> mean_rows(const Var<T>& x);

/// Sum of all elements -> [1].
template <class T>
Var<T> sum(const Var<T>& x);

/// Mean token NLL of logits[n x V] against targets, skipping ignore_index.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, std::optional<int> ignore_index = {});

/// Mean binary cross-entropy of sigmoid(logits[i]) against targets[i] in {0,1}.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const double> targets);

// -- indexing ---------------------------------------------------------------

/// Rows of table[V x d] selected by ids -> [n x d].
template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> ids);

/// Output row i is the mean of the table rows in sets[i]; an empty set gives zeros.
template <class T>
Var<T> gather_mean_rows(const Var<T>& table, const std::vector<std::vector<std::size_t>>& sets);

/// Columns [begin, end) of x[m x n].
template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end);

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts);

// -- differentiation --------------------------------------------------------

/// Accumulates d(loss)/d(value) into every reachable Parameter's grad.
template <class T>
void backward(const Var<T>& loss);

}  // namespace pdial
