// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace bloinst::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;

// Dense row-major float64 array. Values are immutable once constructed; a
// tensor produced by an op on a tracked input carries a handle into the tape
// that recorded it.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
    bool empty() const noexcept { return size() == 0; }
    std::span<const double> values() const noexcept;
    const double* data() const noexcept { return data_ ? data_->data() : nullptr; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    // Value of a single-element tensor.
    double item() const;

    bool requires_grad() const noexcept { return tape_ != nullptr; }
    Tape* tape() const noexcept { return tape_; }
    int node() const noexcept { return node_; }

    // Same values, no tape handle.
    Tensor detach() const;

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    div,
    affine,
    matmul,
    transpose,
    conv2d,
    relu,
    sigmoid,
    softplus,
    exp,
    log,
    atan,
    minimum,
    maximum,
    sum,
    mean,
    slice,
    concat,
    reshape,
    broadcast,
};

const char* op_name(OpKind kind);

struct OpAttrs {
    double scale = 1.0;
    double shift = 0.0;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    int stride = 1;
    int padding = 0;
    std::vector<std::size_t> extents;
};

// One recorded operation. Inputs that were untracked constants are stored as
// node id -1 with their values kept in `saved` when backward needs them.
struct TapeEntry {
    OpKind kind = OpKind::leaf;
    std::vector<int> inputs;
    int output = -1;
    std::vector<Tensor> saved;
    OpAttrs attrs;
    Shape shape;
};

class Gradients {
public:
    // True when the root depends on the leaf.
    bool has(const Tensor& leaf) const;
    // Gradient for a leaf; zeros of the leaf's shape when the root does not
    // depend on it.
    Tensor of(const Tensor& leaf) const;
    const std::unordered_map<int, Tensor>& by_node() const noexcept { return grads_; }

private:
    friend class Tape;
    std::unordered_map<int, Tensor> grads_;
};

// Records operations of a single forward pass. Confined to one thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Grad-flagged leaf sharing `value`'s storage.
    Tensor leaf(const Tensor& value);

    std::size_t size() const noexcept { return entries_.size(); }
    const TapeEntry& entry(std::size_t i) const { return entries_.at(i); }

    // Reverse sweep from a scalar root; returns one gradient per leaf.
    Gradients backward(const Tensor& root) const;

    // Used by op implementations.
    Tensor record(OpKind kind, std::span<const Tensor> inputs, std::vector<Tensor> saved, OpAttrs attrs,
                  Shape shape, std::vector<double> values, bool save_output = false);

private:
    std::vector<TapeEntry> entries_;
};

// Elementwise ops require identical shapes; use broadcast() to expand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);
inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
inline Tensor add_scalar(const Tensor& x, double c) { return affine(x, 1.0, c); }
inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// x: [N,C,H,W], weight: [O,C,K,K], bias: [O] or empty. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// log(1 + e^x), overflow-free.
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor atan(const Tensor& x);
// Ties send the gradient to the first argument.
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// Reductions over all elements; output shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
// Numpy-style expansion: trailing axes aligned, extents of 1 stretched.
Tensor broadcast(const Tensor& x, Shape shape);

// Central-difference gradient of a scalar function, one coordinate at a time.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace bloinst::ad
