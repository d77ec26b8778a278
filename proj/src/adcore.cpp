// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/adcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "bloinst/error.hpp"

namespace bloinst::ad {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

const char* op_name(OpKind kind) {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::affine: return "affine";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softplus: return "softplus";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::atan: return "atan";
    case OpKind::minimum: return "minimum";
    case OpKind::maximum: return "maximum";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::reshape: return "reshape";
    case OpKind::broadcast: return "broadcast";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) {
            throw invalid_argument("tensor extents must be positive, got " + shape_str(shape_));
        }
    }
    if (shape_numel(shape_) != values.size()) {
        throw invalid_argument("tensor shape " + shape_str(shape_) + " does not match " +
                               std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) { return vector(std::vector<double>(values)); }

Tensor Tensor::vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
}

std::span<const double> Tensor::values() const noexcept {
    if (!data_) {
        return {};
    }
    return {data_->data(), data_->size()};
}

double Tensor::item() const {
    if (size() != 1) {
        throw invalid_argument("item() needs a single-element tensor, got " + shape_str(shape_));
    }
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

// ---------------------------------------------------------------------------
// Gradients

bool Gradients::has(const Tensor& leaf) const { return leaf.node() >= 0 && grads_.count(leaf.node()) > 0; }

Tensor Gradients::of(const Tensor& leaf) const {
    if (leaf.node() >= 0) {
        auto it = grads_.find(leaf.node());
        if (it != grads_.end()) {
            return it->second;
        }
    }
    return Tensor::zeros(leaf.shape());
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(const Tensor& value) {
    if (value.empty()) {
        throw invalid_argument("cannot make a leaf from an empty tensor");
    }
    TapeEntry e;
    e.kind = OpKind::leaf;
    e.output = static_cast<int>(entries_.size());
    e.shape = value.shape();
    entries_.push_back(std::move(e));
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = static_cast<int>(entries_.size()) - 1;
    return t;
}

Tensor Tape::record(OpKind kind, std::span<const Tensor> inputs, std::vector<Tensor> saved, OpAttrs attrs,
                    Shape shape, std::vector<double> values, bool save_output) {
    TapeEntry e;
    e.kind = kind;
    e.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
        e.inputs.push_back(in.tape() == this ? in.node() : -1);
    }
    e.output = static_cast<int>(entries_.size());
    e.saved = std::move(saved);
    e.attrs = std::move(attrs);
    e.shape = shape;
    entries_.push_back(std::move(e));
    Tensor t(std::move(shape), std::move(values));
    t.tape_ = this;
    t.node_ = static_cast<int>(entries_.size()) - 1;
    if (save_output) {
        entries_.back().saved.push_back(t.detach());
    }
    return t;
}

namespace {

Tape* common_tape(std::span<const Tensor> inputs, OpKind kind) {
    Tape* tape = nullptr;
    for (const auto& in : inputs) {
        if (in.tape() == nullptr) {
            continue;
        }
        if (tape != nullptr && tape != in.tape()) {
            throw invalid_argument(std::string(op_name(kind)) + ": inputs recorded on different tapes");
        }
        tape = in.tape();
    }
    return tape;
}

Tensor make_result(OpKind kind, std::initializer_list<Tensor> inputs, std::vector<Tensor> saved, OpAttrs attrs,
                   Shape shape, std::vector<double> values) {
    std::span<const Tensor> ins(inputs.begin(), inputs.size());
    Tape* tape = common_tape(ins, kind);
    if (tape == nullptr) {
        return Tensor(std::move(shape), std::move(values));
    }
    return tape->record(kind, ins, std::move(saved), std::move(attrs), std::move(shape), std::move(values));
}

void require_nonempty(const Tensor& t, OpKind kind) {
    if (t.empty()) {
        throw invalid_argument(std::string(op_name(kind)) + ": empty input tensor");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, OpKind kind) {
    require_nonempty(a, kind);
    require_nonempty(b, kind);
    if (a.shape() != b.shape()) {
        throw invalid_argument(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
    }
}

template <typename F>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, bool save_inputs) {
    require_same_shape(a, b, kind);
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(pa[i], pb[i]);
    }
    std::vector<Tensor> saved;
    if (save_inputs && (a.requires_grad() || b.requires_grad())) {
        saved = {a.detach(), b.detach()};
    }
    return make_result(kind, {a, b}, std::move(saved), {}, a.shape(), std::move(out));
}

enum class SaveWhat { input, output };

template <typename F>
Tensor unary(OpKind kind, const Tensor& x, F f, SaveWhat what) {
    require_nonempty(x, kind);
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(px[i]);
    }
    if (!x.requires_grad()) {
        return Tensor(x.shape(), std::move(out));
    }
    std::vector<Tensor> saved;
    if (what == SaveWhat::input) {
        saved.push_back(x.detach());
        return make_result(kind, {x}, std::move(saved), {}, x.shape(), std::move(out));
    }
    const Tensor inputs[] = {x};
    return x.tape()->record(kind, inputs, {}, {}, x.shape(), std::move(out), /*save_output=*/true);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    // max(x,0) + log1p(exp(-|x|))
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Strides of `from` laid into `to`, with zero stride on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
    std::vector<std::size_t> strides(to.size(), 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < from.size(); ++k) {
        const std::size_t fi = from.size() - 1 - k;
        const std::size_t ti = to.size() - 1 - k;
        strides[ti] = from[fi] == 1 ? 0 : stride;
        stride *= from[fi];
    }
    return strides;
}

// Calls f(out_index, in_index) for every output element of a broadcast.
template <typename F>
void for_each_broadcast(const Shape& from, const Shape& to, F f) {
    const auto strides = broadcast_strides(from, to);
    const std::size_t total = shape_numel(to);
    std::vector<std::size_t> counter(to.size(), 0);
    std::size_t in = 0;
    for (std::size_t out = 0; out < total; ++out) {
        f(out, in);
        for (std::size_t d = to.size(); d-- > 0;) {
            ++counter[d];
            in += strides[d];
            if (counter[d] < to[d]) {
                break;
            }
            in -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= shape[i];
    }
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward ops

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(OpKind::add, a, b, [](double x, double y) { return x + y; }, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(OpKind::sub, a, b, [](double x, double y) { return x - y; }, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(OpKind::mul, a, b, [](double x, double y) { return x * y; }, true);
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(OpKind::div, a, b, [](double x, double y) { return x / y; }, true);
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary(OpKind::minimum, a, b, [](double x, double y) { return y < x ? y : x; }, true);
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary(OpKind::maximum, a, b, [](double x, double y) { return y > x ? y : x; }, true);
}

Tensor affine(const Tensor& x, double scale, double shift) {
    require_nonempty(x, OpKind::affine);
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = scale * px[i] + shift;
    }
    OpAttrs attrs;
    attrs.scale = scale;
    attrs.shift = shift;
    return make_result(OpKind::affine, {x}, {}, std::move(attrs), x.shape(), std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_nonempty(a, OpKind::matmul);
    require_nonempty(b, OpKind::matmul);
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += av * brow[j];
            }
        }
    }
    std::vector<Tensor> saved;
    if (a.requires_grad() || b.requires_grad()) {
        saved = {a.detach(), b.detach()};
    }
    return make_result(OpKind::matmul, {a, b}, std::move(saved), {}, {m, n}, std::move(out));
}

Tensor transpose(const Tensor& x) {
    require_nonempty(x, OpKind::transpose);
    if (x.rank() != 2) {
        throw invalid_argument("transpose: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::size_t r = x.shape()[0];
    const std::size_t c = x.shape()[1];
    std::vector<double> out(r * c);
    const double* px = x.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = px[i * c + j];
        }
    }
    return make_result(OpKind::transpose, {x}, {}, {}, {c, r}, std::move(out));
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, k, oh, ow;
    int stride, pad;

    // Range of output columns whose input column (ox*stride + kx - pad) lies inside [0, extent).
    std::pair<std::size_t, std::size_t> valid(std::size_t kx, std::size_t extent, std::size_t out_extent) const {
        const long s = stride;
        const long off = static_cast<long>(kx) - pad;
        long lo = off >= 0 ? 0 : (-off + s - 1) / s;
        long hi = (static_cast<long>(extent) - 1 - off);
        hi = hi < 0 ? -1 : hi / s;
        hi = std::min(hi, static_cast<long>(out_extent) - 1);
        if (hi < lo) {
            return {0, 0};
        }
        return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
    }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw invalid_argument("conv2d: expected NCHW input and OCKK weight, got " + shape_str(x.shape()) + " and " +
                               shape_str(w.shape()));
    }
    if (stride != 1 && stride != 2) {
        throw invalid_argument("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    }
    if (padding < 0) {
        throw invalid_argument("conv2d: negative padding");
    }
    if (w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3]) {
        throw invalid_argument("conv2d: shape mismatch " + shape_str(x.shape()) + " with weight " +
                               shape_str(w.shape()));
    }
    if (!bias.empty() && (bias.rank() != 1 || bias.shape()[0] != w.shape()[0])) {
        throw invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                               shape_str(w.shape()));
    }
    ConvGeometry g{};
    g.n = x.shape()[0];
    g.c = x.shape()[1];
    g.h = x.shape()[2];
    g.w = x.shape()[3];
    g.o = w.shape()[0];
    g.k = w.shape()[2];
    g.stride = stride;
    g.pad = padding;
    const long oh = (static_cast<long>(g.h) + 2 * padding - static_cast<long>(g.k)) / stride + 1;
    const long ow = (static_cast<long>(g.w) + 2 * padding - static_cast<long>(g.k)) / stride + 1;
    if (oh <= 0 || ow <= 0) {
        throw invalid_argument("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                               shape_str(x.shape()));
    }
    g.oh = static_cast<std::size_t>(oh);
    g.ow = static_cast<std::size_t>(ow);
    return g;
}

}  // namespace

namespace {

// Patch matrix [C*K*K, OH*OW] of one image; padded taps are zero.
void im2col(const ConvGeometry& g, const double* image, double* col) {
    const std::size_t cols = g.oh * g.ow;
    for (std::size_t c = 0; c < g.c; ++c) {
        const double* in = image + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            const auto [y0, y1] = g.valid(ky, g.h, g.oh);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = col + ((c * g.k + ky) * g.k + kx) * cols;
                std::fill(row, row + cols, 0.0);
                const auto [x0, x1] = g.valid(kx, g.w, g.ow);
                for (std::size_t oy = y0; oy < y1; ++oy) {
                    const double* in_row = in + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
                    double* out_row = row + oy * g.ow;
                    for (std::size_t ox = x0; ox < x1; ++ox) {
                        out_row[ox] = in_row[ox * g.stride];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters patch gradients back onto the image.
void col2im_add(const ConvGeometry& g, const double* col, double* image) {
    const std::size_t cols = g.oh * g.ow;
    for (std::size_t c = 0; c < g.c; ++c) {
        double* in = image + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            const auto [y0, y1] = g.valid(ky, g.h, g.oh);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = col + ((c * g.k + ky) * g.k + kx) * cols;
                const auto [x0, x1] = g.valid(kx, g.w, g.ow);
                for (std::size_t oy = y0; oy < y1; ++oy) {
                    double* in_row = in + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
                    const double* grad_row = row + oy * g.ow;
                    for (std::size_t ox = x0; ox < x1; ++ox) {
                        in_row[ox * g.stride] += grad_row[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    require_nonempty(x, OpKind::conv2d);
    require_nonempty(weight, OpKind::conv2d);
    const ConvGeometry g = conv_geometry(x, weight, bias, stride, padding);
    const std::size_t rows = g.c * g.k * g.k;
    const std::size_t cols = g.oh * g.ow;
    std::vector<double> out(g.n * g.o * cols, 0.0);
    std::vector<double> col(rows * cols);
    const double* pw = weight.data();
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(g, x.data() + n * g.c * g.h * g.w, col.data());
        for (std::size_t o = 0; o < g.o; ++o) {
            double* plane = out.data() + (n * g.o + o) * cols;
            if (!bias.empty()) {
                std::fill(plane, plane + cols, bias[o]);
            }
            const double* wrow = pw + o * rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const double wv = wrow[r];
                const double* crow = col.data() + r * cols;
                for (std::size_t j = 0; j < cols; ++j) {
                    plane[j] += wv * crow[j];
                }
            }
        }
    }
    std::vector<Tensor> saved;
    if (x.requires_grad() || weight.requires_grad() || bias.requires_grad()) {
        saved = {x.detach(), weight.detach(), bias.detach()};
    }
    OpAttrs attrs;
    attrs.stride = stride;
    attrs.padding = padding;
    Shape shape{g.n, g.o, g.oh, g.ow};
    if (bias.empty()) {
        return make_result(OpKind::conv2d, {x, weight}, std::move(saved), std::move(attrs), std::move(shape),
                           std::move(out));
    }
    return make_result(OpKind::conv2d, {x, weight, bias}, std::move(saved), std::move(attrs), std::move(shape),
                       std::move(out));
}

Tensor relu(const Tensor& x) {
    return unary(OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; }, SaveWhat::input);
}

Tensor sigmoid(const Tensor& x) { return unary(OpKind::sigmoid, x, stable_sigmoid, SaveWhat::output); }

Tensor softplus(const Tensor& x) { return unary(OpKind::softplus, x, stable_softplus, SaveWhat::input); }

Tensor exp(const Tensor& x) {
    return unary(OpKind::exp, x, [](double v) { return std::exp(v); }, SaveWhat::output);
}

Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v > 0.0)) {
            throw invalid_argument("log: non-positive input " + std::to_string(v));
        }
    }
    return unary(OpKind::log, x, [](double v) { return std::log(v); }, SaveWhat::input);
}

Tensor atan(const Tensor& x) {
    return unary(OpKind::atan, x, [](double v) { return std::atan(v); }, SaveWhat::input);
}

Tensor sum(const Tensor& x) {
    require_nonempty(x, OpKind::sum);
    double s = 0.0;
    for (double v : x.values()) {
        s += v;
    }
    OpAttrs attrs;
    attrs.extents = x.shape();
    return make_result(OpKind::sum, {x}, {}, std::move(attrs), {1}, {s});
}

Tensor mean(const Tensor& x) {
    require_nonempty(x, OpKind::mean);
    double s = 0.0;
    for (double v : x.values()) {
        s += v;
    }
    OpAttrs attrs;
    attrs.extents = x.shape();
    return make_result(OpKind::mean, {x}, {}, std::move(attrs), {1}, {s / static_cast<double>(x.size())});
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    require_nonempty(x, OpKind::slice);
    if (axis >= x.rank() || begin >= end || end > x.shape()[axis]) {
        throw invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                               ") on axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), axis);
    const std::size_t len = end - begin;
    std::vector<double> out(s.outer * len * s.inner);
    const double* px = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(px + (o * s.extent + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
    }
    Shape shape = x.shape();
    shape[axis] = len;
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.begin = begin;
    attrs.end = end;
    attrs.extents = x.shape();
    return make_result(OpKind::slice, {x}, {}, std::move(attrs), std::move(shape), std::move(out));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) {
        throw invalid_argument("concat: no inputs");
    }
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw invalid_argument("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    }
    Shape shape = first;
    shape[axis] = 0;
    OpAttrs attrs;
    attrs.axis = axis;
    for (const auto& p : parts) {
        require_nonempty(p, OpKind::concat);
        bool ok = p.rank() == first.size();
        for (std::size_t d = 0; ok && d < first.size(); ++d) {
            ok = d == axis || p.shape()[d] == first[d];
        }
        if (!ok) {
            throw invalid_argument("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()) +
                                   " along axis " + std::to_string(axis));
        }
        shape[axis] += p.shape()[axis];
        attrs.extents.push_back(p.shape()[axis]);
    }
    const AxisSplit s = split_at(shape, axis);
    std::vector<double> out(shape_numel(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(p.data() + o * len, len, out.data() + o * s.extent * s.inner + offset);
        }
        offset += len;
    }
    Tape* tape = common_tape(parts, OpKind::concat);
    if (tape == nullptr) {
        return Tensor(std::move(shape), std::move(out));
    }
    return tape->record(OpKind::concat, parts, {}, std::move(attrs), std::move(shape), std::move(out));
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_nonempty(x, OpKind::reshape);
    if (shape_numel(shape) != x.size()) {
        throw invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return make_result(OpKind::reshape, {x}, {}, {}, std::move(shape), std::move(out));
}

Tensor broadcast(const Tensor& x, Shape shape) {
    require_nonempty(x, OpKind::broadcast);
    const Shape& from = x.shape();
    bool ok = from.size() <= shape.size();
    for (std::size_t k = 0; ok && k < from.size(); ++k) {
        const std::size_t f = from[from.size() - 1 - k];
        ok = f == 1 || f == shape[shape.size() - 1 - k];
    }
    if (!ok) {
        throw invalid_argument("broadcast: cannot expand " + shape_str(from) + " to " + shape_str(shape));
    }
    std::vector<double> out(shape_numel(shape));
    const double* px = x.data();
    for_each_broadcast(from, shape, [&](std::size_t o, std::size_t i) { out[o] = px[i]; });
    OpAttrs attrs;
    attrs.extents = from;
    return make_result(OpKind::broadcast, {x}, {}, std::move(attrs), std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Backward

Gradients Tape::backward(const Tensor& root) const {
    if (root.size() != 1) {
        throw invalid_argument("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    }
    Gradients result;
    if (root.tape() == nullptr) {
        return result;
    }
    if (root.tape() != this) {
        throw invalid_argument("backward: root was recorded on a different tape");
    }
    std::vector<std::vector<double>> grads(entries_.size());
    grads[static_cast<std::size_t>(root.node())] = {1.0};

    auto buffer = [&](int node) -> double* {
        if (node < 0) {
            return nullptr;
        }
        auto& g = grads[static_cast<std::size_t>(node)];
        if (g.empty()) {
            g.assign(shape_numel(entries_[static_cast<std::size_t>(node)].shape), 0.0);
        }
        return g.data();
    };

    for (std::size_t idx = static_cast<std::size_t>(root.node()) + 1; idx-- > 0;) {
        const TapeEntry& e = entries_[idx];
        if (grads[idx].empty()) {
            continue;
        }
        // buffer() only fills other entries, so this reference stays valid.
        const std::vector<double>& gy = grads[idx];
        const std::size_t n = gy.size();
        const int in0 = e.inputs.empty() ? -1 : e.inputs[0];
        const int in1 = e.inputs.size() > 1 ? e.inputs[1] : -1;

        switch (e.kind) {
        case OpKind::leaf:
            break;
        case OpKind::add:
        case OpKind::sub: {
            if (double* ga = buffer(in0)) {
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (double* gb = buffer(in1)) {
                const double sign = e.kind == OpKind::add ? 1.0 : -1.0;
                for (std::size_t i = 0; i < n; ++i) gb[i] += sign * gy[i];
            }
            break;
        }
        case OpKind::mul: {
            const double* a = e.saved[0].data();
            const double* b = e.saved[1].data();
            if (double* ga = buffer(in0)) {
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * b[i];
            }
            if (double* gb = buffer(in1)) {
                for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i] * a[i];
            }
            break;
        }
        case OpKind::div: {
            const double* a = e.saved[0].data();
            const double* b = e.saved[1].data();
            if (double* ga = buffer(in0)) {
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] / b[i];
            }
            if (double* gb = buffer(in1)) {
                for (std::size_t i = 0; i < n; ++i) gb[i] -= gy[i] * a[i] / (b[i] * b[i]);
            }
            break;
        }
        case OpKind::minimum:
        case OpKind::maximum: {
            const double* a = e.saved[0].data();
            const double* b = e.saved[1].data();
            const bool is_min = e.kind == OpKind::minimum;
            double* ga = buffer(in0);
            double* gb = buffer(in1);
            for (std::size_t i = 0; i < n; ++i) {
                const bool pick_b = is_min ? b[i] < a[i] : b[i] > a[i];
                if (pick_b) {
                    if (gb) gb[i] += gy[i];
                } else if (ga) {
                    ga[i] += gy[i];
                }
            }
            break;
        }
        case OpKind::affine: {
            if (double* gx = buffer(in0)) {
                for (std::size_t i = 0; i < n; ++i) gx[i] += e.attrs.scale * gy[i];
            }
            break;
        }
        case OpKind::matmul: {
            const Tensor& a = e.saved[0];
            const Tensor& b = e.saved[1];
            const std::size_t m = a.shape()[0];
            const std::size_t k = a.shape()[1];
            const std::size_t cols = b.shape()[1];
            if (double* ga = buffer(in0)) {
                const double* pb = b.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = gy.data() + i * cols;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = pb + p * cols;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < cols; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (double* gb = buffer(in1)) {
                const double* pa = a.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = gy.data() + i * cols;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = pa[i * k + p];
                        if (av == 0.0) continue;
                        double* brow = gb + p * cols;
                        for (std::size_t j = 0; j < cols; ++j) brow[j] += av * grow[j];
                    }
                }
            }
            break;
        }
        case OpKind::transpose: {
            if (double* gx = buffer(in0)) {
                // Output is [c, r]; input was [r, c].
                const std::size_t c = e.shape[0];
                const std::size_t r = e.shape[1];
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
                }
            }
            break;
        }
        case OpKind::conv2d: {
            const Tensor& x = e.saved[0];
            const Tensor& w = e.saved[1];
            const Tensor& bias = e.saved[2];
            const ConvGeometry g = conv_geometry(x, w, bias, e.attrs.stride, e.attrs.padding);
            double* gx = buffer(in0);
            double* gw = buffer(in1);
            double* gb = e.inputs.size() > 2 ? buffer(e.inputs[2]) : nullptr;
            const double* pw = w.data();
            const std::size_t rows = g.c * g.k * g.k;
            const std::size_t cols = g.oh * g.ow;
            std::vector<double> col(rows * cols);
            std::vector<double> gcol(gx ? rows * cols : 0);
            for (std::size_t b = 0; b < g.n; ++b) {
                const double* gout = gy.data() + b * g.o * cols;
                if (gw) {
                    im2col(g, x.data() + b * g.c * g.h * g.w, col.data());
                }
                if (gx) {
                    std::fill(gcol.begin(), gcol.end(), 0.0);
                }
                for (std::size_t o = 0; o < g.o; ++o) {
                    const double* gplane = gout + o * cols;
                    if (gb) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < cols; ++j) s += gplane[j];
                        gb[o] += s;
                    }
                    for (std::size_t r = 0; r < rows; ++r) {
                        if (gw) {
                            const double* crow = col.data() + r * cols;
                            double acc = 0.0;
                            for (std::size_t j = 0; j < cols; ++j) acc += gplane[j] * crow[j];
                            gw[o * rows + r] += acc;
                        }
                        if (gx) {
                            const double wv = pw[o * rows + r];
                            double* grow = gcol.data() + r * cols;
                            for (std::size_t j = 0; j < cols; ++j) grow[j] += wv * gplane[j];
                        }
                    }
                }
                if (gx) {
                    col2im_add(g, gcol.data(), gx + b * g.c * g.h * g.w);
                }
            }
            break;
        }
        case OpKind::relu: {
            if (double* gx = buffer(in0)) {
                const double* x = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : 0.0;
            }
            break;
        }
        case OpKind::sigmoid: {
            if (double* gx = buffer(in0)) {
                const double* y = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
            }
            break;
        }
        case OpKind::softplus: {
            if (double* gx = buffer(in0)) {
                const double* x = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * stable_sigmoid(x[i]);
            }
            break;
        }
        case OpKind::exp: {
            if (double* gx = buffer(in0)) {
                const double* y = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i];
            }
            break;
        }
        case OpKind::log: {
            if (double* gx = buffer(in0)) {
                const double* x = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] / x[i];
            }
            break;
        }
        case OpKind::atan: {
            if (double* gx = buffer(in0)) {
                const double* x = e.saved[0].data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] / (1.0 + x[i] * x[i]);
            }
            break;
        }
        case OpKind::sum:
        case OpKind::mean: {
            if (double* gx = buffer(in0)) {
                const std::size_t len = shape_numel(e.attrs.extents);
                const double g = e.kind == OpKind::sum ? gy[0] : gy[0] / static_cast<double>(len);
                for (std::size_t i = 0; i < len; ++i) gx[i] += g;
            }
            break;
        }
        case OpKind::slice: {
            if (double* gx = buffer(in0)) {
                const AxisSplit s = split_at(e.attrs.extents, e.attrs.axis);
                const std::size_t len = e.attrs.end - e.attrs.begin;
                for (std::size_t o = 0; o < s.outer; ++o) {
                    double* dst = gx + (o * s.extent + e.attrs.begin) * s.inner;
                    const double* src = gy.data() + o * len * s.inner;
                    for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                }
            }
            break;
        }
        case OpKind::concat: {
            const AxisSplit s = split_at(e.shape, e.attrs.axis);
            std::size_t offset = 0;
            for (std::size_t p = 0; p < e.inputs.size(); ++p) {
                const std::size_t len = e.attrs.extents[p] * s.inner;
                if (double* gp = buffer(e.inputs[p])) {
                    for (std::size_t o = 0; o < s.outer; ++o) {
                        const double* src = gy.data() + o * s.extent * s.inner + offset;
                        for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += src[i];
                    }
                }
                offset += len;
            }
            break;
        }
        case OpKind::reshape: {
            if (double* gx = buffer(in0)) {
                for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i];
            }
            break;
        }
        case OpKind::broadcast: {
            if (double* gx = buffer(in0)) {
                for_each_broadcast(e.attrs.extents, e.shape, [&](std::size_t o, std::size_t i) { gx[i] += gy[o]; });
            }
            break;
        }
        }
        if (e.kind != OpKind::leaf) {
            std::vector<double>().swap(grads[idx]);
        }
    }

    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].kind == OpKind::leaf && !grads[i].empty()) {
            result.grads_.emplace(static_cast<int>(i), Tensor(entries_[i].shape, std::move(grads[i])));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) {
        throw invalid_argument("finite_diff_grad: step must be positive");
    }
    const Tensor base = x.detach();
    std::vector<double> grad(base.size());
    std::vector<double> probe(base.values().begin(), base.values().end());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(Tensor(base.shape(), probe));
        probe[i] = orig - h;
        const double down = f(Tensor(base.shape(), probe));
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return Tensor(base.shape(), std::move(grad));
}

}  // namespace bloinst::ad
