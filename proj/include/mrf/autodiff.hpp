/*
 * mrfunroll
 *
 * Copyright 2026 The mrfunroll Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Minimal reverse-mode automatic differentiation over real row-major
// matrices, with just the layers the learned proximal operator needs.
//
// Every value is a rows x cols matrix; images are stored channel-major as
// (channels, height * width).

#include "mrf/core.hpp"

#include <Eigen/Dense>

#include <functional>
#include <numeric>
#include <map>

namespace mrf::ad {

struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    RVec data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Tensor(std::size_t r, std::size_t c, RVec values) : rows(r), cols(c), data(std::move(values))
    {
        if (data.size() != r * c)
            throw ShapeError("tensor: value count does not match shape");
    }

    std::size_t size() const { return data.size(); }
    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_string() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline MatMap as_matrix(Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)}; }
inline ConstMatMap as_matrix(const Tensor& t)
{
    return {t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)};
}

/// A named weight. Frozen parameters enter a tape as constants and never receive gradients.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows; }
    std::size_t cols() const { return value().cols; }
};

using Gradients = std::map<const Parameter*, Tensor>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v) { return push(std::move(v), false, {}, nullptr); }

    Var param(const Parameter& p) { return push(p.value, p.trainable, {}, p.trainable ? &p : nullptr); }

    /// Records a node. `backward` reads this node's gradient and adds into its inputs'.
    Var push(Tensor value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward, const Parameter* param = nullptr)
    {
        nodes_.push_back({std::move(value), {}, requires_grad, std::move(backward), param});
        return {this, nodes_.size() - 1};
    }

    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient slot of node id, allocated on first use.
    Tensor& grad(std::size_t id)
    {
        Node& n = nodes_[id];
        if (!n.grad.same_shape(n.value))
            n.grad = Tensor(n.value.rows, n.value.cols);
        return n.grad;
    }

    void accumulate(std::size_t id, const Tensor& g)
    {
        if (!nodes_[id].requires_grad)
            return;
        Tensor& dst = grad(id);
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst.data[i] += g.data[i];
    }

    /// Reverse sweep from a scalar node. Node gradients are reset first, so
    /// repeated calls return identical results.
    Gradients backward(Var loss)
    {
        if (nodes_.empty() || loss.tape != this || loss.id >= nodes_.size())
            throw Error("autodiff: backward called before any forward pass was recorded");
        if (nodes_[loss.id].value.size() != 1)
            throw ShapeError("autodiff: backward needs a scalar loss, got " + nodes_[loss.id].value.shape_string());
        for (auto& n : nodes_)
            n.grad = Tensor();
        Gradients out;
        if (!nodes_[loss.id].requires_grad)
            return out;
        grad(loss.id).data[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.grad.same_shape(n.value))
                continue;
            if (n.backward)
                n.backward(*this, i);
            if (n.param) {
                // A weight read several times (shared layers) owns several leaves.
                auto [it, fresh] = out.try_emplace(n.param, n.grad);
                if (!fresh)
                    for (std::size_t k = 0; k < n.grad.size(); ++k)
                        it->second.data[k] += n.grad.data[k];
            }
        }
        return out;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&, std::size_t)> backward;
        const Parameter* param = nullptr;
    };
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void check_same(const Var& a, const Var& b, const char* op)
{
    if (a.tape != b.tape)
        throw Error(std::string("autodiff: ") + op + " mixes tapes");
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string("autodiff: ") + op + " shape mismatch " + a.value().shape_string() + " vs " + b.value().shape_string());
}

// Plain loops on purpose: Eigen's vectorised reductions peel by runtime
// alignment, which would make results depend on where a buffer landed.
inline Tensor row_sums(const Tensor& g)
{
    Tensor out(g.rows, 1);
    for (std::size_t r = 0; r < g.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.cols; ++c)
            acc += g(r, c);
        out.data[r] = acc;
    }
    return out;
}

inline bool any_grad(std::initializer_list<Var> vs)
{
    for (const auto& v : vs)
        if (v.tape->requires_grad(v))
            return true;
    return false;
}

// Elementwise unary op given f(x) and f'(x) expressed through x and y = f(x).
template <typename F, typename D>
Var unary(Var a, F f, D df)
{
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (auto& v : out.data)
        v = f(v);
    const std::size_t ia = a.id;
    return t.push(std::move(out), t.requires_grad(a), [ia, df](Tape& tp, std::size_t self) {
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(self);
        Tensor g = tp.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data[i] *= df(x.data[i], y.data[i]);
        tp.accumulate(ia, g);
    });
}

} // namespace detail

inline Var add(Var a, Var b)
{
    detail::check_same(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] += b.value().data[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t self) {
        const Tensor g = tp.grad(self);
        tp.accumulate(ia, g);
        tp.accumulate(ib, g);
    });
}

inline Var sub(Var a, Var b)
{
    detail::check_same(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] -= b.value().data[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t self) {
        Tensor g = tp.grad(self);
        tp.accumulate(ia, g);
        for (auto& v : g.data)
            v = -v;
        tp.accumulate(ib, g);
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b)
{
    detail::check_same(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] *= b.value().data[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor ga = g, gb = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.data[i] *= tp.value(ib).data[i];
            gb.data[i] *= tp.value(ia).data[i];
        }
        tp.accumulate(ia, ga);
        tp.accumulate(ib, gb);
    });
}

/// a (C x D) times row b (1 x D), broadcast over rows.
inline Var mul_rows(Var a, Var row)
{
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ShapeError("autodiff: mul_rows needs a 1 x " + std::to_string(a.cols()) + " row, got " + row.value().shape_string());
    Tensor out = a.value();
    const Tensor& r = row.value();
    for (std::size_t c = 0; c < out.rows; ++c)
        for (std::size_t d = 0; d < out.cols; ++d)
            out(c, d) *= r.data[d];
    const std::size_t ia = a.id, ir = row.id;
    return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& av = tp.value(ia);
        const Tensor& rv = tp.value(ir);
        Tensor ga = g;
        Tensor gr(1, g.cols);
        for (std::size_t c = 0; c < g.rows; ++c)
            for (std::size_t d = 0; d < g.cols; ++d) {
                ga(c, d) *= rv.data[d];
                gr.data[d] += g(c, d) * av(c, d);
            }
        tp.accumulate(ia, ga);
        tp.accumulate(ir, gr);
    });
}

/// a (C x D) times column s (C x 1), broadcast over columns.
inline Var mul_cols(Var a, Var col)
{
    if (col.cols() != 1 || col.rows() != a.rows())
        throw ShapeError("autodiff: mul_cols needs a " + std::to_string(a.rows()) + " x 1 column, got " + col.value().shape_string());
    Tensor out = a.value();
    const Tensor& s = col.value();
    for (std::size_t c = 0; c < out.rows; ++c)
        for (std::size_t d = 0; d < out.cols; ++d)
            out(c, d) *= s.data[c];
    const std::size_t ia = a.id, is = col.id;
    return a.tape->push(std::move(out), detail::any_grad({a, col}), [ia, is](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& av = tp.value(ia);
        const Tensor& sv = tp.value(is);
        Tensor ga = g;
        Tensor gs(g.rows, 1);
        for (std::size_t c = 0; c < g.rows; ++c)
            for (std::size_t d = 0; d < g.cols; ++d) {
                ga(c, d) *= sv.data[c];
                gs.data[c] += g(c, d) * av(c, d);
            }
        tp.accumulate(ia, ga);
        tp.accumulate(is, gs);
    });
}

/// a times a 1 x 1 scalar node.
inline Var scale(Var a, Var scalar)
{
    if (scalar.value().size() != 1)
        throw ShapeError("autodiff: scale needs a 1 x 1 scalar");
    const double s = scalar.value().data[0];
    Tensor out = a.value();
    for (auto& v : out.data)
        v *= s;
    const std::size_t ia = a.id, is = scalar.id;
    return a.tape->push(std::move(out), detail::any_grad({a, scalar}), [ia, is](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& av = tp.value(ia);
        Tensor ga = g;
        double gs = 0.0;
        const double sv = tp.value(is).data[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.data[i] *= sv;
            gs += g.data[i] * av.data[i];
        }
        tp.accumulate(ia, ga);
        tp.accumulate(is, Tensor(1, 1, gs));
    });
}

inline Var scale(Var a, double s)
{
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

/// s * a + b elementwise with constant s, b.
inline Var affine(Var a, double s, double b)
{
    return detail::unary(a, [s, b](double x) { return s * x + b; }, [s](double, double) { return s; });
}

inline Var exp(Var a)
{
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a)
{
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a)
{
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_value(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline Var sigmoid(Var a)
{
    return detail::unary(a, [](double x) { return sigmoid_value(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var leaky_relu(Var a, double slope = 0.01)
{
    return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; }, [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

/// Row r of a becomes lo[r] + (hi[r] - lo[r]) * sigmoid(a).
inline Var bounded_sigmoid(Var a, RVec lo, RVec hi)
{
    if (lo.size() != a.rows() || hi.size() != a.rows())
        throw ShapeError("autodiff: bounded_sigmoid needs one bound pair per row");
    Tensor out = a.value();
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c)
            out(r, c) = lo[r] + (hi[r] - lo[r]) * sigmoid_value(out(r, c));
    const std::size_t ia = a.id;
    return a.tape->push(std::move(out), a.tape->requires_grad(a), [ia, lo, hi](Tape& tp, std::size_t self) {
        const Tensor& x = tp.value(ia);
        Tensor g = tp.grad(self);
        for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < g.cols; ++c) {
                const double s = sigmoid_value(x(r, c));
                g(r, c) *= (hi[r] - lo[r]) * s * (1.0 - s);
            }
        tp.accumulate(ia, g);
    });
}

/// Rows [first, first + count) of a.
inline Var slice_rows(Var a, std::size_t first, std::size_t count)
{
    if (first + count > a.rows() || count == 0)
        throw ShapeError("autodiff: slice_rows out of range");
    const std::size_t cols = a.cols();
    Tensor out(count, cols);
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(first * cols), count * cols, out.data.begin());
    const std::size_t ia = a.id;
    return a.tape->push(std::move(out), a.tape->requires_grad(a), [ia, first, count, cols](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor ga(tp.value(ia).rows, cols);
        std::copy_n(g.data.begin(), count * cols, ga.data.begin() + static_cast<std::ptrdiff_t>(first * cols));
        tp.accumulate(ia, ga);
    });
}

/// Stacks tensors with equal column counts.
inline Var concat_rows(const std::vector<Var>& parts)
{
    if (parts.empty())
        throw ShapeError("autodiff: concat_rows of nothing");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.cols() != cols || p.tape != parts[0].tape)
            throw ShapeError("autodiff: concat_rows column mismatch");
        rows += p.rows();
        rg = rg || p.tape->requires_grad(p);
    }
    Tensor out(rows, cols);
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.value().size();
    }
    return parts[0].tape->push(std::move(out), rg, [ids, offsets](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const Tensor& v = tp.value(ids[k]);
            Tensor gk(v.rows, v.cols);
            std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(offsets[k]), v.size(), gk.data.begin());
            tp.accumulate(ids[k], gk);
        }
    });
}

/// Per-column dense layer: W (out x in) * x (in x N) + b (out x 1).
inline Var linear(Var x, Var w, Var b)
{
    if (w.cols() != x.rows() || b.rows() != w.rows() || b.cols() != 1)
        throw ShapeError("autodiff: linear shapes " + w.value().shape_string() + " * " + x.value().shape_string() + " + " + b.value().shape_string());
    Tensor out(w.rows(), x.cols());
    as_matrix(out).noalias() = as_matrix(w.value()) * as_matrix(x.value());
    as_matrix(out).colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data.data(), static_cast<Eigen::Index>(b.rows()));
    const std::size_t ix = x.id, iw = w.id, ib = b.id;
    return x.tape->push(std::move(out), detail::any_grad({x, w, b}), [ix, iw, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const auto gm = as_matrix(g);
        if (tp.requires_grad({&tp, ix})) {
            Tensor gx(tp.value(ix).rows, tp.value(ix).cols);
            as_matrix(gx).noalias() = as_matrix(tp.value(iw)).transpose() * gm;
            tp.accumulate(ix, gx);
        }
        if (tp.requires_grad({&tp, iw})) {
            Tensor gw(tp.value(iw).rows, tp.value(iw).cols);
            as_matrix(gw).noalias() = gm * as_matrix(tp.value(ix)).transpose();
            tp.accumulate(iw, gw);
        }
        if (tp.requires_grad({&tp, ib})) {
            tp.accumulate(ib, detail::row_sums(g));
        }
    });
}

namespace detail {

// (cin * 9) x (h * w) patch matrix for a 3x3 kernel with zero padding 1.
inline RowMatrix im2col3x3(const Tensor& x, std::size_t h, std::size_t w)
{
    const std::size_t cin = x.rows;
    RowMatrix col = RowMatrix::Zero(static_cast<Eigen::Index>(cin * 9), static_cast<Eigen::Index>(h * w));
    for (std::size_t c = 0; c < cin; ++c)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const auto row = static_cast<Eigen::Index>(c * 9 + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)));
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    if (sy < 0 || sy >= static_cast<long>(h))
                        continue;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + dx;
                        if (sx < 0 || sx >= static_cast<long>(w))
                            continue;
                        col(row, static_cast<Eigen::Index>(y * w + xx)) = x(c, static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx));
                    }
                }
            }
    return col;
}

inline void col2im3x3(const RowMatrix& col, Tensor& dx, std::size_t h, std::size_t w)
{
    for (std::size_t c = 0; c < dx.rows; ++c)
        for (int dy = -1; dy <= 1; ++dy)
            for (int ddx = -1; ddx <= 1; ++ddx) {
                const auto row = static_cast<Eigen::Index>(c * 9 + static_cast<std::size_t>((dy + 1) * 3 + (ddx + 1)));
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    if (sy < 0 || sy >= static_cast<long>(h))
                        continue;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + ddx;
                        if (sx < 0 || sx >= static_cast<long>(w))
                            continue;
                        dx(c, static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) += col(row, static_cast<Eigen::Index>(y * w + xx));
                    }
                }
            }
}

} // namespace detail

/// 3x3 convolution, zero padding 1. x is (cin, h*w), weight (cout, cin*9), bias (cout, 1).
inline Var conv3x3(Var x, Var weight, Var bias, std::size_t h, std::size_t w)
{
    if (x.cols() != h * w)
        throw ShapeError("autodiff: conv3x3 input has " + std::to_string(x.cols()) + " pixels, expected " + std::to_string(h * w));
    if (weight.cols() != x.rows() * 9 || bias.rows() != weight.rows() || bias.cols() != 1)
        throw ShapeError("autodiff: conv3x3 weight " + weight.value().shape_string() + " does not fit input " + x.value().shape_string());
    const RowMatrix col = detail::im2col3x3(x.value(), h, w);
    Tensor out(weight.rows(), h * w);
    as_matrix(out).noalias() = as_matrix(weight.value()) * col;
    as_matrix(out).colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data.data(), static_cast<Eigen::Index>(bias.rows()));
    const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
    return x.tape->push(std::move(out), detail::any_grad({x, weight, bias}), [ix, iw, ib, h, w](Tape& tp, std::size_t self) {
        const auto gm = as_matrix(tp.grad(self));
        if (tp.requires_grad({&tp, iw})) {
            const RowMatrix col = detail::im2col3x3(tp.value(ix), h, w);
            Tensor gw(tp.value(iw).rows, tp.value(iw).cols);
            as_matrix(gw).noalias() = gm * col.transpose();
            tp.accumulate(iw, gw);
        }
        if (tp.requires_grad({&tp, ib})) {
            tp.accumulate(ib, detail::row_sums(tp.grad(self)));
        }
        if (tp.requires_grad({&tp, ix})) {
            const RowMatrix dcol = as_matrix(tp.value(iw)).transpose() * gm;
            Tensor gx(tp.value(ix).rows, tp.value(ix).cols);
            detail::col2im3x3(dcol, gx, h, w);
            tp.accumulate(ix, gx);
        }
    });
}

/// Row means, (C x D) -> (C x 1).
inline Var mean_cols(Var a)
{
    const Tensor& v = a.value();
    Tensor out(v.rows, 1);
    for (std::size_t r = 0; r < v.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < v.cols; ++c)
            acc += v(r, c);
        out.data[r] = acc / static_cast<double>(v.cols);
    }
    const std::size_t ia = a.id;
    return a.tape->push(std::move(out), a.tape->requires_grad(a), [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& v = tp.value(ia);
        Tensor ga(v.rows, v.cols);
        for (std::size_t r = 0; r < v.rows; ++r)
            for (std::size_t c = 0; c < v.cols; ++c)
                ga(r, c) = g.data[r] / static_cast<double>(v.cols);
        tp.accumulate(ia, ga);
    });
}

/// sum(weights * (a - b)^2) / sum(weights); weights is a constant row broadcast over rows, or empty for a plain mean.
inline Var weighted_mse(Var a, Var b, const RVec& weights = {})
{
    detail::check_same(a, b, "mse");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!weights.empty() && weights.size() != av.cols)
        throw ShapeError("autodiff: mse weights must have one entry per column");
    double wsum = 0.0;
    for (std::size_t c = 0; c < av.cols; ++c)
        wsum += weights.empty() ? 1.0 : weights[c];
    wsum *= static_cast<double>(av.rows);
    if (!(wsum > 0.0))
        throw ParameterError("autodiff: mse over an empty weight set");
    double acc = 0.0;
    for (std::size_t r = 0; r < av.rows; ++r)
        for (std::size_t c = 0; c < av.cols; ++c) {
            const double d = av(r, c) - bv(r, c);
            acc += (weights.empty() ? 1.0 : weights[c]) * d * d;
        }
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(Tensor(1, 1, acc / wsum), detail::any_grad({a, b}), [ia, ib, weights, wsum](Tape& tp, std::size_t self) {
        const double g = tp.grad(self).data[0];
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        Tensor ga(av.rows, av.cols);
        for (std::size_t r = 0; r < av.rows; ++r)
            for (std::size_t c = 0; c < av.cols; ++c)
                ga(r, c) = g * 2.0 * (weights.empty() ? 1.0 : weights[c]) * (av(r, c) - bv(r, c)) / wsum;
        tp.accumulate(ia, ga);
        for (auto& v : ga.data)
            v = -v;
        tp.accumulate(ib, ga);
    });
}

/// Applies a fixed linear map; its transpose propagates the gradient.
inline Var linear_map(Var x, std::size_t out_rows, std::size_t out_cols, std::function<Tensor(const Tensor&)> apply,
                      std::function<Tensor(const Tensor&)> transpose)
{
    Tensor out = apply(x.value());
    if (out.rows != out_rows || out.cols != out_cols)
        throw ShapeError("autodiff: linear map produced " + out.shape_string());
    if (!all_finite(out.data))
        throw DivergenceError("autodiff: non-finite output of linear map");
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.tape->requires_grad(x), [ix, transpose](Tape& tp, std::size_t self) {
        Tensor g = transpose(tp.grad(self));
        if (!g.same_shape(tp.value(ix)))
            throw ShapeError("autodiff: linear map transpose produced " + g.shape_string());
        tp.accumulate(ix, g);
    });
}

/// Sum of scalar nodes with constant weights.
inline Var weighted_sum(const std::vector<Var>& terms, const RVec& weights)
{
    if (terms.empty() || terms.size() != weights.size())
        throw ShapeError("autodiff: weighted_sum needs one weight per term");
    double acc = 0.0;
    bool rg = false;
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        if (terms[k].value().size() != 1)
            throw ShapeError("autodiff: weighted_sum terms must be scalars");
        acc += weights[k] * terms[k].value().data[0];
        rg = rg || terms[k].tape->requires_grad(terms[k]);
        ids.push_back(terms[k].id);
    }
    return terms[0].tape->push(Tensor(1, 1, acc), rg, [ids, weights](Tape& tp, std::size_t self) {
        const double g = tp.grad(self).data[0];
        for (std::size_t k = 0; k < ids.size(); ++k)
            tp.accumulate(ids[k], Tensor(1, 1, g * weights[k]));
    });
}

/// Adaptive-moment optimiser over a fixed, ordered parameter list.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Parameter*> params, Options opt) : params_(std::move(params)), opt_(opt)
    {
        for (const Parameter* p : params_) {
            m_.emplace_back(p->value.size(), 0.0);
            v_.emplace_back(p->value.size(), 0.0);
        }
    }

    /// Parameters without an entry in `grads` are left alone.
    void step(const Gradients& grads)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            if (!p.trainable)
                continue;
            const auto it = grads.find(&p);
            if (it == grads.end())
                continue;
            const RVec& g = it->second.data;
            if (!all_finite(g))
                throw DivergenceError("adam: non-finite gradient for '" + p.name + "'");
            for (std::size_t i = 0; i < g.size(); ++i) {
                m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * g[i];
                v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * g[i] * g[i];
                p.value.data[i] -= opt_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + opt_.eps);
            }
        }
    }

    std::size_t steps() const { return t_; }
    void set_learning_rate(double lr) { opt_.lr = lr; }

private:
    std::vector<Parameter*> params_;
    Options opt_;
    std::vector<RVec> m_, v_;
    std::size_t t_ = 0;
};

} // namespace mrf::ad
