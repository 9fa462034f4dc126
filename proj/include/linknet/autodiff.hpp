#pragma once
// Tape-based reverse-mode differentiation over 2-D tensors.
//
// A Tape owns every node created while evaluating an expression. Leaves are
// registered with leaf(); each primitive op appends one node holding its value,
// its input ids and a closure that pushes the output gradient back to the
// inputs. backward() walks the nodes in exact reverse order of recording.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "linknet/tensor.hpp"

namespace linknet {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its Tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const
    {
        if (!tape_) throw std::logic_error("use of an unbound Var");
        return *tape_;
    }
    std::size_t id() const noexcept { return id_; }
    bool bound() const noexcept { return tape_ != nullptr; }

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Tensor value, bool requires_grad = true)
    {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, {}, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records a primitive. The node requires grad iff any input does; the
    /// closure is dropped otherwise.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward)
    {
        bool needs = false;
        for (auto in : inputs) {
            if (in >= nodes_.size()) throw std::logic_error("op input recorded after its output");
            needs = needs || nodes_[in].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), Tensor{}, needs, std::move(inputs),
                              needs ? std::move(backward) : BackwardFn{}});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    const Tensor& grad(std::size_t id) const
    {
        const Node& node = nodes_.at(id);
        if (!node.requires_grad) throw std::logic_error("node does not require grad");
        if (node.grad.empty()) throw std::logic_error("backward has not been run");
        return node.grad;
    }

    /// Adds `delta` into the gradient buffer of node `id` if it participates.
    void accumulate(std::size_t id, const Tensor& delta)
    {
        Node& node = nodes_[id];
        if (!node.requires_grad) return;
        auto dst = node.grad.data();
        auto src = delta.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }

    /// Direct access for backward closures that scatter into a gradient.
    Tensor* grad_buffer(std::size_t id)
    {
        Node& node = nodes_[id];
        return node.requires_grad ? &node.grad : nullptr;
    }

    void backward(const Var& loss)
    {
        if (&loss.tape() != this) throw std::logic_error("loss belongs to a different tape");
        const Tensor& value = nodes_.at(loss.id()).value;
        if (value.size() != 1) {
            throw DimensionError("backward needs a scalar loss, got shape " + shape_string(value.shape()));
        }
        for (auto& node : nodes_) {
            if (node.requires_grad) node.grad = Tensor(node.value.shape());
        }
        if (!nodes_[loss.id()].requires_grad) return;
        nodes_[loss.id()].grad[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (node.requires_grad && node.backward) node.backward(*this, node.grad);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline const Tensor& Var::grad() const { return tape().grad(id_); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b)
{
    if (&a.tape() != &b.tape()) throw std::logic_error("operands live on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

// C (m×n) += A (m×k) · B (k×n)
inline void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &c(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            const double* brow = &b(p, 0);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C (m×n) += A (m×k) · Bᵀ where B is n×k
inline void gemm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a(i, 0);
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b(j, 0);
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c(i, j) += acc;
        }
    }
}

// C (k×n) += Aᵀ · B where A is m×k, B is m×n
inline void gemm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = &b(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            double* crow = &c(p, 0);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops

inline Var matmul(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                             shape_string(bv.shape()));
    }
    Tensor out({av.rows(), bv.cols()});
    detail::gemm_acc(av, bv, out);
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_buffer(ia)) detail::gemm_nt_acc(g, t.value(ib), *ga);
        if (Tensor* gb = t.grad_buffer(ib)) detail::gemm_tn_acc(t.value(ia), g, *gb);
    });
}

/// a · bᵀ without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                             shape_string(bv.shape()) + "^T");
    }
    Tensor out({av.rows(), bv.rows()});
    detail::gemm_nt_acc(av, bv, out);
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_buffer(ia)) detail::gemm_acc(g, t.value(ib), *ga);
        if (Tensor* gb = t.grad_buffer(ib)) detail::gemm_tn_acc(g, t.value(ia), *gb);
    });
}

inline Var transpose(const Var& a)
{
    const Tensor& av = a.value();
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
    const auto ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, const Tensor& g) {
        Tensor& ga = *t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga(i, j) += g(j, i);
    });
}

enum class ElementwiseOp { add, sub, mul };

inline Var elementwise(ElementwiseOp op, const Var& a, const Var& b)
{
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_same_shape("elementwise", av, bv);
    Tensor out(av.shape());
    for (std::size_t k = 0; k < out.size(); ++k) {
        switch (op) {
        case ElementwiseOp::add: out[k] = av[k] + bv[k]; break;
        case ElementwiseOp::sub: out[k] = av[k] - bv[k]; break;
        case ElementwiseOp::mul: out[k] = av[k] * bv[k]; break;
        }
    }
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [op, ia, ib](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_buffer(ia);
        Tensor* gb = t.grad_buffer(ib);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        for (std::size_t k = 0; k < g.size(); ++k) {
            switch (op) {
            case ElementwiseOp::add:
                if (ga) (*ga)[k] += g[k];
                if (gb) (*gb)[k] += g[k];
                break;
            case ElementwiseOp::sub:
                if (ga) (*ga)[k] += g[k];
                if (gb) (*gb)[k] -= g[k];
                break;
            case ElementwiseOp::mul:
                if (ga) (*ga)[k] += g[k] * bv[k];
                if (gb) (*gb)[k] += g[k] * av[k];
                break;
            }
        }
    });
}

inline Var add(const Var& a, const Var& b) { return elementwise(ElementwiseOp::add, a, b); }
inline Var sub(const Var& a, const Var& b) { return elementwise(ElementwiseOp::sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return elementwise(ElementwiseOp::mul, a, b); }

inline Var scale(const Var& a, double factor)
{
    Tensor out = a.value();
    for (auto& v : out.data()) v *= factor;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, factor](Tape& t, const Tensor& g) {
        Tensor& ga = *t.grad_buffer(ia);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += factor * g[k];
    });
}

inline Var negate(const Var& a) { return scale(a, -1.0); }

/// x (m×n) + bias (1×n), bias broadcast over rows.
inline Var add_row_bias(const Var& x, const Var& bias)
{
    detail::require_same_tape(x, bias);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
        throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) + " does not fit " +
                             shape_string(xv.shape()));
    }
    Tensor out = xv;
    const std::size_t m = xv.rows(), n = xv.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += bv(0, j);
    const auto ix = x.id(), ib = bias.id();
    return x.tape().record(std::move(out), {ix, ib}, [ix, ib, m, n](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix))
            for (std::size_t k = 0; k < g.size(); ++k) (*gx)[k] += g[k];
        if (Tensor* gb = t.grad_buffer(ib))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*gb)(0, j) += g(i, j);
    });
}

inline Var relu(const Var& x)
{
    Tensor out = x.value();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    const auto ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        const Tensor& xv = t.value(ix);
        for (std::size_t k = 0; k < g.size(); ++k)
            if (xv[k] > 0.0) gx[k] += g[k];
    });
}

/// Row-wise softmax with max subtraction.
inline Var row_softmax(const Var& x)
{
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double peak = xv(i, 0);
        for (std::size_t j = 1; j < n; ++j) peak = std::max(peak, xv(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (out(i, j) = std::exp(xv(i, j) - peak));
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= total;
    }
    Tape& tape = x.tape();
    const auto ix = x.id();
    const auto iy = tape.size();
    return tape.record(std::move(out), {ix}, [ix, iy, m, n](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        const Tensor& y = t.value(iy);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < n; ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
        }
    });
}

inline double logistic(double v)
{
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Element-wise logistic, applied per row without normalization.
inline Var row_sigmoid(const Var& x)
{
    Tensor out = x.value();
    for (auto& v : out.data()) v = logistic(v);
    Tape& tape = x.tape();
    const auto ix = x.id();
    const auto iy = tape.size();
    return tape.record(std::move(out), {ix}, [ix, iy](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        const Tensor& y = t.value(iy);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * y[k] * (1.0 - y[k]);
    });
}

inline Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t m = parts.front().rows();
    std::size_t total = 0;
    std::vector<std::size_t> ids, widths;
    for (const auto& p : parts) {
        detail::require_same_tape(parts.front(), p);
        if (p.rows() != m) {
            throw DimensionError("concat_cols: row count mismatch, " + shape_string(parts.front().shape()) +
                                 " vs " + shape_string(p.shape()));
        }
        ids.push_back(p.id());
        widths.push_back(p.cols());
        total += p.cols();
    }
    Tensor out({m, total});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offset + j) = pv(i, j);
        offset += pv.cols();
    }
    return parts.front().tape().record(std::move(out), ids, [ids, widths, m](Tape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (Tensor* gp = t.grad_buffer(ids[p])) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[p]; ++j) (*gp)(i, j) += g(i, offset + j);
            }
            offset += widths[p];
        }
    });
}

inline Var concat_cols(std::initializer_list<Var> parts)
{
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Columns [begin, end) of x.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end)
{
    const Tensor& xv = x.value();
    if (begin >= end || end > xv.cols()) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_string(xv.shape()));
    }
    const std::size_t m = xv.rows(), w = end - begin;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = xv(i, begin + j);
    const auto ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, begin, m, w](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx(i, begin + j) += g(i, j);
    });
}

/// out[r] = x[indices[r]]; gradient scatter-adds back.
inline Var gather_rows(const Var& x, std::vector<std::size_t> indices)
{
    const Tensor& xv = x.value();
    const std::size_t n = xv.cols();
    for (auto idx : indices) {
        if (idx >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    }
    if (indices.empty()) throw DimensionError("gather_rows: no indices");
    Tensor out({indices.size(), n});
    for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) out(r, j) = xv(indices[r], j);
    const auto ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, indices = std::move(indices), n](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        for (std::size_t r = 0; r < indices.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) gx(indices[r], j) += g(r, j);
    });
}

/// Mean of each row: [m×n] -> [m×1].
inline Var row_mean(const Var& x)
{
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += xv(i, j);
        out(i, 0) = acc / static_cast<double>(n);
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, m, n](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx(i, j) += g(i, 0) * inv;
    });
}

inline Var reshape(const Var& x, Shape shape)
{
    Tensor out = x.value().reshaped(std::move(shape));
    const auto ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
    });
}

/// S[i,j] = -||a_i - b_j||^2 for a [m×k], b [n×k].
inline Var neg_sq_dist(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw DimensionError("neg_sq_dist: width mismatch " + shape_string(av.shape()) + " vs " +
                             shape_string(bv.shape()));
    }
    const std::size_t m = av.rows(), n = bv.rows(), k = av.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double d = av(i, p) - bv(j, p);
                acc += d * d;
            }
            out(i, j) = -acc;
        }
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, n, k](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_buffer(ia);
        Tensor* gb = t.grad_buffer(ib);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = g(i, j);
                if (gij == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    const double d = av(i, p) - bv(j, p);
                    if (ga) (*ga)(i, p) -= 2.0 * gij * d;
                    if (gb) (*gb)(j, p) += 2.0 * gij * d;
                }
            }
    });
}

/// Sum of all entries as a 1×1 tensor.
inline Var sum(const Var& x)
{
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    const auto ix = x.id();
    return x.tape().record(Tensor({1, 1}, {acc}), {ix}, [ix](Tape& t, const Tensor& g) {
        Tensor& gx = *t.grad_buffer(ix);
        for (auto& v : gx.data()) v += g[0];
    });
}

/// Mean over rows of softmax cross-entropy against integer labels.
inline Var softmax_cross_entropy(const Var& logits, std::vector<std::size_t> labels)
{
    const Tensor& x = logits.value();
    const std::size_t m = x.rows(), n = x.cols();
    if (labels.size() != m) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(m) + " rows");
    }
    Tensor probs({m, n});
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (labels[i] >= n) throw std::out_of_range("softmax_cross_entropy: label out of range");
        double peak = x(i, 0);
        for (std::size_t j = 1; j < n; ++j) peak = std::max(peak, x(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (probs(i, j) = std::exp(x(i, j) - peak));
        for (std::size_t j = 0; j < n; ++j) probs(i, j) /= total;
        loss += std::log(total) + peak - x(i, labels[i]);
    }
    loss /= static_cast<double>(m);
    const auto ix = logits.id();
    return logits.tape().record(
        Tensor({1, 1}, {loss}), {ix},
        [ix, probs = std::move(probs), labels = std::move(labels), m, n](Tape& t, const Tensor& g) {
            Tensor& gx = *t.grad_buffer(ix);
            const double w = g[0] / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    gx(i, j) += w * (probs(i, j) - (j == labels[i] ? 1.0 : 0.0));
        });
}

/// Sum of two-term binary cross-entropy on probabilities. Probabilities are
/// clamped to [1e-15, 1 - 1e-15] before the logs.
inline Var binary_cross_entropy_sum(const Var& probs, const Tensor& targets)
{
    const Tensor& p = probs.value();
    detail::require_same_shape("binary_cross_entropy_sum", p, targets);
    constexpr double lo = 1e-15, hi = 1.0 - 1e-15;
    double loss = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double q = std::clamp(p[k], lo, hi);
        loss -= targets[k] * std::log(q) + (1.0 - targets[k]) * std::log(1.0 - q);
    }
    const auto ip = probs.id();
    return probs.tape().record(Tensor({1, 1}, {loss}), {ip}, [ip, targets, lo, hi](Tape& t, const Tensor& g) {
        Tensor& gp = *t.grad_buffer(ip);
        const Tensor& p = t.value(ip);
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double q = std::clamp(p[k], lo, hi);
            gp[k] += g[0] * (-targets[k] / q + (1.0 - targets[k]) / (1.0 - q));
        }
    });
}

} // namespace linknet
