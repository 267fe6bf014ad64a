#pragma once

// Tape-based reverse-mode differentiation over row-major Eigen matrices.
//
// Every activation in this project is a 2-D (tokens x features) matrix, so a
// node holds one matrix. Nodes are appended to the tape in evaluation order,
// which is already a topological order; backward() walks the tape in reverse.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "fact/errors.hpp"

namespace fact {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

namespace ag {

template <typename T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::function<void(Node&)> backward;

    template <typename Expr>
    void accumulate(const Expr& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

template <typename T>
class Tape;

template <typename T>
class Var {
public:
    Var() = default;
    Var(Node<T>* node, Tape<T>* tape) : node_(node), tape_(tape) {}

    const Matrix<T>& value() const { return node_->value; }
    const Matrix<T>& grad() const { return node_->grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    Node<T>* node() const { return node_; }
    Tape<T>& tape() const { return *tape_; }
    explicit operator bool() const { return node_ != nullptr; }

private:
    Node<T>* node_ = nullptr;
    Tape<T>* tape_ = nullptr;
};

template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Matrix<T> value) { return leaf(std::move(value), false); }

    Var<T> leaf(Matrix<T> value, bool requires_grad) {
        auto& n = nodes_.emplace_back();
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return Var<T>(&n, this);
    }

    Var<T> record(Matrix<T> value, bool requires_grad, std::function<void(Node<T>&)> backward) {
        auto& n = nodes_.emplace_back();
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        return Var<T>(&n, this);
    }

    // Seeds d(root)/d(root) = 1; root must be a 1x1 scalar.
    void backward(const Var<T>& root) {
        if (root.rows() != 1 || root.cols() != 1) {
            throw InvalidInput("backward() requires a scalar root");
        }
        if (!root.requires_grad()) return;
        root.node()->accumulate(Matrix<T>::Ones(1, 1));
        bool reached = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (&*it == root.node()) reached = true;
            if (!reached) continue;
            if (it->requires_grad && it->grad.size() != 0 && it->backward) it->backward(*it);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node<T>> nodes_;
};

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()) + ")");
    }
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimension mismatch");
    auto* pa = a.node();
    auto* pb = b.node();
    Matrix<T> out = a.value() * b.value();
    return a.tape().record(std::move(out), pa->requires_grad || pb->requires_grad, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
        if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "add");
    auto* pa = a.node();
    auto* pb = b.node();
    Matrix<T> out = a.value() + b.value();
    return a.tape().record(std::move(out), pa->requires_grad || pb->requires_grad, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad);
        if (pb->requires_grad) pb->accumulate(n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "sub");
    auto* pa = a.node();
    auto* pb = b.node();
    Matrix<T> out = a.value() - b.value();
    return a.tape().record(std::move(out), pa->requires_grad || pb->requires_grad, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad);
        if (pb->requires_grad) pb->accumulate(-n.grad);
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "mul");
    auto* pa = a.node();
    auto* pb = b.node();
    Matrix<T> out = a.value().cwiseProduct(b.value());
    return a.tape().record(std::move(out), pa->requires_grad || pb->requires_grad, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad.cwiseProduct(pb->value));
        if (pb->requires_grad) pb->accumulate(n.grad.cwiseProduct(pa->value));
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    auto* pa = a.node();
    Matrix<T> out = a.value() * c;
    return a.tape().record(std::move(out), pa->requires_grad, [pa, c](Node<T>& n) { pa->accumulate(n.grad * c); });
}

// a * s where s is a 1x1 node.
template <typename T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
    if (s.rows() != 1 || s.cols() != 1) throw InvalidInput("scale_by: scale must be 1x1");
    auto* pa = a.node();
    auto* ps = s.node();
    Matrix<T> out = a.value() * s.value()(0, 0);
    return a.tape().record(std::move(out), pa->requires_grad || ps->requires_grad, [pa, ps](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad * ps->value(0, 0));
        if (ps->requires_grad) {
            Matrix<T> g(1, 1);
            g(0, 0) = n.grad.cwiseProduct(pa->value).sum();
            ps->accumulate(g);
        }
    });
}

// Adds a 1 x cols row to every row of a.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("add_row: row width mismatch");
    auto* pa = a.node();
    auto* pr = row.node();
    Matrix<T> out = a.value().rowwise() + pr->value.row(0);
    return a.tape().record(std::move(out), pa->requires_grad || pr->requires_grad, [pa, pr](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad);
        if (pr->requires_grad) pr->accumulate(n.grad.colwise().sum());
    });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
    auto* pa = a.node();
    Matrix<T> out = a.value().array().tanh().matrix();
    return a.tape().record(std::move(out), pa->requires_grad, [pa](Node<T>& n) {
        pa->accumulate((n.grad.array() * (T(1) - n.value.array().square())).matrix());
    });
}

// Tanh-approximated GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    auto* pa = a.node();
    const T k = T(0.7978845608028654);
    const T c = T(0.044715);
    auto x = a.value().array();
    Matrix<T> out = (T(0.5) * x * (T(1) + (k * (x + c * x.cube())).tanh())).matrix();
    return a.tape().record(std::move(out), pa->requires_grad, [pa, k, c](Node<T>& n) {
        auto x = pa->value.array();
        auto th = (k * (x + c * x.cube())).tanh();
        auto d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * k * (T(1) + T(3) * c * x.square());
        pa->accumulate((n.grad.array() * d).matrix());
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    auto* pa = a.node();
    auto x = a.value().array();
    Matrix<T> out = (x / (T(1) + (-x).exp())).matrix();
    return a.tape().record(std::move(out), pa->requires_grad, [pa](Node<T>& n) {
        auto x = pa->value.array();
        auto s = T(1) / (T(1) + (-x).exp());
        pa->accumulate((n.grad.array() * s * (T(1) + x * (T(1) - s))).matrix());
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    auto* pa = a.node();
    Matrix<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape().record(std::move(out), pa->requires_grad, [pa](Node<T>& n) {
        pa->accumulate(Matrix<T>::Constant(pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
    });
}

// x * w + b with w of shape (in, out) and optional bias (1, out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {}) {
    if (x.cols() != w.rows()) throw InvalidInput("linear: input width mismatch");
    if (b && (b.rows() != 1 || b.cols() != w.cols())) throw InvalidInput("linear: bias shape mismatch");
    auto* px = x.node();
    auto* pw = w.node();
    auto* pb = b ? b.node() : nullptr;
    Matrix<T> out = x.value() * w.value();
    if (pb) out.rowwise() += pb->value.row(0);
    const bool rg = px->requires_grad || pw->requires_grad || (pb && pb->requires_grad);
    return x.tape().record(std::move(out), rg, [px, pw, pb](Node<T>& n) {
        if (px->requires_grad) px->accumulate(n.grad * pw->value.transpose());
        if (pw->requires_grad) pw->accumulate(px->value.transpose() * n.grad);
        if (pb && pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
    });
}

// Row-wise layer normalization with optional affine gain/bias (1 x cols each).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain = {}, const Var<T>& bias = {}, T eps = T(1e-5)) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    if (gain && (gain.rows() != 1 || gain.cols() != cols)) throw InvalidInput("layer_norm: gain shape mismatch");
    if (bias && (bias.rows() != 1 || bias.cols() != cols)) throw InvalidInput("layer_norm: bias shape mismatch");
    auto* px = x.node();
    auto* pg = gain ? gain.node() : nullptr;
    auto* pb = bias ? bias.node() : nullptr;

    Matrix<T> xhat(rows, cols);
    Vector<T> inv_std(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        auto row = px->value.row(r);
        const T mean = row.mean();
        const T var = (row.array() - mean).square().mean();
        inv_std(r) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (row.array() - mean) * inv_std(r);
    }
    Matrix<T> out = xhat;
    if (pg) out = out.array().rowwise() * pg->value.row(0).array();
    if (pb) out.rowwise() += pb->value.row(0);

    const bool rg = px->requires_grad || (pg && pg->requires_grad) || (pb && pb->requires_grad);
    return x.tape().record(std::move(out), rg, [px, pg, pb, xhat = std::move(xhat), inv_std](Node<T>& n) {
        if (pg && pg->requires_grad) pg->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
        if (pb && pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
        if (!px->requires_grad) return;
        Matrix<T> dxhat = n.grad;
        if (pg) dxhat = dxhat.array().rowwise() * pg->value.row(0).array();
        Matrix<T> dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const T m1 = dxhat.row(r).mean();
            const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        px->accumulate(dx);
    });
}

// Multi-head scaled dot-product attention. q: (Nq, d), k and v: (Nk, d); heads split the feature axis.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    const Eigen::Index d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw InvalidInput("attention: shape mismatch");
    if (heads <= 0 || d % heads != 0) throw InvalidInput("attention: width not divisible by head count");
    const Eigen::Index dh = d / heads;
    const T s = T(1) / std::sqrt(T(dh));
    auto* pq = q.node();
    auto* pk = k.node();
    auto* pv = v.node();

    std::vector<Matrix<T>> probs(heads);
    Matrix<T> out(q.rows(), d);
    for (int h = 0; h < heads; ++h) {
        Matrix<T> scores = (pq->value.middleCols(h * dh, dh) * pk->value.middleCols(h * dh, dh).transpose()) * s;
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            const T mx = scores.row(r).maxCoeff();
            scores.row(r) = (scores.row(r).array() - mx).exp();
            scores.row(r) /= scores.row(r).sum();
        }
        out.middleCols(h * dh, dh) = scores * pv->value.middleCols(h * dh, dh);
        probs[h] = std::move(scores);
    }
    const bool rg = pq->requires_grad || pk->requires_grad || pv->requires_grad;
    return q.tape().record(std::move(out), rg, [pq, pk, pv, probs = std::move(probs), heads, dh, s](Node<T>& n) {
        Matrix<T> dq, dk, dv;
        if (pq->requires_grad) dq.setZero(pq->value.rows(), pq->value.cols());
        if (pk->requires_grad) dk.setZero(pk->value.rows(), pk->value.cols());
        if (pv->requires_grad) dv.setZero(pv->value.rows(), pv->value.cols());
        for (int h = 0; h < heads; ++h) {
            const Matrix<T>& p = probs[h];
            const auto go = n.grad.middleCols(h * dh, dh);
            if (pv->requires_grad) dv.middleCols(h * dh, dh) = p.transpose() * go;
            if (!pq->requires_grad && !pk->requires_grad) continue;
            Matrix<T> dp = go * pv->value.middleCols(h * dh, dh).transpose();
            Vector<T> rowdot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * s;
            if (pq->requires_grad) dq.middleCols(h * dh, dh) = ds * pk->value.middleCols(h * dh, dh);
            if (pk->requires_grad) dk.middleCols(h * dh, dh) = ds.transpose() * pq->value.middleCols(h * dh, dh);
        }
        if (pq->requires_grad) pq->accumulate(dq);
        if (pk->requires_grad) pk->accumulate(dk);
        if (pv->requires_grad) pv->accumulate(dv);
    });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.cols()) throw InvalidInput("concat_rows: width mismatch");
    auto* pa = a.node();
    auto* pb = b.node();
    Matrix<T> out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a.value();
    out.bottomRows(b.rows()) = b.value();
    const Eigen::Index na = a.rows();
    return a.tape().record(std::move(out), pa->requires_grad || pb->requires_grad, [pa, pb, na](Node<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad.topRows(na));
        if (pb->requires_grad) pb->accumulate(n.grad.bottomRows(n.grad.rows() - na));
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidInput("slice_rows: range out of bounds");
    auto* pa = a.node();
    Matrix<T> out = a.value().middleRows(start, count);
    return a.tape().record(std::move(out), pa->requires_grad, [pa, start, count](Node<T>& n) {
        Matrix<T> g = Matrix<T>::Zero(pa->value.rows(), pa->value.cols());
        g.middleRows(start, count) = n.grad;
        pa->accumulate(g);
    });
}

}  // namespace ag
}  // namespace fact
