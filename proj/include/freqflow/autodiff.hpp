#pragma once

// Tape-based reverse-mode differentiation over row-major 2D matrices.
//
// Every activation is a matrix whose rows are batch-major positions (tokens or
// pixels) and whose columns are features. Ops record a closure that maps the
// output gradient onto their inputs; Graph::backward replays closures in reverse
// recording order, which is a valid topological order by construction.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "freqflow/core.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

template <typename T>
class Graph {
public:
    using Mat = Matrix<T>;
    using Backward = std::function<void(Graph&, const Mat&)>;

    /// A graph built with record_grad = false skips storing closures (inference).
    explicit Graph(bool record_grad = true) : record_grad_(record_grad) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Mat value) { return push(std::move(value), false, nullptr); }

    Var parameter(Mat value) { return push(std::move(value), record_grad_, nullptr); }

    /// Records an op output. The closure runs only when some input needs a gradient.
    Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
        return record_impl(std::move(value), inputs.begin(), inputs.end(), std::move(backward));
    }

    Var record(Mat value, const std::vector<Var>& inputs, Backward backward) {
        return record_impl(std::move(value), inputs.begin(), inputs.end(), std::move(backward));
    }

    const Mat& value(Var v) const { return nodes_.at(v.id).value; }
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
    bool has_grad(Var v) const { return nodes_.at(v.id).grad.size() != 0; }
    const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }

    T scalar(Var v) const {
        const Mat& m = value(v);
        if (m.rows() != 1 || m.cols() != 1) throw DimensionError("Graph::scalar on non-scalar node");
        return m(0, 0);
    }

    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = nodes_[v.id];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Accumulates into a gradient buffer directly (for scatter-style backward passes).
    Mat& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var root) {
        Node& r = nodes_.at(root.id);
        if (r.value.rows() != 1 || r.value.cols() != 1) throw DimensionError("backward root must be a scalar");
        if (!r.needs_grad) return;
        r.grad = Mat::Constant(1, 1, T(1));
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    bool recording() const noexcept { return record_grad_; }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        Backward backward;
    };

    template <typename It>
    Var record_impl(Mat value, It first, It last, Backward backward) {
        bool needs = false;
        if (record_grad_)
            for (It it = first; it != last; ++it)
                if (it->valid()) needs = needs || nodes_[it->id].needs_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    Var push(Mat value, bool needs_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(backward)});
        return Var{nodes_.size() - 1};
    }

    std::deque<Node> nodes_;
    bool record_grad_;
};

namespace detail {

inline void check(bool ok, const char* op, const std::string& what) {
    if (!ok) throw DimensionError(std::string(op) + ": " + what);
}

inline std::string dims(long r, long c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace detail

/// y = x W (+ b). W is [in, out], b is [1, out].
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b = {}) {
    const auto& X = g.value(x);
    const auto& W = g.value(w);
    detail::check(X.cols() == W.rows(), "linear", detail::dims(X.rows(), X.cols()) + " * " + detail::dims(W.rows(), W.cols()));
    Matrix<T> y = X * W;
    if (b.valid()) {
        detail::check(g.value(b).rows() == 1 && g.value(b).cols() == W.cols(), "linear", "bias shape");
        y.rowwise() += g.value(b).row(0);
        return g.record(std::move(y), {x, w, b}, [x, w, b](Graph<T>& gr, const Matrix<T>& dy) {
            if (gr.needs_grad(x)) gr.accumulate(x, dy * gr.value(w).transpose());
            if (gr.needs_grad(w)) gr.accumulate(w, gr.value(x).transpose() * dy);
            if (gr.needs_grad(b)) gr.accumulate(b, dy.colwise().sum());
        });
    }
    return g.record(std::move(y), {x, w}, [x, w](Graph<T>& gr, const Matrix<T>& dy) {
        if (gr.needs_grad(x)) gr.accumulate(x, dy * gr.value(w).transpose());
        if (gr.needs_grad(w)) gr.accumulate(w, gr.value(x).transpose() * dy);
    });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
    detail::check(g.value(a).rows() == g.value(b).rows() && g.value(a).cols() == g.value(b).cols(), "add",
                  "shape mismatch");
    Matrix<T> y = g.value(a) + g.value(b);
    return g.record(std::move(y), {a, b}, [a, b](Graph<T>& gr, const Matrix<T>& dy) {
        gr.accumulate(a, dy);
        gr.accumulate(b, dy);
    });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T s) {
    Matrix<T> y = g.value(a) * s;
    return g.record(std::move(y), {a}, [a, s](Graph<T>& gr, const Matrix<T>& dy) { gr.accumulate(a, dy * s); });
}

/// a [rows, C] + r [1, C] broadcast over rows.
template <typename T>
Var add_row(Graph<T>& g, Var a, Var r) {
    detail::check(g.value(r).rows() == 1 && g.value(r).cols() == g.value(a).cols(), "add_row", "shape mismatch");
    Matrix<T> y = g.value(a);
    y.rowwise() += g.value(r).row(0);
    return g.record(std::move(y), {a, r}, [a, r](Graph<T>& gr, const Matrix<T>& dy) {
        gr.accumulate(a, dy);
        if (gr.needs_grad(r)) gr.accumulate(r, dy.colwise().sum());
    });
}

/// a [B * R, C] + c [B, C], where row block b of a receives row b of c.
template <typename T>
Var add_grouped(Graph<T>& g, Var a, Var c) {
    const auto& A = g.value(a);
    const auto& Cm = g.value(c);
    const long groups = Cm.rows();
    detail::check(Cm.cols() == A.cols() && groups > 0 && A.rows() % groups == 0, "add_grouped", "shape mismatch");
    const long per = A.rows() / groups;
    Matrix<T> y = A;
    for (long b = 0; b < groups; ++b) y.middleRows(b * per, per).rowwise() += Cm.row(b);
    return g.record(std::move(y), {a, c}, [a, c, groups, per](Graph<T>& gr, const Matrix<T>& dy) {
        gr.accumulate(a, dy);
        if (gr.needs_grad(c)) {
            Matrix<T> dc(groups, dy.cols());
            for (long b = 0; b < groups; ++b) dc.row(b) = dy.middleRows(b * per, per).colwise().sum();
            gr.accumulate(c, dc);
        }
    });
}

/// a [B * R, C] + p [R, C], p tiled over the B row blocks.
template <typename T>
Var add_tiled(Graph<T>& g, Var a, Var p) {
    const auto& A = g.value(a);
    const auto& P = g.value(p);
    const long per = P.rows();
    detail::check(P.cols() == A.cols() && per > 0 && A.rows() % per == 0, "add_tiled", "shape mismatch");
    const long groups = A.rows() / per;
    Matrix<T> y = A;
    for (long b = 0; b < groups; ++b) y.middleRows(b * per, per) += P;
    return g.record(std::move(y), {a, p}, [a, p, groups, per](Graph<T>& gr, const Matrix<T>& dy) {
        gr.accumulate(a, dy);
        if (gr.needs_grad(p)) {
            Matrix<T> dp = Matrix<T>::Zero(per, dy.cols());
            for (long b = 0; b < groups; ++b) dp += dy.middleRows(b * per, per);
            gr.accumulate(p, dp);
        }
    });
}

/// c [B, C] -> [B * R, C], each row repeated R times.
template <typename T>
Var repeat_rows(Graph<T>& g, Var c, long repeats) {
    const auto& Cm = g.value(c);
    const long groups = Cm.rows();
    Matrix<T> y(groups * repeats, Cm.cols());
    for (long b = 0; b < groups; ++b) y.middleRows(b * repeats, repeats).rowwise() = Cm.row(b);
    return g.record(std::move(y), {c}, [c, groups, repeats](Graph<T>& gr, const Matrix<T>& dy) {
        Matrix<T> dc(groups, dy.cols());
        for (long b = 0; b < groups; ++b) dc.row(b) = dy.middleRows(b * repeats, repeats).colwise().sum();
        gr.accumulate(c, dc);
    });
}

template <typename T>
Var concat_cols(Graph<T>& g, std::vector<Var> parts) {
    detail::check(!parts.empty(), "concat_cols", "no inputs");
    const long rows = g.value(parts.front()).rows();
    long cols = 0;
    for (Var p : parts) {
        detail::check(g.value(p).rows() == rows, "concat_cols", "row mismatch");
        cols += g.value(p).cols();
    }
    Matrix<T> y(rows, cols);
    long off = 0;
    for (Var p : parts) {
        y.middleCols(off, g.value(p).cols()) = g.value(p);
        off += g.value(p).cols();
    }
    return g.record(std::move(y), parts, [parts](Graph<T>& gr, const Matrix<T>& dy) {
        long o = 0;
        for (Var p : parts) {
            const long c = gr.value(p).cols();
            if (gr.needs_grad(p)) gr.accumulate(p, dy.middleCols(o, c));
            o += c;
        }
    });
}

template <typename T>
Var slice_cols(Graph<T>& g, Var a, long start, long count) {
    detail::check(start >= 0 && count > 0 && start + count <= g.value(a).cols(), "slice_cols", "range");
    Matrix<T> y = g.value(a).middleCols(start, count);
    return g.record(std::move(y), {a}, [a, start, count](Graph<T>& gr, const Matrix<T>& dy) {
        gr.grad_buffer(a).middleCols(start, count) += dy;
    });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
    Matrix<T> y = g.value(a).unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    Matrix<T> saved = g.needs_grad(a) ? y : Matrix<T>();
    return g.record(std::move(y), {a}, [a, s = std::move(saved)](Graph<T>& gr, const Matrix<T>& dy) {
        gr.accumulate(a, dy.cwiseProduct(s.cwiseProduct((Matrix<T>::Ones(s.rows(), s.cols()) - s))));
    });
}

template <typename T>
Var silu(Graph<T>& g, Var a) {
    Matrix<T> y = g.value(a).unaryExpr([](T v) { return v / (T(1) + std::exp(-v)); });
    return g.record(std::move(y), {a}, [a](Graph<T>& gr, const Matrix<T>& dy) {
        Matrix<T> d = gr.value(a).unaryExpr([](T v) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return s * (T(1) + v * (T(1) - s));
        });
        gr.accumulate(a, dy.cwiseProduct(d));
    });
}

/// GELU, tanh approximation.
template <typename T>
Var gelu(Graph<T>& g, Var a) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2 / pi)
    constexpr T c = T(0.044715);
    Matrix<T> y = g.value(a).unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); });
    return g.record(std::move(y), {a}, [a](Graph<T>& gr, const Matrix<T>& dy) {
        Matrix<T> d = gr.value(a).unaryExpr([](T v) {
            const T u = k * (v + c * v * v * v);
            const T th = std::tanh(u);
            const T du = k * (T(1) + T(3) * c * v * v);
            return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
        });
        gr.accumulate(a, dy.cwiseProduct(d));
    });
}

/// omega * a + (1 - omega) * b, elementwise.
template <typename T>
Var gate_mix(Graph<T>& g, Var omega, Var a, Var b) {
    const auto& W = g.value(omega);
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::check(W.rows() == A.rows() && W.cols() == A.cols() && A.rows() == B.rows() && A.cols() == B.cols(),
                  "gate_mix", "shape mismatch");
    Matrix<T> y = W.cwiseProduct(A) + (Matrix<T>::Ones(W.rows(), W.cols()) - W).cwiseProduct(B);
    return g.record(std::move(y), {omega, a, b}, [omega, a, b](Graph<T>& gr, const Matrix<T>& dy) {
        const auto& Wv = gr.value(omega);
        if (gr.needs_grad(omega)) gr.accumulate(omega, dy.cwiseProduct(gr.value(a) - gr.value(b)));
        if (gr.needs_grad(a)) gr.accumulate(a, dy.cwiseProduct(Wv));
        if (gr.needs_grad(b)) gr.accumulate(b, dy.cwiseProduct(Matrix<T>::Ones(Wv.rows(), Wv.cols()) - Wv));
    });
}

/// Row-wise layer normalisation over columns with learnable gain and bias [1, C].
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var bias, T eps = T(1e-6)) {
    const auto& X = g.value(x);
    const long n = X.rows(), c = X.cols();
    detail::check(g.value(gain).cols() == c && g.value(bias).cols() == c, "layer_norm", "parameter shape");
    Matrix<T> xhat(n, c);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (long r = 0; r < n; ++r) {
        const T mean = X.row(r).mean();
        const T var = (X.row(r).array() - mean).square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        xhat.row(r) = (X.row(r).array() - mean) * is;
    }
    Matrix<T> y = xhat;
    y.array().rowwise() *= g.value(gain).row(0).array();
    y.rowwise() += g.value(bias).row(0);
    return g.record(std::move(y), {x, gain, bias},
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr,
                                                                                          const Matrix<T>& dy) {
                        const long rows = dy.rows(), cols = dy.cols();
                        if (gr.needs_grad(gain)) gr.accumulate(gain, dy.cwiseProduct(xhat).colwise().sum());
                        if (gr.needs_grad(bias)) gr.accumulate(bias, dy.colwise().sum());
                        if (gr.needs_grad(x)) {
                            Matrix<T> dxhat = dy;
                            dxhat.array().rowwise() *= gr.value(gain).row(0).array();
                            Matrix<T> dx(rows, cols);
                            for (long r = 0; r < rows; ++r) {
                                const T m1 = dxhat.row(r).mean();
                                const T m2 = dxhat.row(r).dot(xhat.row(r)) / T(cols);
                                dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) *
                                            inv_std[static_cast<std::size_t>(r)];
                            }
                            gr.accumulate(x, dx);
                        }
                    });
}

/// Multi-head full self-attention. qkv is [B * T, 3D] laid out as [Q | K | V];
/// output is [B * T, D]. Attention is restricted to tokens of the same batch element.
template <typename T>
Var attention(Graph<T>& g, Var qkv, long batch, long tokens, long heads) {
    const auto& QKV = g.value(qkv);
    detail::check(QKV.rows() == batch * tokens && QKV.cols() % 3 == 0, "attention", "qkv shape");
    const long d = QKV.cols() / 3;
    detail::check(heads > 0 && d % heads == 0, "attention", "width not divisible by heads");
    const long dh = d / heads;
    const T scale_factor = T(1) / std::sqrt(T(dh));

    Matrix<T> out(batch * tokens, d);
    // Softmax probabilities per (batch, head), each [tokens, tokens].
    std::vector<Matrix<T>> probs(static_cast<std::size_t>(batch * heads));
    for (long b = 0; b < batch; ++b) {
        for (long h = 0; h < heads; ++h) {
            const auto q = QKV.block(b * tokens, h * dh, tokens, dh);
            const auto k = QKV.block(b * tokens, d + h * dh, tokens, dh);
            const auto v = QKV.block(b * tokens, 2 * d + h * dh, tokens, dh);
            Matrix<T> s = (q * k.transpose()) * scale_factor;
            for (long r = 0; r < tokens; ++r) {
                const T mx = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - mx).exp();
                s.row(r) /= s.row(r).sum();
            }
            out.block(b * tokens, h * dh, tokens, dh) = s * v;
            probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
        }
    }
    return g.record(std::move(out), {qkv},
                    [qkv, batch, tokens, heads, d, dh, scale_factor, probs = std::move(probs)](Graph<T>& gr,
                                                                                               const Matrix<T>& dy) {
                        const auto& QKVv = gr.value(qkv);
                        Matrix<T> dqkv = Matrix<T>::Zero(QKVv.rows(), QKVv.cols());
                        for (long b = 0; b < batch; ++b) {
                            for (long h = 0; h < heads; ++h) {
                                const Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
                                const auto q = QKVv.block(b * tokens, h * dh, tokens, dh);
                                const auto k = QKVv.block(b * tokens, d + h * dh, tokens, dh);
                                const auto v = QKVv.block(b * tokens, 2 * d + h * dh, tokens, dh);
                                const auto dout = dy.block(b * tokens, h * dh, tokens, dh);
                                Matrix<T> dp = dout * v.transpose();
                                dqkv.block(b * tokens, 2 * d + h * dh, tokens, dh) = p.transpose() * dout;
                                Matrix<T> ds(tokens, tokens);
                                for (long r = 0; r < tokens; ++r) {
                                    const T dotp = dp.row(r).dot(p.row(r));
                                    ds.row(r) = p.row(r).array() * (dp.row(r).array() - dotp);
                                }
                                ds *= scale_factor;
                                dqkv.block(b * tokens, h * dh, tokens, dh) = ds * k;
                                dqkv.block(b * tokens, d + h * dh, tokens, dh) = ds.transpose() * q;
                            }
                        }
                        gr.accumulate(qkv, dqkv);
                    });
}

/// Row lookup: out row i = table row indices[i].
template <typename T>
Var embedding(Graph<T>& g, Var table, std::vector<int> indices) {
    const auto& Tb = g.value(table);
    Matrix<T> y(static_cast<long>(indices.size()), Tb.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        detail::check(indices[i] >= 0 && indices[i] < Tb.rows(), "embedding", "index out of range");
        y.row(static_cast<long>(i)) = Tb.row(indices[i]);
    }
    return g.record(std::move(y), {table}, [table, indices = std::move(indices)](Graph<T>& gr, const Matrix<T>& dy) {
        auto& buf = gr.grad_buffer(table);
        for (std::size_t i = 0; i < indices.size(); ++i) buf.row(indices[i]) += dy.row(static_cast<long>(i));
    });
}

/// Fixed elementwise gather: out.flat[i] = in.flat[index[i]]; index -1 yields zero.
/// Used for patch (un)folding.
template <typename T>
Var gather(Graph<T>& g, Var a, long rows, long cols, std::shared_ptr<const std::vector<long>> index) {
    detail::check(static_cast<long>(index->size()) == rows * cols, "gather", "index size");
    const auto& A = g.value(a);
    Matrix<T> y(rows, cols);
    const T* src = A.data();
    T* dst = y.data();
    for (std::size_t i = 0; i < index->size(); ++i) dst[i] = (*index)[i] >= 0 ? src[(*index)[i]] : T(0);
    return g.record(std::move(y), {a}, [a, index](Graph<T>& gr, const Matrix<T>& dy) {
        auto& buf = gr.grad_buffer(a);
        T* d = buf.data();
        const T* s = dy.data();
        for (std::size_t i = 0; i < index->size(); ++i)
            if ((*index)[i] >= 0) d[(*index)[i]] += s[i];
    });
}

namespace detail {

/// 3x3, stride 1, zero padding 1 im2col on NHWC rows: out [B*H*W, 9*C] with
/// column block (ky*3 + kx) holding channel values at offset (ky-1, kx-1).
template <typename T>
Matrix<T> im2col3x3(const Matrix<T>& x, long batch, long h, long w) {
    const long c = x.cols();
    Matrix<T> col = Matrix<T>::Zero(batch * h * w, 9 * c);
    for (long b = 0; b < batch; ++b)
        for (long y = 0; y < h; ++y)
            for (long xx = 0; xx < w; ++xx) {
                const long row = (b * h + y) * w + xx;
                for (int ky = 0; ky < 3; ++ky) {
                    const long sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const long sx = xx + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        col.block(row, (ky * 3 + kx) * c, 1, c) = x.row((b * h + sy) * w + sx);
                    }
                }
            }
    return col;
}

template <typename T>
Matrix<T> col2im3x3(const Matrix<T>& col, long batch, long h, long w, long c) {
    Matrix<T> x = Matrix<T>::Zero(batch * h * w, c);
    for (long b = 0; b < batch; ++b)
        for (long y = 0; y < h; ++y)
            for (long xx = 0; xx < w; ++xx) {
                const long row = (b * h + y) * w + xx;
                for (int ky = 0; ky < 3; ++ky) {
                    const long sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const long sx = xx + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        x.row((b * h + sy) * w + sx) += col.block(row, (ky * 3 + kx) * c, 1, c);
                    }
                }
            }
    return x;
}

}  // namespace detail

/// Dense 3x3 convolution (padding 1) on NHWC rows [B*H*W, Cin]; weight [9*Cin, Cout].
template <typename T>
Var conv3x3(Graph<T>& g, Var x, Var weight, Var bias, long batch, long h, long w) {
    const auto& X = g.value(x);
    detail::check(X.rows() == batch * h * w, "conv3x3", "input rows");
    detail::check(g.value(weight).rows() == 9 * X.cols(), "conv3x3", "weight rows");
    Matrix<T> col = detail::im2col3x3(X, batch, h, w);
    Matrix<T> y = col * g.value(weight);
    y.rowwise() += g.value(bias).row(0);
    const long cin = X.cols();
    return g.record(std::move(y), {x, weight, bias},
                    [x, weight, bias, batch, h, w, cin, col = std::move(col)](Graph<T>& gr, const Matrix<T>& dy) {
                        if (gr.needs_grad(weight)) gr.accumulate(weight, col.transpose() * dy);
                        if (gr.needs_grad(bias)) gr.accumulate(bias, dy.colwise().sum());
                        if (gr.needs_grad(x)) {
                            Matrix<T> dcol = dy * gr.value(weight).transpose();
                            gr.accumulate(x, detail::col2im3x3(dcol, batch, h, w, cin));
                        }
                    });
}

/// Depthwise 3x3 convolution (padding 1) on NHWC rows; kernel [9, C], bias [1, C].
template <typename T>
Var depthwise3x3(Graph<T>& g, Var x, Var kernel, Var bias, long batch, long h, long w) {
    const auto& X = g.value(x);
    const long c = X.cols();
    detail::check(X.rows() == batch * h * w, "depthwise3x3", "input rows");
    detail::check(g.value(kernel).rows() == 9 && g.value(kernel).cols() == c, "depthwise3x3", "kernel shape");
    const auto& K = g.value(kernel);
    Matrix<T> y(X.rows(), c);
    y.rowwise() = g.value(bias).row(0);
    for (long b = 0; b < batch; ++b)
        for (long yy = 0; yy < h; ++yy)
            for (long xx = 0; xx < w; ++xx) {
                const long row = (b * h + yy) * w + xx;
                for (int ky = 0; ky < 3; ++ky) {
                    const long sy = yy + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const long sx = xx + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        y.row(row).array() += X.row((b * h + sy) * w + sx).array() * K.row(ky * 3 + kx).array();
                    }
                }
            }
    return g.record(std::move(y), {x, kernel, bias}, [x, kernel, bias, batch, h, w](Graph<T>& gr, const Matrix<T>& dy) {
        const auto& Xv = gr.value(x);
        const auto& Kv = gr.value(kernel);
        const long c = Xv.cols();
        const bool want_x = gr.needs_grad(x), want_k = gr.needs_grad(kernel);
        Matrix<T> dx = want_x ? Matrix<T>::Zero(Xv.rows(), c) : Matrix<T>();
        Matrix<T> dk = want_k ? Matrix<T>::Zero(9, c) : Matrix<T>();
        for (long b = 0; b < batch; ++b)
            for (long yy = 0; yy < h; ++yy)
                for (long xx = 0; xx < w; ++xx) {
                    const long row = (b * h + yy) * w + xx;
                    for (int ky = 0; ky < 3; ++ky) {
                        const long sy = yy + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const long sx = xx + kx - 1;
                            if (sx < 0 || sx >= w) continue;
                            const long src = (b * h + sy) * w + sx;
                            if (want_x) dx.row(src).array() += dy.row(row).array() * Kv.row(ky * 3 + kx).array();
                            if (want_k) dk.row(ky * 3 + kx).array() += dy.row(row).array() * Xv.row(src).array();
                        }
                    }
                }
        if (want_x) gr.accumulate(x, dx);
        if (want_k) gr.accumulate(kernel, dk);
        if (gr.needs_grad(bias)) gr.accumulate(bias, dy.colwise().sum());
    });
}

/// Per-batch-element left multiplication by a fixed matrix: out_b = M x_b, where
/// x is [B * R_in, C] and M is [R_out, R_in].
template <typename T>
Var mix_rows(Graph<T>& g, Var x, std::shared_ptr<const Matrix<T>> mixer, long batch) {
    const auto& X = g.value(x);
    const long rin = mixer->cols(), rout = mixer->rows();
    detail::check(X.rows() == batch * rin, "mix_rows", "row count");
    Matrix<T> y(batch * rout, X.cols());
    for (long b = 0; b < batch; ++b) y.middleRows(b * rout, rout) = (*mixer) * X.middleRows(b * rin, rin);
    return g.record(std::move(y), {x}, [x, mixer, batch, rin, rout](Graph<T>& gr, const Matrix<T>& dy) {
        Matrix<T> dx(batch * rin, dy.cols());
        for (long b = 0; b < batch; ++b) dx.middleRows(b * rin, rin) = mixer->transpose() * dy.middleRows(b * rout, rout);
        gr.accumulate(x, dx);
    });
}

/// Mean squared difference over all elements; b is typically a constant target.
template <typename T>
Var mse(Graph<T>& g, Var pred, Var target) {
    const auto& P = g.value(pred);
    const auto& Q = g.value(target);
    detail::check(P.rows() == Q.rows() && P.cols() == Q.cols(), "mse", "shape mismatch");
    const T n = T(P.size());
    Matrix<T> y(1, 1);
    y(0, 0) = (P - Q).squaredNorm() / n;
    return g.record(std::move(y), {pred, target}, [pred, target, n](Graph<T>& gr, const Matrix<T>& dy) {
        const Matrix<T> diff = gr.value(pred) - gr.value(target);
        const T s = dy(0, 0) * T(2) / n;
        if (gr.needs_grad(pred)) gr.accumulate(pred, diff * s);
        if (gr.needs_grad(target)) gr.accumulate(target, diff * (-s));
    });
}

/// Mean over all complex bins of |DFT(pred) - DFT(target)|^2 for NHWC image rows
/// [B*H*W, C]. The backward pass applies the adjoint (unnormalised inverse) DFT.
template <typename T>
Var spectral_mse(Graph<T>& g, Var pred, Var target, long batch, long h, long w) {
    const auto& P = g.value(pred);
    const auto& Q = g.value(target);
    detail::check(P.rows() == Q.rows() && P.cols() == Q.cols() && P.rows() == batch * h * w, "spectral_mse",
                  "shape mismatch");
    const long c = P.cols();
    const T bins = T(batch * c * h * w);
    using Cx = std::complex<T>;
    // Spectra of the difference, [plane][h*w], planes ordered (b, channel).
    std::vector<Cx> spectra(static_cast<std::size_t>(batch * c * h * w));
    T total = 0;
    for (long b = 0; b < batch; ++b)
        for (long ch = 0; ch < c; ++ch) {
            Cx* plane = spectra.data() + static_cast<std::size_t>((b * c + ch) * h * w);
            for (long p = 0; p < h * w; ++p) plane[p] = Cx(P(b * h * w + p, ch) - Q(b * h * w + p, ch), T(0));
            ::freqflow::detail::dft2_plane(plane, static_cast<int>(h), static_cast<int>(w), -1);
            for (long p = 0; p < h * w; ++p) total += std::norm(plane[p]);
        }
    Matrix<T> y(1, 1);
    y(0, 0) = total / bins;
    return g.record(std::move(y), {pred, target},
                    [pred, target, batch, h, w, c, bins, spectra = std::move(spectra)](Graph<T>& gr,
                                                                                    const Matrix<T>& dy) mutable {
                        // dL/d(diff) = Re(F^H (2/bins) F diff).
                        const T s = dy(0, 0) * T(2) / bins;
                        Matrix<T> gdiff(batch * h * w, c);
                        std::vector<Cx> plane(static_cast<std::size_t>(h * w));
                        for (long b = 0; b < batch; ++b)
                            for (long ch = 0; ch < c; ++ch) {
                                const Cx* src = spectra.data() + static_cast<std::size_t>((b * c + ch) * h * w);
                                for (long p = 0; p < h * w; ++p) plane[static_cast<std::size_t>(p)] = src[p] * s;
                                ::freqflow::detail::dft2_plane(plane.data(), static_cast<int>(h), static_cast<int>(w), +1);
                                for (long p = 0; p < h * w; ++p) gdiff(b * h * w + p, ch) = plane[static_cast<std::size_t>(p)].real();
                            }
                        if (gr.needs_grad(pred)) gr.accumulate(pred, gdiff);
                        if (gr.needs_grad(target)) gr.accumulate(target, -gdiff);
                    });
}

/// sum_i weights[i] * terms[i] for scalar terms.
template <typename T>
Var weighted_sum(Graph<T>& g, std::vector<Var> terms, std::vector<T> weights) {
    detail::check(terms.size() == weights.size() && !terms.empty(), "weighted_sum", "arity");
    Matrix<T> y = Matrix<T>::Zero(1, 1);
    for (std::size_t i = 0; i < terms.size(); ++i) y(0, 0) += weights[i] * g.scalar(terms[i]);
    std::vector<Var> inputs = terms;
    return g.record(std::move(y), inputs, [terms = std::move(terms), weights = std::move(weights)](Graph<T>& gr,
                                                                                                const Matrix<T>& dy) {
        for (std::size_t i = 0; i < terms.size(); ++i) {
            if (!gr.needs_grad(terms[i])) continue;
            Matrix<T> gi(1, 1);
            gi(0, 0) = dy(0, 0) * weights[i];
            gr.accumulate(terms[i], gi);
        }
    });
}

}  // namespace ad
}  // namespace freqflow
