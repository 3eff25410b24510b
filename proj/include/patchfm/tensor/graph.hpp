#pragma once

#include "patchfm/tensor/array.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace patchfm {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Handle to a node in a Graph.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Describes how rows of a token matrix group into attention sequences.
/// Query rows index the q operand, key rows index k and v. Positions are only
/// compared under causal masking (key_pos <= query_pos).
struct AttentionLayout {
    struct Sequence {
        std::vector<std::size_t> query_rows;
        std::vector<int> query_pos;
        std::vector<std::size_t> key_rows;
        std::vector<int> key_pos;
    };
    std::vector<Sequence> sequences;
    bool causal = false;
    /// Indexed by key row; nonzero rows are excluded as keys. Empty means none.
    std::vector<std::uint8_t> key_masked;
};

/// Define-by-run reverse-mode tape. Every op records its forward value and a
/// backward closure; backward() walks the tape in reverse creation order, which
/// is a valid topological order because inputs always precede their consumers.
template <class T>
class Graph {
public:
    using Scalar = T;

    Var input(Array<T> value, std::string name = "input") {
        return push("input", {}, std::move(value), nullptr, std::move(name));
    }

    /// Leaf bound to a named parameter. Repeated calls with the same name share
    /// one node so that fan-out gradients accumulate.
    Var parameter(const std::string& name, const Array<T>& leaf) {
        if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{it->second};
        Var v = push("parameter", {}, leaf, nullptr, name);
        nodes_[v.id].requires_grad = true;
        param_ids_[name] = v.id;
        return v;
    }

    const Array<T>& value(Var v) const { return node(v).value; }

    const Array<T>& grad(Var v) const {
        const auto& n = node(v);
        if (n.grad.empty()) throw std::logic_error("no gradient recorded for node '" + n.name + "'");
        return n.grad;
    }

    bool has_grad(Var v) const { return !node(v).grad.empty(); }
    std::size_t size() const { return nodes_.size(); }
    const std::string& op_name(Var v) const { return node(v).op; }

    void backward(Var out, const Array<T>& seed) {
        if (nodes_.empty() || !out.valid() || std::size_t(out.id) >= nodes_.size())
            throw std::logic_error("backward called before forward recorded the output");
        if (seed.shape() != nodes_[out.id].value.shape())
            throw ShapeError("backward seed " + shape_str(seed.shape()) + " does not match output " +
                             shape_str(nodes_[out.id].value.shape()));
        for (auto& n : nodes_) n.grad = Array<T>();
        nodes_[out.id].grad = seed;
        for (int i = out.id; i >= 0; --i) {
            auto& n = nodes_[i];
            if (!n.requires_grad || !n.back || n.grad.empty()) continue;
            n.back(*this, i);
        }
        backward_done_ = true;
    }

    void backward(Var out) { backward(out, Array<T>::ones(value(out).shape())); }

    /// Gradient for every parameter leaf; parameters the output never reached
    /// get zeros.
    std::map<std::string, Array<T>> parameter_grads() const {
        if (!backward_done_) throw std::logic_error("parameter_grads requested before backward");
        std::map<std::string, Array<T>> out;
        for (const auto& [name, id] : param_ids_) {
            const auto& n = nodes_[id];
            out.emplace(name, n.grad.empty() ? Array<T>::zeros(n.value.shape()) : n.grad);
        }
        return out;
    }

    // ---- ops -----------------------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols() != B.rows())
            fail("matmul", "inner dims " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
        Array<T> out({A.rows(), B.cols()});
        out.mat().noalias() = A.mat() * B.mat();
        return push("matmul", {a.id, b.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto dC = n.grad.mat();
            if (g.wants(n.inputs[0]))
                g.grad_of(n.inputs[0]).mat().noalias() += dC * g.nodes_[n.inputs[1]].value.mat().transpose();
            if (g.wants(n.inputs[1]))
                g.grad_of(n.inputs[1]).mat().noalias() += g.nodes_[n.inputs[0]].value.mat().transpose() * dC;
        });
    }

    /// x · wᵀ with w stored (out, in).
    Var linear(Var x, Var w) {
        const auto& X = value(x);
        const auto& W = value(w);
        if (W.rank() != 2 || X.cols() != W.dim(1))
            fail("linear", "input " + shape_str(X.shape()) + " vs weight " + shape_str(W.shape()));
        Shape s = X.shape();
        s.back() = W.dim(0);
        Array<T> out(s);
        out.mat().noalias() = X.mat() * W.mat().transpose();
        return push("linear", {x.id, w.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto dY = n.grad.mat();
            if (g.wants(n.inputs[0]))
                g.grad_of(n.inputs[0]).mat().noalias() += dY * g.nodes_[n.inputs[1]].value.mat();
            if (g.wants(n.inputs[1]))
                g.grad_of(n.inputs[1]).mat().noalias() += dY.transpose() * g.nodes_[n.inputs[0]].value.mat();
        });
    }

    Var add(Var a, Var b) { return binary("add", a, b, 1); }
    Var sub(Var a, Var b) { return binary("sub", a, b, -1); }

    Var mul(Var a, Var b) {
        same_shape("mul", a, b);
        Array<T> out = value(a);
        out.mat().array() *= value(b).mat().array();
        return push("mul", {a.id, b.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            const auto& A = g.nodes_[n.inputs[0]].value;
            const auto& B = g.nodes_[n.inputs[1]].value;
            if (g.wants(n.inputs[0])) g.grad_of(n.inputs[0]).mat().array() += n.grad.mat().array() * B.mat().array();
            if (g.wants(n.inputs[1])) g.grad_of(n.inputs[1]).mat().array() += n.grad.mat().array() * A.mat().array();
        });
    }

    Var scale(Var a, T c) {
        Array<T> out = value(a);
        out.mat() *= c;
        return push("scale", {a.id}, std::move(out), [c](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat() += c * n.grad.mat();
        });
    }

    /// x + row, broadcasting a length-cols vector over every row.
    Var add_row(Var x, Var row) {
        check_row("add_row", x, row);
        Array<T> out = value(x);
        out.mat().rowwise() += value(row).mat().row(0);
        return push("add_row", {x.id, row.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            if (g.wants(n.inputs[0])) g.grad_of(n.inputs[0]).mat() += n.grad.mat();
            if (g.wants(n.inputs[1])) g.grad_of(n.inputs[1]).mat().row(0) += n.grad.mat().colwise().sum();
        });
    }

    /// x ⊙ row, broadcasting a length-cols vector over every row.
    Var mul_row(Var x, Var row) {
        check_row("mul_row", x, row);
        Array<T> out = value(x);
        out.mat().array().rowwise() *= value(row).mat().row(0).array();
        return push("mul_row", {x.id, row.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            const auto& X = g.nodes_[n.inputs[0]].value;
            const auto& R = g.nodes_[n.inputs[1]].value;
            if (g.wants(n.inputs[0]))
                g.grad_of(n.inputs[0]).mat().array() += n.grad.mat().array().rowwise() * R.mat().row(0).array();
            if (g.wants(n.inputs[1]))
                g.grad_of(n.inputs[1]).mat().row(0) +=
                    (n.grad.mat().array() * X.mat().array()).colwise().sum().matrix();
        });
    }

    Var transpose(Var a) {
        const auto& A = value(a);
        if (A.rank() != 2) fail("transpose", "expects rank 2, got " + shape_str(A.shape()));
        Array<T> out({A.dim(1), A.dim(0)});
        out.mat() = A.mat().transpose();
        return push("transpose", {a.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat() += n.grad.mat().transpose();
        });
    }

    Var reshape(Var a, Shape shape) {
        if (numel(shape) != value(a).size())
            fail("reshape", shape_str(value(a).shape()) + " -> " + shape_str(shape));
        Array<T> out = value(a).reshaped(std::move(shape));
        return push("reshape", {a.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto& gi = g.grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += n.grad[i];
        });
    }

    Var slice_cols(Var a, std::size_t begin, std::size_t end) {
        const auto& A = value(a);
        if (begin >= end || end > A.cols())
            fail("slice_cols", "[" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(A.shape()));
        Array<T> out({A.rows(), end - begin});
        out.mat() = A.mat().middleCols(Eigen::Index(begin), Eigen::Index(end - begin));
        return push("slice_cols", {a.id}, std::move(out), [begin](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat().middleCols(Eigen::Index(begin), n.grad.mat().cols()) += n.grad.mat();
        });
    }

    Var slice_rows(Var a, std::size_t begin, std::size_t end) {
        const auto& A = value(a);
        if (begin >= end || end > A.rows())
            fail("slice_rows", "[" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(A.shape()));
        Array<T> out({end - begin, A.cols()});
        out.mat() = A.mat().middleRows(Eigen::Index(begin), Eigen::Index(end - begin));
        return push("slice_rows", {a.id}, std::move(out), [begin](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat().middleRows(Eigen::Index(begin), n.grad.mat().rows()) += n.grad.mat();
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) fail("concat_cols", "no inputs");
        std::size_t rows = value(parts[0]).rows(), cols = 0;
        std::vector<int> ids;
        for (auto p : parts) {
            if (value(p).rows() != rows) fail("concat_cols", "row mismatch " + shape_str(value(p).shape()));
            cols += value(p).cols();
            ids.push_back(p.id);
        }
        Array<T> out({rows, cols});
        std::size_t c = 0;
        for (auto p : parts) {
            out.mat().middleCols(Eigen::Index(c), Eigen::Index(value(p).cols())) = value(p).mat();
            c += value(p).cols();
        }
        return push("concat_cols", ids, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            Eigen::Index c = 0;
            for (int id : n.inputs) {
                auto w = Eigen::Index(g.nodes_[id].value.cols());
                if (g.wants(id)) g.grad_of(id).mat() += n.grad.mat().middleCols(c, w);
                c += w;
            }
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) fail("concat_rows", "no inputs");
        std::size_t cols = value(parts[0]).cols(), rows = 0;
        std::vector<int> ids;
        for (auto p : parts) {
            if (value(p).cols() != cols) fail("concat_rows", "col mismatch " + shape_str(value(p).shape()));
            rows += value(p).rows();
            ids.push_back(p.id);
        }
        Array<T> out({rows, cols});
        std::size_t r = 0;
        for (auto p : parts) {
            out.mat().middleRows(Eigen::Index(r), Eigen::Index(value(p).rows())) = value(p).mat();
            r += value(p).rows();
        }
        return push("concat_rows", ids, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            Eigen::Index r = 0;
            for (int id : n.inputs) {
                auto h = Eigen::Index(g.nodes_[id].value.rows());
                if (g.wants(id)) g.grad_of(id).mat() += n.grad.mat().middleRows(r, h);
                r += h;
            }
        });
    }

    Var silu(Var a) {
        return unary("silu", a,
                     [](T x) { return x / (T(1) + std::exp(-x)); },
                     [](T x, T) {
                         T s = T(1) / (T(1) + std::exp(-x));
                         return s * (T(1) + x * (T(1) - s));
                     });
    }

    Var softplus(Var a) {
        return unary("softplus", a,
                     [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
                     [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
    }

    Var exp(Var a) {
        return unary("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
    }

    Var log(Var a) {
        return unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
    }

    Var sqrt(Var a) {
        return unary("sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
    }

    Var arcsinh(Var a) {
        return unary("arcsinh", a, [](T x) { return std::asinh(x); },
                     [](T x, T) { return T(1) / std::sqrt(x * x + T(1)); });
    }

    /// Softmax over the last axis.
    Var softmax(Var a) {
        Array<T> out = value(a);
        auto m = out.mat();
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            T mx = m.row(r).maxCoeff();
            m.row(r) = (m.row(r).array() - mx).exp();
            m.row(r) /= m.row(r).sum();
        }
        return push("softmax", {a.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto Y = n.value.mat();
            auto dY = n.grad.mat();
            auto& gi = g.grad_of(n.inputs[0]);
            for (Eigen::Index r = 0; r < Y.rows(); ++r) {
                T dot = Y.row(r).dot(dY.row(r));
                gi.mat().row(r).array() += Y.row(r).array() * (dY.row(r).array() - dot);
            }
        });
    }

    Var sum(Var a) {
        T s = value(a).mat().sum();
        return push("sum", {a.id}, Array<T>::scalar(s), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat().array() += n.grad[0];
        });
    }

    Var mean(Var a) {
        T inv = T(1) / T(value(a).size());
        return scale(sum(a), inv);
    }

    /// Sum over the last axis, producing shape (rows, 1).
    Var row_sum(Var a) {
        const auto& A = value(a);
        Array<T> out({A.rows(), 1});
        out.mat() = A.mat().rowwise().sum();
        return push("row_sum", {a.id}, std::move(out), [](Graph& g, int self) {
            auto& n = g.nodes_[self];
            g.grad_of(n.inputs[0]).mat().colwise() += n.grad.mat().col(0);
        });
    }

    Var masked_fill(Var a, std::vector<std::uint8_t> mask, T fill) {
        const auto& A = value(a);
        if (mask.size() != A.size()) fail("masked_fill", "mask length " + std::to_string(mask.size()));
        Array<T> out = A;
        for (std::size_t i = 0; i < out.size(); ++i)
            if (mask[i]) out[i] = fill;
        return push("masked_fill", {a.id}, std::move(out), [mask = std::move(mask)](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto& gi = g.grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < gi.size(); ++i)
                if (!mask[i]) gi[i] += n.grad[i];
        });
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    Var rms_norm(Var x, Var gain, T eps) {
        check_row("rms_norm", x, gain);
        const auto& X = value(x);
        const auto N = Eigen::Index(X.cols());
        Array<T> out(X.shape());
        std::vector<T> inv(X.rows());
        auto xm = X.mat();
        auto gm = value(gain).mat().row(0).array();
        for (Eigen::Index r = 0; r < xm.rows(); ++r) {
            T ms = xm.row(r).squaredNorm() / T(N);
            inv[r] = T(1) / std::sqrt(ms + eps);
            out.mat().row(r).array() = xm.row(r).array() * inv[r] * gm;
        }
        return push("rms_norm", {x.id, gain.id}, std::move(out), [inv = std::move(inv), N](Graph& g, int self) {
            auto& n = g.nodes_[self];
            auto xm = g.nodes_[n.inputs[0]].value.mat();
            auto gm = g.nodes_[n.inputs[1]].value.mat().row(0).array();
            auto dY = n.grad.mat();
            bool wx = g.wants(n.inputs[0]), wg = g.wants(n.inputs[1]);
            for (Eigen::Index r = 0; r < xm.rows(); ++r) {
                T ir = inv[r];
                if (wx) {
                    auto gy = (dY.row(r).array() * gm).eval();
                    T dot = (gy * xm.row(r).array()).sum();
                    g.grad_of(n.inputs[0]).mat().row(r).array() +=
                        ir * gy - xm.row(r).array() * (ir * ir * ir * dot / T(N));
                }
                if (wg) g.grad_of(n.inputs[1]).mat().row(0).array() += dY.row(r).array() * xm.row(r).array() * ir;
            }
        });
    }

    /// Rotary position embedding on each head_dim block of every row; rotates
    /// dimension pairs (i, i + head_dim/2) by angle pos · base^(-2i/head_dim).
    Var rope(Var x, std::vector<int> positions, std::size_t head_dim, T base = T(10000)) {
        const auto& X = value(x);
        if (positions.size() != X.rows()) fail("rope", "positions length " + std::to_string(positions.size()));
        if (head_dim % 2 || X.cols() % head_dim) fail("rope", "head_dim " + std::to_string(head_dim));
        const std::size_t half = head_dim / 2;
        std::vector<T> cs(X.rows() * half), sn(X.rows() * half);
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t i = 0; i < half; ++i) {
                T theta = T(positions[r]) * std::pow(base, -T(2 * i) / T(head_dim));
                cs[r * half + i] = std::cos(theta);
                sn[r * half + i] = std::sin(theta);
            }
        Array<T> out(X.shape());
        rotate(X, out, cs, sn, head_dim, false);
        return push("rope", {x.id}, std::move(out),
                    [cs = std::move(cs), sn = std::move(sn), head_dim](Graph& g, int self) {
                        auto& n = g.nodes_[self];
                        Array<T> back(n.grad.shape());
                        rotate(n.grad, back, cs, sn, head_dim, true);
                        g.grad_of(n.inputs[0]).mat() += back.mat();
                    });
    }

    /// Multi-head scaled dot-product attention over the sequences of `layout`.
    /// logits = logit_scale · q_h · k_hᵀ. A query whose every admissible key is
    /// masked falls back to the key sharing its own position.
    Var attention(Var q, Var k, Var v, AttentionLayout layout, std::size_t heads, T logit_scale) {
        const auto& Q = value(q);
        const auto& K = value(k);
        const auto& V = value(v);
        if (K.cols() != Q.cols() || V.cols() != Q.cols() || K.rows() != V.rows())
            fail("attention", "q " + shape_str(Q.shape()) + " k " + shape_str(K.shape()) + " v " + shape_str(V.shape()));
        if (heads == 0 || Q.cols() % heads) fail("attention", "heads " + std::to_string(heads));
        if (!layout.key_masked.empty() && layout.key_masked.size() != K.rows())
            fail("attention", "key mask length " + std::to_string(layout.key_masked.size()));
        const auto dh = Eigen::Index(Q.cols() / heads);
        Array<T> out({Q.rows(), Q.cols()});
        std::vector<RowMat<T>> probs;
        probs.reserve(layout.sequences.size() * heads);
        for (const auto& seq : layout.sequences) {
            const auto nq = Eigen::Index(seq.query_rows.size());
            const auto nk = Eigen::Index(seq.key_rows.size());
            RowMat<T> Qs = gather(Q, seq.query_rows), Ks = gather(K, seq.key_rows), Vs = gather(V, seq.key_rows);
            RowMat<T> allowed = admissible(seq, layout);
            for (std::size_t h = 0; h < heads; ++h) {
                const auto c0 = Eigen::Index(h) * dh;
                RowMat<T> S = logit_scale * (Qs.middleCols(c0, dh) * Ks.middleCols(c0, dh).transpose());
                for (Eigen::Index i = 0; i < nq; ++i) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (Eigen::Index j = 0; j < nk; ++j)
                        if (allowed(i, j) != T(0)) mx = std::max(mx, S(i, j));
                    T total = 0;
                    for (Eigen::Index j = 0; j < nk; ++j) {
                        S(i, j) = allowed(i, j) != T(0) ? std::exp(S(i, j) - mx) : T(0);
                        total += S(i, j);
                    }
                    S.row(i) /= total;
                }
                RowMat<T> O = S * Vs.middleCols(c0, dh);
                for (Eigen::Index i = 0; i < nq; ++i)
                    out.mat().row(Eigen::Index(seq.query_rows[i])).segment(c0, dh) = O.row(i);
                probs.push_back(std::move(S));
            }
        }
        return push("attention", {q.id, k.id, v.id}, std::move(out),
                    [layout = std::move(layout), probs = std::move(probs), heads, dh, logit_scale](Graph& g, int self) {
                        auto& n = g.nodes_[self];
                        const auto& Q = g.nodes_[n.inputs[0]].value;
                        const auto& K = g.nodes_[n.inputs[1]].value;
                        const auto& V = g.nodes_[n.inputs[2]].value;
                        bool wq = g.wants(n.inputs[0]), wk = g.wants(n.inputs[1]), wv = g.wants(n.inputs[2]);
                        std::size_t pi = 0;
                        for (const auto& seq : layout.sequences) {
                            RowMat<T> Qs = gather(Q, seq.query_rows), Ks = gather(K, seq.key_rows),
                                      Vs = gather(V, seq.key_rows), dO = gather(n.grad, seq.query_rows);
                            RowMat<T> dQ = RowMat<T>::Zero(Qs.rows(), Qs.cols());
                            RowMat<T> dK = RowMat<T>::Zero(Ks.rows(), Ks.cols());
                            RowMat<T> dV = RowMat<T>::Zero(Vs.rows(), Vs.cols());
                            for (std::size_t h = 0; h < heads; ++h, ++pi) {
                                const auto c0 = Eigen::Index(h) * dh;
                                const RowMat<T>& P = probs[pi];
                                auto dOh = dO.middleCols(c0, dh);
                                dV.middleCols(c0, dh).noalias() += P.transpose() * dOh;
                                RowMat<T> dP = dOh * Vs.middleCols(c0, dh).transpose();
                                RowMat<T> dS = P.array() *
                                               (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
                                dS *= logit_scale;
                                dQ.middleCols(c0, dh).noalias() += dS * Ks.middleCols(c0, dh);
                                dK.middleCols(c0, dh).noalias() += dS.transpose() * Qs.middleCols(c0, dh);
                            }
                            if (wq) scatter_add(g.grad_of(n.inputs[0]), seq.query_rows, dQ);
                            if (wk) scatter_add(g.grad_of(n.inputs[1]), seq.key_rows, dK);
                            if (wv) scatter_add(g.grad_of(n.inputs[2]), seq.key_rows, dV);
                        }
                    });
    }

    /// Weighted mean pinball loss. pred rows hold steps × levels values
    /// (level fastest); target and weight rows hold one value per step.
    /// Normalized by levels · Σweight; zero total weight yields 0.
    Var quantile_loss(Var pred, Array<T> target, Array<T> weight, std::span<const double> levels) {
        const auto& Pm = value(pred);
        const std::size_t nl = levels.size();
        if (target.size() != weight.size() || Pm.size() != target.size() * nl)
            fail("quantile_loss", "pred " + shape_str(Pm.shape()) + " target " + shape_str(target.shape()));
        std::vector<T> tau(levels.begin(), levels.end());
        T wsum = 0;
        for (std::size_t i = 0; i < weight.size(); ++i) wsum += weight[i];
        T loss = 0;
        std::vector<T> dpred(Pm.size(), T(0));
        if (wsum > T(0)) {
            const T norm = T(1) / (T(nl) * wsum);
            for (std::size_t i = 0; i < target.size(); ++i) {
                if (weight[i] == T(0)) continue;
                const T y = target[i];
                for (std::size_t l = 0; l < nl; ++l) {
                    const T qh = Pm[i * nl + l];
                    const T r = y - qh;
                    loss += weight[i] * r * (tau[l] - (y < qh ? T(1) : T(0)));
                    T gq = y > qh ? -tau[l] : (y < qh ? T(1) - tau[l] : T(0));
                    dpred[i * nl + l] = weight[i] * gq * norm;
                }
            }
            loss *= norm;
        }
        return push("quantile_loss", {pred.id}, Array<T>::scalar(loss),
                    [dpred = std::move(dpred)](Graph& g, int self) {
                        auto& n = g.nodes_[self];
                        auto& gi = g.grad_of(n.inputs[0]);
                        const T s = n.grad[0];
                        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += s * dpred[i];
                    });
    }

private:
    struct Node {
        std::string op;
        std::vector<int> inputs;
        Array<T> value;
        Array<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&, int)> back;
        std::string name;
    };

    const Node& node(Var v) const {
        if (!v.valid() || std::size_t(v.id) >= nodes_.size()) throw std::out_of_range("invalid graph node");
        return nodes_[v.id];
    }

    bool wants(int id) const { return nodes_[id].requires_grad; }

    Array<T>& grad_of(int id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Array<T>::zeros(n.value.shape());
        return n.grad;
    }

    Var push(std::string op, std::vector<int> inputs, Array<T> value, std::function<void(Graph&, int)> back,
             std::string name = {}) {
        Node n;
        n.requires_grad = false;
        for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
        n.op = std::move(op);
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.back = std::move(back);
        n.name = name.empty() ? n.op + "#" + std::to_string(nodes_.size()) : std::move(name);
        nodes_.push_back(std::move(n));
        backward_done_ = false;
        return Var{int(nodes_.size() - 1)};
    }

    [[noreturn]] void fail(const std::string& op, const std::string& detail) const {
        throw ShapeError(op + " (node #" + std::to_string(nodes_.size()) + "): " + detail);
    }

    void same_shape(const char* op, Var a, Var b) const {
        if (value(a).shape() != value(b).shape())
            fail(op, shape_str(value(a).shape()) + " vs " + shape_str(value(b).shape()));
    }

    void check_row(const char* op, Var x, Var row) const {
        if (value(row).size() != value(x).cols())
            fail(op, "row vector " + shape_str(value(row).shape()) + " vs " + shape_str(value(x).shape()));
    }

    Var binary(const char* op, Var a, Var b, int sign) {
        same_shape(op, a, b);
        Array<T> out = value(a);
        out.mat() += T(sign) * value(b).mat();
        return push(op, {a.id, b.id}, std::move(out), [sign](Graph& g, int self) {
            auto& n = g.nodes_[self];
            if (g.wants(n.inputs[0])) g.grad_of(n.inputs[0]).mat() += n.grad.mat();
            if (g.wants(n.inputs[1])) g.grad_of(n.inputs[1]).mat() += T(sign) * n.grad.mat();
        });
    }

    template <class F, class D>
    Var unary(const char* op, Var a, F f, D df) {
        Array<T> out = value(a);
        for (auto& x : out.vec()) x = f(x);
        return push(op, {a.id}, std::move(out), [df](Graph& g, int self) {
            auto& n = g.nodes_[self];
            const auto& X = g.nodes_[n.inputs[0]].value;
            auto& gi = g.grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += n.grad[i] * df(X[i], n.value[i]);
        });
    }

    static RowMat<T> gather(const Array<T>& A, const std::vector<std::size_t>& rows) {
        RowMat<T> out(Eigen::Index(rows.size()), Eigen::Index(A.cols()));
        for (std::size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = A.mat().row(Eigen::Index(rows[i]));
        return out;
    }

    static void scatter_add(Array<T>& A, const std::vector<std::size_t>& rows, const RowMat<T>& m) {
        for (std::size_t i = 0; i < rows.size(); ++i) A.mat().row(Eigen::Index(rows[i])) += m.row(Eigen::Index(i));
    }

    static RowMat<T> admissible(const AttentionLayout::Sequence& seq, const AttentionLayout& layout) {
        const auto nq = Eigen::Index(seq.query_rows.size());
        const auto nk = Eigen::Index(seq.key_rows.size());
        RowMat<T> allowed = RowMat<T>::Zero(nq, nk);
        for (Eigen::Index i = 0; i < nq; ++i) {
            bool any = false;
            Eigen::Index self_key = -1;
            for (Eigen::Index j = 0; j < nk; ++j) {
                if (seq.key_pos[j] == seq.query_pos[i]) self_key = j;
                if (layout.causal && seq.key_pos[j] > seq.query_pos[i]) continue;
                if (!layout.key_masked.empty() && layout.key_masked[seq.key_rows[j]]) continue;
                allowed(i, j) = T(1);
                any = true;
            }
            if (!any) {
                if (self_key < 0) throw ShapeError("attention: fully masked query without a self key");
                allowed(i, self_key) = T(1);
            }
        }
        return allowed;
    }

    static void rotate(const Array<T>& in, Array<T>& out, const std::vector<T>& cs, const std::vector<T>& sn,
                       std::size_t head_dim, bool inverse) {
        const std::size_t half = head_dim / 2;
        const std::size_t cols = in.cols();
        for (std::size_t r = 0; r < in.rows(); ++r)
            for (std::size_t h0 = 0; h0 < cols; h0 += head_dim)
                for (std::size_t i = 0; i < half; ++i) {
                    const T c = cs[r * half + i];
                    const T s = inverse ? -sn[r * half + i] : sn[r * half + i];
                    const T a = in[r * cols + h0 + i];
                    const T b = in[r * cols + h0 + i + half];
                    out[r * cols + h0 + i] = a * c - b * s;
                    out[r * cols + h0 + i + half] = a * s + b * c;
                }
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> param_ids_;
    bool backward_done_ = false;
};

}  // namespace patchfm
