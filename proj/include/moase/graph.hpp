#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moase/error.hpp"
#include "moase/tensor.hpp"

namespace moase {

enum class Op : std::uint8_t {
    leaf,
    constant,
    matmul,
    batch_matmul,
    add,
    mul,
    scale_rows,
    relu,
    tanh,
    softmax_lastdim,
    log_softmax_lastdim,
    layer_norm,
    mean_over_axis,
    sum,
    scale,
    shift,
    log,
    neg,
    slice_last,
    concat_last,
    select_last,
    take_token,
    prepend_token,
    patchify,
    custom,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::matmul: return "matmul";
        case Op::batch_matmul: return "batch_matmul";
        case Op::add: return "add";
        case Op::mul: return "mul";
        case Op::scale_rows: return "scale_rows";
        case Op::relu: return "relu";
        case Op::tanh: return "tanh";
        case Op::softmax_lastdim: return "softmax_lastdim";
        case Op::log_softmax_lastdim: return "log_softmax_lastdim";
        case Op::layer_norm: return "layer_norm";
        case Op::mean_over_axis: return "mean_over_axis";
        case Op::sum: return "sum";
        case Op::scale: return "scale";
        case Op::shift: return "shift";
        case Op::log: return "log";
        case Op::neg: return "neg";
        case Op::slice_last: return "slice_last";
        case Op::concat_last: return "concat_last";
        case Op::select_last: return "select_last";
        case Op::take_token: return "take_token";
        case Op::prepend_token: return "prepend_token";
        case Op::patchify: return "patchify";
        case Op::custom: return "custom";
    }
    return "?";
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class GradientMap {
public:
    const Tensor& at(const Var& v) const {
        auto it = grads_.find(v.id);
        if (it == grads_.end()) throw ValidationError("no gradient recorded for node " + std::to_string(v.id));
        return it->second;
    }
    bool contains(const Var& v) const { return grads_.count(v.id) != 0; }
    std::size_t size() const { return grads_.size(); }

private:
    friend class Graph;
    std::unordered_map<std::size_t, Tensor> grads_;
};

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// index is a topological order and backward walks it in reverse.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = true) {
        if (!value.all_finite()) throw NumericError("non-finite value in leaf input");
        return push(Op::leaf, {}, std::move(value), requires_grad, {});
    }

    Var constant(Tensor value) {
        if (!value.all_finite()) throw NumericError("non-finite value in constant input");
        return push(Op::constant, {}, std::move(value), false, {});
    }

    /// Appends a computed node. The backward rule is dropped when no input
    /// requires a gradient.
    Var record(Op op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
        if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op_name(op));
        bool needs = false;
        for (std::size_t in : inputs) {
            if (in >= nodes_.size()) throw ValidationError("input id does not precede its consumer");
            needs = needs || nodes_[in].requires_grad;
        }
        return push(op, std::move(inputs), std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    const Tensor& value(const Var& v) const { return value(v.id); }
    Op op(std::size_t id) const { return nodes_.at(id).op; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool requires_grad(const Var& v) const { return requires_grad(v.id); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer of a node during backward (sized like its value).
    std::vector<double>& grad(std::size_t id) { return nodes_[id].grad; }

    std::uint64_t macs() const { return macs_; }
    void add_macs(std::uint64_t n) { macs_ += n; }

    GradientMap backward(const Var& loss) {
        if (loss.graph != this) throw ValidationError("loss belongs to a different graph");
        const Tensor& lv = value(loss.id);
        if (lv.size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(lv.shape()));
        for (auto& n : nodes_) n.grad.clear();
        GradientMap out;
        if (!nodes_[loss.id].requires_grad) return out;
        for (std::size_t i = 0; i <= loss.id; ++i) {
            if (nodes_[i].requires_grad) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
        }
        nodes_[loss.id].grad[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.op == Op::leaf) continue;
            if (!n.backward) throw UnsupportedOp(std::string("no backward rule for node ") + std::to_string(i) + " (" + op_name(n.op) + ")");
            n.backward(*this, i);
        }
        for (std::size_t i = 0; i <= loss.id; ++i) {
            if (nodes_[i].op == Op::leaf && nodes_[i].requires_grad) {
                out.grads_.emplace(i, Tensor(nodes_[i].value.shape(), nodes_[i].grad));
            }
        }
        return out;
    }

private:
    struct Node {
        Op op;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool requires_grad;
        BackwardFn backward;
        std::vector<double> grad;
    };

    Var push(Op op, std::vector<std::size_t> inputs, Tensor value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), requires_grad, std::move(backward), {}});
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;  // stable addresses: values stay valid as the tape grows
    std::uint64_t macs_ = 0;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
    if (a.graph != b.graph || a.graph == nullptr) throw ValidationError("operands belong to different graphs");
    return *a.graph;
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

inline bool is_prefix(const Shape& full, const Shape& head) {
    if (head.size() > full.size()) return false;
    return std::equal(head.begin(), head.end(), full.begin());
}

inline void accumulate(Graph& g, std::size_t id, std::size_t i, double v) {
    g.grad(id)[i] += v;
}

template <class UnaryValue, class UnaryGrad>
Var elementwise(const Var& x, Op op, UnaryValue f, UnaryGrad df) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    const std::size_t xi = x.id;
    return g.record(op, {xi}, std::move(out), [xi, df](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const Tensor& xv = g.value(xi);
        const Tensor& yv = g.value(self);
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * df(xv[i], yv[i]);
    });
}

}  // namespace detail

/// a: [..., m, k] times b: [k, n] (or b: [n, k] when transpose_b) -> [..., m, n].
/// Leading dimensions of a are flattened into rows.
inline Var matmul(const Var& a, const Var& b, bool transpose_b = false) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() < 1 || bv.rank() != 2) throw ShapeError("matmul needs rank>=1 lhs and rank-2 rhs");
    const std::size_t k = av.shape().back();
    const std::size_t bk = transpose_b ? bv.dim(1) : bv.dim(0);
    const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
    if (k != bk) throw ShapeError("matmul contraction mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t rows = av.size() / k;
    Shape os = av.shape();
    os.back() = n;
    Tensor out(os);
    const double* A = av.data().data();
    const double* B = bv.data().data();
    double* C = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* c = C + r * n;
        const double* arow = A + r * k;
        if (transpose_b) {
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = B + j * k;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                c[j] = s;
            }
        } else {
            for (std::size_t p = 0; p < k; ++p) {
                const double ap = arow[p];
                const double* brow = B + p * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += ap * brow[j];
            }
        }
    }
    g.add_macs(static_cast<std::uint64_t>(rows) * k * n);
    const std::size_t ai = a.id, bi = b.id;
    return g.record(Op::matmul, {ai, bi}, std::move(out), [ai, bi, rows, k, n, transpose_b](Graph& g, std::size_t self) {
        const double* A = g.value(ai).data().data();
        const double* B = g.value(bi).data().data();
        const double* G = g.grad(self).data();
        if (g.requires_grad(ai)) {
            double* GA = g.grad(ai).data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* go = G + r * n;
                double* ga = GA + r * k;
                if (transpose_b) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gj = go[j];
                        const double* brow = B + j * k;
                        for (std::size_t p = 0; p < k; ++p) ga[p] += gj * brow[p];
                    }
                } else {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = B + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += go[j] * brow[j];
                        ga[p] += s;
                    }
                }
            }
        }
        if (g.requires_grad(bi)) {
            double* GB = g.grad(bi).data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* go = G + r * n;
                const double* arow = A + r * k;
                if (transpose_b) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gj = go[j];
                        double* gb = GB + j * k;
                        for (std::size_t p = 0; p < k; ++p) gb[p] += gj * arow[p];
                    }
                } else {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double ap = arow[p];
                        double* gb = GB + p * n;
                        for (std::size_t j = 0; j < n; ++j) gb[j] += ap * go[j];
                    }
                }
            }
        }
    });
}

/// a: [B, m, k] times b: [B, k, n] (or [B, n, k] when transpose_b) -> [B, m, n].
inline Var batch_matmul(const Var& a, const Var& b, bool transpose_b = false) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
        throw ShapeError("batch_matmul needs matching rank-3 operands, got " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2);
    const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
    const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
    if (k != bk) throw ShapeError("batch_matmul contraction mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Tensor out({nb, m, n});
    for (std::size_t s = 0; s < nb; ++s) {
        const double* A = av.data().data() + s * m * k;
        const double* B = bv.data().data() + s * k * n;
        double* C = out.data().data() + s * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * (transpose_b ? B[j * k + p] : B[p * n + j]);
                C[i * n + j] = acc;
            }
        }
    }
    g.add_macs(static_cast<std::uint64_t>(nb) * m * k * n);
    const std::size_t ai = a.id, bi = b.id;
    return g.record(Op::batch_matmul, {ai, bi}, std::move(out), [ai, bi, nb, m, k, n, transpose_b](Graph& g, std::size_t self) {
        const bool need_a = g.requires_grad(ai), need_b = g.requires_grad(bi);
        for (std::size_t s = 0; s < nb; ++s) {
            const double* A = g.value(ai).data().data() + s * m * k;
            const double* B = g.value(bi).data().data() + s * k * n;
            const double* G = g.grad(self).data() + s * m * n;
            double* GA = need_a ? g.grad(ai).data() + s * m * k : nullptr;
            double* GB = need_b ? g.grad(bi).data() + s * k * n : nullptr;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double go = G[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) {
                        const std::size_t bidx = transpose_b ? j * k + p : p * n + j;
                        if (GA) GA[i * k + p] += go * B[bidx];
                        if (GB) GB[bidx] += go * A[i * k + p];
                    }
                }
            }
        }
    });
}

namespace detail {

// Shared by add/mul: rhs is either the same shape or a trailing suffix of lhs.
inline std::size_t suffix_period(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() == b.shape()) return a.size();
    if (!is_suffix(a.shape(), b.shape())) {
        throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    }
    return b.size();
}

}  // namespace detail

/// Elementwise sum; b may be a trailing-suffix broadcast (e.g. a bias).
inline Var add(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t period = detail::suffix_period(av, bv, "add");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % period];
    const std::size_t ai = a.id, bi = b.id;
    return g.record(Op::add, {ai, bi}, std::move(out), [ai, bi, period](Graph& g, std::size_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(ai)) {
            auto& ga = g.grad(ai);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.requires_grad(bi)) {
            auto& gb = g.grad(bi);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % period] += go[i];
        }
    });
}

/// Elementwise product; b may be a trailing-suffix broadcast.
inline Var mul(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t period = detail::suffix_period(av, bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % period];
    const std::size_t ai = a.id, bi = b.id;
    return g.record(Op::mul, {ai, bi}, std::move(out), [ai, bi, period](Graph& g, std::size_t self) {
        const auto& go = g.grad(self);
        const Tensor& av = g.value(ai);
        const Tensor& bv = g.value(bi);
        if (g.requires_grad(ai)) {
            auto& ga = g.grad(ai);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i % period];
        }
        if (g.requires_grad(bi)) {
            auto& gb = g.grad(bi);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % period] += go[i] * av[i];
        }
    });
}

/// x: [P..., R...] times s: [P...], broadcasting s over the trailing dims.
inline Var scale_rows(const Var& x, const Var& s) {
    Graph& g = detail::same_graph(x, s);
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    if (!detail::is_prefix(xv.shape(), sv.shape())) {
        throw ShapeError("scale_rows: " + shape_str(sv.shape()) + " is not a prefix of " + shape_str(xv.shape()));
    }
    const std::size_t inner = xv.size() / sv.size();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv[i / inner];
    const std::size_t xi = x.id, si = s.id;
    return g.record(Op::scale_rows, {xi, si}, std::move(out), [xi, si, inner](Graph& g, std::size_t self) {
        const auto& go = g.grad(self);
        const Tensor& xv = g.value(xi);
        const Tensor& sv = g.value(si);
        if (g.requires_grad(xi)) {
            auto& gx = g.grad(xi);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv[i / inner];
        }
        if (g.requires_grad(si)) {
            auto& gs = g.grad(si);
            for (std::size_t i = 0; i < go.size(); ++i) gs[i / inner] += go[i] * xv[i];
        }
    });
}

/// Subgradient 0 at exactly 0.
inline Var relu(const Var& x) {
    return detail::elementwise(
        x, Op::relu, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
    return detail::elementwise(
        x, Op::tanh, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var log(const Var& x) {
    return detail::elementwise(
        x, Op::log, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var neg(const Var& x) {
    return detail::elementwise(
        x, Op::neg, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Var scale(const Var& x, double c) {
    return detail::elementwise(
        x, Op::scale, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var shift(const Var& x, double c) {
    return detail::elementwise(
        x, Op::shift, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

/// Row-wise softmax over the last dimension (max-subtracted).
inline Var softmax_lastdim(const Var& x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("softmax_lastdim needs rank >= 1");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * n;
        double* o = out.data().data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    const std::size_t xi = x.id;
    return g.record(Op::softmax_lastdim, {xi}, std::move(out), [xi, rows, n](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const Tensor& y = g.value(self);
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
        }
    });
}

inline Var log_softmax_lastdim(const Var& x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("log_softmax_lastdim needs rank >= 1");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * n;
        double* o = out.data().data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
    }
    const std::size_t xi = x.id;
    return g.record(Op::log_softmax_lastdim, {xi}, std::move(out), [xi, rows, n](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const Tensor& y = g.value(self);
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += go[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += go[r * n + j] - std::exp(y[r * n + j]) * total;
        }
    });
}

/// Normalizes each row of the last dimension to zero mean and unit variance.
/// No affine; callers apply gain and bias with mul/add.
inline Var layer_norm(const Var& x, double eps = 1e-12) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    Tensor out(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += in[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mean) * inv;
    }
    const std::size_t xi = x.id;
    return g.record(Op::layer_norm, {xi}, std::move(out), [xi, rows, n, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const Tensor& y = g.value(self);
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                mg += go[r * n + j];
                mgy += go[r * n + j] * y[r * n + j];
            }
            mg /= dn;
            mgy /= dn;
            for (std::size_t j = 0; j < n; ++j) {
                gx[r * n + j] += inv_std[r] * (go[r * n + j] - mg - y[r * n + j] * mgy);
            }
        }
    });
}

inline Var mean_over_axis(const Var& x, std::size_t axis) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (axis >= xv.rank()) throw ShapeError("mean_over_axis: axis out of range for " + shape_str(xv.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    const std::size_t len = xv.dim(axis);
    Shape os = xv.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(os);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < len; ++a)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + a) * inner + i];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= static_cast<double>(len);
    const std::size_t xi = x.id;
    return g.record(Op::mean_over_axis, {xi}, std::move(out), [xi, outer, inner, len](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        const double w = 1.0 / static_cast<double>(len);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < len; ++a)
                for (std::size_t i = 0; i < inner; ++i) gx[(o * len + a) * inner + i] += go[o * inner + i] * w;
    });
}

inline Var sum(const Var& x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const std::size_t xi = x.id;
    return g.record(Op::sum, {xi}, Tensor::scalar(s), [xi](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const double go = g.grad(self)[0];
        for (double& v : g.grad(xi)) v += go;
    });
}

/// Columns [start, start+len) of the last dimension.
inline Var slice_last(const Var& x, std::size_t start, std::size_t len) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    const std::size_t n = xv.shape().back();
    if (len == 0 || start + len > n) throw ShapeError("slice_last out of range");
    const std::size_t rows = xv.size() / n;
    Shape os = xv.shape();
    os.back() = len;
    Tensor out(os);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) out[r * len + j] = xv[r * n + start + j];
    const std::size_t xi = x.id;
    return g.record(Op::slice_last, {xi}, std::move(out), [xi, rows, n, start, len](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) gx[r * n + start + j] += go[r * len + j];
    });
}

inline Var concat_last(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_last of nothing");
    Graph& g = *parts.front().graph;
    Shape lead = parts.front().shape();
    lead.pop_back();
    std::size_t total = 0;
    std::vector<std::size_t> widths, ids;
    for (const Var& p : parts) {
        if (p.graph != &g) throw ValidationError("operands belong to different graphs");
        Shape s = p.shape();
        widths.push_back(s.back());
        s.pop_back();
        if (s != lead) throw ShapeError("concat_last leading shape mismatch");
        total += widths.back();
        ids.push_back(p.id);
    }
    Shape os = lead;
    os.push_back(total);
    Tensor out(os);
    const std::size_t rows = out.size() / total;
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + off + j] = pv[r * widths[k] + j];
        off += widths[k];
    }
    return g.record(Op::concat_last, ids, std::move(out), [ids, widths, rows, total](Graph& g, std::size_t self) {
        const auto& go = g.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (g.requires_grad(ids[k])) {
                auto& gp = g.grad(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += go[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Picks column i of the last dimension and drops that dimension.
inline Var select_last(const Var& x, std::size_t index) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("select_last needs rank >= 2");
    const std::size_t n = xv.shape().back();
    if (index >= n) throw ShapeError("select_last index out of range");
    Shape os = xv.shape();
    os.pop_back();
    Tensor out(os);
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = xv[r * n + index];
    const std::size_t xi = x.id;
    return g.record(Op::select_last, {xi}, std::move(out), [xi, n, index](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t r = 0; r < go.size(); ++r) gx[r * n + index] += go[r];
    });
}

/// x: [b, n, d] -> token k as [b, d].
inline Var take_token(const Var& x, std::size_t k) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() != 3 || k >= xv.dim(1)) throw ShapeError("take_token needs [b,n,d] and k < n");
    const std::size_t b = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
    Tensor out({b, d});
    for (std::size_t j = 0; j < b; ++j)
        for (std::size_t c = 0; c < d; ++c) out[j * d + c] = xv[(j * n + k) * d + c];
    const std::size_t xi = x.id;
    return g.record(Op::take_token, {xi}, std::move(out), [xi, b, n, d, k](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t c = 0; c < d; ++c) gx[(j * n + k) * d + c] += go[j * d + c];
    });
}

/// x: [b, n, d], t: [d] -> [b, n+1, d] with t as token 0 of every sample.
inline Var prepend_token(const Var& x, const Var& t) {
    Graph& g = detail::same_graph(x, t);
    const Tensor& xv = x.value();
    const Tensor& tv = t.value();
    if (xv.rank() != 3 || tv.rank() != 1 || tv.dim(0) != xv.dim(2)) throw ShapeError("prepend_token needs [b,n,d] and [d]");
    const std::size_t b = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
    Tensor out({b, n + 1, d});
    for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t c = 0; c < d; ++c) out[j * (n + 1) * d + c] = tv[c];
        for (std::size_t i = 0; i < n * d; ++i) out[j * (n + 1) * d + d + i] = xv[j * n * d + i];
    }
    const std::size_t xi = x.id, ti = t.id;
    return g.record(Op::prepend_token, {xi, ti}, std::move(out), [xi, ti, b, n, d](Graph& g, std::size_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(ti)) {
            auto& gt = g.grad(ti);
            for (std::size_t j = 0; j < b; ++j)
                for (std::size_t c = 0; c < d; ++c) gt[c] += go[j * (n + 1) * d + c];
        }
        if (g.requires_grad(xi)) {
            auto& gx = g.grad(xi);
            for (std::size_t j = 0; j < b; ++j)
                for (std::size_t i = 0; i < n * d; ++i) gx[j * n * d + i] += go[j * (n + 1) * d + d + i];
        }
    });
}

/// x: [b, H, W] -> [b, (H/p)*(W/p), p*p]; patches and their pixels in row-major order.
inline Var patchify(const Var& x, std::size_t p) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (xv.rank() != 3 || p == 0 || xv.dim(1) % p || xv.dim(2) % p) throw ShapeError("patchify needs [b,H,W] divisible by patch side");
    const std::size_t b = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const std::size_t ph = H / p, pw = W / p;
    std::vector<std::size_t> index(b * H * W);
    Tensor out({b, ph * pw, p * p});
    std::size_t o = 0;
    for (std::size_t j = 0; j < b; ++j)
        for (std::size_t py = 0; py < ph; ++py)
            for (std::size_t px = 0; px < pw; ++px)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t xx = 0; xx < p; ++xx, ++o) {
                        index[o] = (j * H + py * p + y) * W + px * p + xx;
                        out[o] = xv[index[o]];
                    }
    const std::size_t xi = x.id;
    return g.record(Op::patchify, {xi}, std::move(out), [xi, index = std::move(index)](Graph& g, std::size_t self) {
        if (!g.requires_grad(xi)) return;
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += go[i];
    });
}

}  // namespace moase
