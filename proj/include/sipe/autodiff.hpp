#pragma once

// Reverse-mode differentiation over sipe::Tensor.
//
// A Tape owns every intermediate value produced while evaluating an
// expression. Each primitive records a backward closure when at least one
// input is tracked; Tape::grad replays them in reverse recording order.

#include <deque>
#include <optional>
#include <span>
#include <memory>
#include <unordered_set>

#include "sipe/tensor.hpp"

namespace sipe {

class Tape;

/// Handle to a value living on a Tape.
class Var {
   public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool tracked() const;
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

   private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
   public:
    /// Receives the gradient of the node's output and one slot per input;
    /// slots of untracked inputs are null. Closures accumulate (+=).
    using Backward = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked leaf (a parameter).
    Var leaf(Tensor value) { return push(std::move(value), true, {}, nullptr, "leaf"); }

    /// Untracked leaf.
    Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr, "constant"); }

    /// Stop-gradient. Every detached value is logged in call order; a tape
    /// put into replay mode returns the logged values instead, which freezes
    /// all gradient-stopped quantities when re-evaluating a perturbed graph.
    Var detach(Var v) {
        check_owner(v, "detach");
        if (replay_) {
            if (replay_cursor_ >= stops_.size()) throw std::logic_error("Tape::detach: replay log exhausted");
            const Tensor& frozen = stops_[replay_cursor_++];
            if (frozen.shape() != v.shape()) {
                throw std::logic_error("Tape::detach: replayed shape " + shape_str(frozen.shape()) +
                                       " differs from " + shape_str(v.shape()));
            }
            return constant(frozen);
        }
        stops_.push_back(v.value());
        return constant(v.value());
    }

    const std::vector<Tensor>& stops() const { return stops_; }

    void replay(std::vector<Tensor> stops) {
        stops_ = std::move(stops);
        replay_ = true;
        replay_cursor_ = 0;
    }

    Var record(Tensor value, std::vector<Var> inputs, Backward backward, const char* op) {
        bool tracked = false;
        for (const Var& v : inputs) {
            check_owner(v, op);
            tracked = tracked || nodes_[v.id_].tracked;
        }
        std::vector<std::size_t> ids;
        if (tracked) {
            ids.reserve(inputs.size());
            for (const Var& v : inputs) ids.push_back(v.id_);
        }
        return push(std::move(value), tracked, std::move(ids), tracked ? std::move(backward) : nullptr, op);
    }

    /// Gradients of a scalar `loss` with respect to each of `params`.
    std::vector<Tensor> grad(Var loss, std::span<const Var> params) {
        check_owner(loss, "grad");
        if (loss.value().size() != 1) {
            throw std::invalid_argument("grad: loss must be scalar, got " + shape_str(loss.shape()));
        }
        std::unordered_set<std::size_t> keep;
        for (const Var& p : params) {
            check_owner(p, "grad");
            if (!nodes_[p.id_].tracked) {
                throw std::invalid_argument("grad: parameter #" + std::to_string(p.id_) + " is not tracked");
            }
            keep.insert(p.id_);
        }
        std::vector<std::optional<Tensor>> grads(nodes_.size());
        if (nodes_[loss.id_].tracked) grads[loss.id_] = Tensor(loss.shape(), 1.0);

        std::vector<Tensor*> slots;
        for (std::size_t n = loss.id_ + 1; n-- > 0;) {
            Node& node = nodes_[n];
            if (!node.tracked || !grads[n] || !node.backward) continue;
            slots.assign(node.inputs.size(), nullptr);
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                std::size_t in = node.inputs[i];
                if (!nodes_[in].tracked) continue;
                if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
                slots[i] = &*grads[in];
            }
            node.backward(*grads[n], slots);
            if (!keep.count(n)) grads[n].reset();
        }
        std::vector<Tensor> out;
        out.reserve(params.size());
        for (const Var& p : params) {
            out.push_back(grads[p.id_] ? *grads[p.id_] : Tensor(p.shape(), 0.0));
        }
        return out;
    }

    std::size_t size() const { return nodes_.size(); }

   private:
    friend class Var;

    struct Node {
        Tensor value;
        bool tracked = false;
        std::vector<std::size_t> inputs;
        Backward backward;
    };

    void check_owner(const Var& v, const char* op) const {
        if (v.tape_ != this) throw std::invalid_argument(std::string(op) + ": variable belongs to another tape");
    }

    Var push(Tensor value, bool tracked, std::vector<std::size_t> inputs, Backward backward, const char* op) {
        if (!value.all_finite()) {
            throw std::domain_error(std::string(op) + ": non-finite value in result of shape " +
                                    shape_str(value.shape()));
        }
        nodes_.push_back(Node{std::move(value), tracked, std::move(inputs), std::move(backward)});
        return Var(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    std::vector<Tensor> stops_;
    bool replay_ = false;
    std::size_t replay_cursor_ = 0;
};

inline const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("Var: empty handle");
    return tape_->nodes_[id_].value;
}

inline bool Var::tracked() const { return tape_ && tape_->nodes_[id_].tracked; }

inline std::vector<Tensor> grad(Var loss, std::span<const Var> params) { return loss.tape()->grad(loss, params); }

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Neg, Relu, Abs, Square, Sqrt, Softplus };

namespace detail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline const char* binary_name(BinaryOp op) {
    switch (op) {
        case BinaryOp::Add: return "add";
        case BinaryOp::Sub: return "sub";
        case BinaryOp::Mul: return "mul";
        case BinaryOp::Div: return "div";
    }
    return "?";
}

}  // namespace detail

/// Entrywise a (op) b. Shapes must match exactly, or one side must be rank 0.
inline Var elementwise(BinaryOp op, Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool a_scalar = av.rank() == 0 && bv.rank() != 0;
    const bool b_scalar = bv.rank() == 0 && av.rank() != 0;
    if (!a_scalar && !b_scalar && av.shape() != bv.shape()) {
        throw std::invalid_argument(std::string(detail::binary_name(op)) + ": shape mismatch " +
                                    shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
    Tensor out(out_shape);
    const std::size_t n = out.size();
    auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
    auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
    for (std::size_t i = 0; i < n; ++i) {
        double x = ai(i), y = bi(i);
        switch (op) {
            case BinaryOp::Add: out[i] = x + y; break;
            case BinaryOp::Sub: out[i] = x - y; break;
            case BinaryOp::Mul: out[i] = x * y; break;
            case BinaryOp::Div: out[i] = x / y; break;
        }
    }
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b, op, a_scalar, b_scalar](const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& av = a.value();
            const Tensor& bv = b.value();
            const std::size_t n = g.size();
            for (std::size_t i = 0; i < n; ++i) {
                double x = a_scalar ? av[0] : av[i];
                double y = b_scalar ? bv[0] : bv[i];
                double da = 0, db = 0;
                switch (op) {
                    case BinaryOp::Add: da = 1; db = 1; break;
                    case BinaryOp::Sub: da = 1; db = -1; break;
                    case BinaryOp::Mul: da = y; db = x; break;
                    case BinaryOp::Div: da = 1 / y; db = -x / (y * y); break;
                }
                if (gin[0]) (*gin[0])[a_scalar ? 0 : i] += g[i] * da;
                if (gin[1]) (*gin[1])[b_scalar ? 0 : i] += g[i] * db;
            }
        },
        detail::binary_name(op));
}

inline Var elementwise(BinaryOp op, Var a, double b) {
    return elementwise(op, a, a.tape()->constant(Tensor::scalar(b)));
}

inline Var add(Var a, Var b) { return elementwise(BinaryOp::Add, a, b); }
inline Var sub(Var a, Var b) { return elementwise(BinaryOp::Sub, a, b); }
inline Var mul(Var a, Var b) { return elementwise(BinaryOp::Mul, a, b); }
inline Var div(Var a, Var b) { return elementwise(BinaryOp::Div, a, b); }
inline Var add(Var a, double b) { return elementwise(BinaryOp::Add, a, b); }
inline Var mul(Var a, double b) { return elementwise(BinaryOp::Mul, a, b); }

inline Var unary(UnaryOp op, Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        double x = av[i];
        switch (op) {
            case UnaryOp::Neg: out[i] = -x; break;
            case UnaryOp::Relu: out[i] = x > 0 ? x : 0.0; break;
            case UnaryOp::Abs: out[i] = std::abs(x); break;
            case UnaryOp::Square: out[i] = x * x; break;
            case UnaryOp::Sqrt: out[i] = std::sqrt(x); break;
            case UnaryOp::Softplus: out[i] = detail::softplus(x); break;
        }
    }
    return a.tape()->record(
        std::move(out), {a},
        [a, op](const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& av = a.value();
            Tensor& ga = *gin[0];
            for (std::size_t i = 0; i < g.size(); ++i) {
                double x = av[i];
                double d = 0;
                switch (op) {
                    case UnaryOp::Neg: d = -1; break;
                    case UnaryOp::Relu: d = x > 0 ? 1 : 0; break;
                    case UnaryOp::Abs: d = x > 0 ? 1 : (x < 0 ? -1 : 0); break;
                    case UnaryOp::Square: d = 2 * x; break;
                    case UnaryOp::Sqrt: d = 0.5 / std::sqrt(x); break;
                    case UnaryOp::Softplus: d = detail::sigmoid(x); break;
                }
                ga[i] += g[i] * d;
            }
        },
        "unary");
}

inline Var neg(Var a) { return unary(UnaryOp::Neg, a); }
inline Var relu(Var a) { return unary(UnaryOp::Relu, a); }
inline Var abs(Var a) { return unary(UnaryOp::Abs, a); }
inline Var square(Var a) { return unary(UnaryOp::Square, a); }
inline Var softplus(Var a) { return unary(UnaryOp::Softplus, a); }

/// max(a, floor) entrywise; gradient passes where a > floor.
inline Var maximum(Var a, double floor) {
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > floor ? av[i] : floor;
    return a.tape()->record(
        std::move(out), {a},
        [a, floor](const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& av = a.value();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] > floor) (*gin[0])[i] += g[i];
        },
        "maximum");
}

/// min(a, ceil) entrywise; gradient passes where a <= ceil.
inline Var minimum(Var a, double ceil) {
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] <= ceil ? av[i] : ceil;
    return a.tape()->record(
        std::move(out), {a},
        [a, ceil](const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& av = a.value();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] <= ceil) (*gin[0])[i] += g[i];
        },
        "minimum");
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape()->record(
        std::move(out), {a},
        [](const Tensor& g, std::span<Tensor* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        },
        "reshape");
}

/// Broadcast size-1 axes of `a` up to `shape` (ranks must agree).
inline Var expand(Var a, const Shape& shape) {
    const Shape& in = a.shape();
    if (in.size() != shape.size()) {
        throw std::invalid_argument("expand: rank mismatch " + shape_str(in) + " -> " + shape_str(shape));
    }
    for (std::size_t d = 0; d < in.size(); ++d) {
        if (in[d] != shape[d] && in[d] != 1) {
            throw std::invalid_argument("expand: cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
        }
    }
    const std::size_t n = shape_numel(shape);
    std::vector<std::size_t> source(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, src = 0, stride = 1;
        for (std::size_t d = shape.size(); d-- > 0;) {
            std::size_t idx = rem % shape[d];
            rem /= shape[d];
            if (in[d] != 1) src += idx * stride;
            stride *= in[d];
        }
        source[i] = src;
    }
    Tensor out(shape);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[source[i]];
    return a.tape()->record(
        std::move(out), {a},
        [source = std::move(source)](const Tensor& g, std::span<Tensor* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[source[i]] += g[i];
        },
        "expand");
}

/// Concatenate along axis 0.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p.shape().empty()) throw std::invalid_argument("concat: rank-0 input");
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) {
            throw std::invalid_argument("concat: trailing shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(p.shape()));
        }
        rows += p.shape()[0];
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<double> data;
    data.reserve(shape_numel(shape));
    for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    std::vector<std::size_t> sizes;
    for (const Var& p : parts) sizes.push_back(p.value().size());
    return parts[0].tape()->record(
        Tensor(std::move(shape), std::move(data)), parts,
        [sizes = std::move(sizes)](const Tensor& g, std::span<Tensor* const> gin) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < sizes.size(); ++k) {
                if (gin[k])
                    for (std::size_t i = 0; i < sizes[k]; ++i) (*gin[k])[i] += g[off + i];
                off += sizes[k];
            }
        },
        "concat");
}

/// Gather rows (axis-0 slices) of `a` in the given order.
inline Var select_rows(Var a, const std::vector<std::size_t>& rows) {
    const Shape& in = a.shape();
    if (in.empty()) throw std::invalid_argument("select_rows: rank-0 input");
    const std::size_t row = a.value().size() / std::max<std::size_t>(in[0], 1);
    for (std::size_t r : rows) {
        if (r >= in[0]) throw std::out_of_range("select_rows: row " + std::to_string(r) + " of " + shape_str(in));
    }
    Shape shape = in;
    shape[0] = rows.size();
    Tensor out(shape);
    const Tensor& av = a.value();
    for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy_n(av.data().begin() + rows[k] * row, row, out.mutable_data().begin() + k * row);
    return a.tape()->record(
        std::move(out), {a},
        [rows, row](const Tensor& g, std::span<Tensor* const> gin) {
            for (std::size_t k = 0; k < rows.size(); ++k)
                for (std::size_t i = 0; i < row; ++i) (*gin[0])[rows[k] * row + i] += g[k * row + i];
        },
        "select_rows");
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { Sum, Max, Mean };

/// Reduce over `axes` (all axes when empty); reduced axes are dropped.
/// Max routes its gradient to the first maximal element in linear order.
inline Var reduce(ReduceOp op, Var a, std::vector<std::size_t> axes = {}) {
    const Shape& in = a.shape();
    if (axes.empty())
        for (std::size_t d = 0; d < in.size(); ++d) axes.push_back(d);
    std::vector<bool> reduced(in.size(), false);
    for (std::size_t ax : axes) {
        if (ax >= in.size()) throw std::invalid_argument("reduce: axis " + std::to_string(ax) + " invalid for " + shape_str(in));
        if (in[ax] == 0) throw std::invalid_argument("reduce: empty axis " + std::to_string(ax) + " in " + shape_str(in));
        reduced[ax] = true;
    }
    if (a.value().size() == 0) throw std::invalid_argument("reduce: empty tensor " + shape_str(in));
    Shape out_shape;
    for (std::size_t d = 0; d < in.size(); ++d)
        if (!reduced[d]) out_shape.push_back(in[d]);
    const std::size_t n = a.value().size();
    std::vector<std::size_t> target(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, idx = 0, stride = 1;
        for (std::size_t d = in.size(); d-- > 0;) {
            std::size_t c = rem % in[d];
            rem /= in[d];
            if (!reduced[d]) {
                idx += c * stride;
                stride *= in[d];
            }
        }
        target[i] = idx;
    }
    Tensor out(out_shape);
    const Tensor& av = a.value();
    const std::size_t count = n / out.size();
    std::vector<std::size_t> argmax;
    if (op == ReduceOp::Max) {
        argmax.assign(out.size(), n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t t = target[i];
            if (argmax[t] == n || av[i] > out[t]) {
                out[t] = av[i];
                argmax[t] = i;
            }
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) out[target[i]] += av[i];
        if (op == ReduceOp::Mean)
            for (std::size_t t = 0; t < out.size(); ++t) out[t] /= static_cast<double>(count);
    }
    return a.tape()->record(
        std::move(out), {a},
        [op, target = std::move(target), argmax = std::move(argmax), count](const Tensor& g,
                                                                            std::span<Tensor* const> gin) {
            Tensor& ga = *gin[0];
            if (op == ReduceOp::Max) {
                for (std::size_t t = 0; t < argmax.size(); ++t) ga[argmax[t]] += g[t];
                return;
            }
            const double scale = op == ReduceOp::Mean ? 1.0 / static_cast<double>(count) : 1.0;
            for (std::size_t i = 0; i < target.size(); ++i) ga[i] += g[target[i]] * scale;
        },
        "reduce");
}

inline Var sum(Var a, std::vector<std::size_t> axes = {}) { return reduce(ReduceOp::Sum, a, std::move(axes)); }
inline Var mean(Var a, std::vector<std::size_t> axes = {}) { return reduce(ReduceOp::Mean, a, std::move(axes)); }
inline Var max(Var a, std::vector<std::size_t> axes = {}) { return reduce(ReduceOp::Max, a, std::move(axes)); }

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// C[M,N] += A[M,K] B[K,N] for row-major operands with leading dimensions
/// lda, ldb, ldc. Each entry accumulates over k in ascending order, so the
/// result matches the naive triple loop bit for bit.
template <std::size_t MR, std::size_t NR>
inline void gemm_tile(std::size_t K, const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C,
                      std::size_t ldc) {
    double acc[MR][NR];
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t j = 0; j < NR; ++j) acc[i][j] = C[i * ldc + j];
    for (std::size_t k = 0; k < K; ++k) {
        const double* b = B + k * ldb;
        for (std::size_t i = 0; i < MR; ++i) {
            const double a = A[i * lda + k];
            for (std::size_t j = 0; j < NR; ++j) acc[i][j] += a * b[j];
        }
    }
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t j = 0; j < NR; ++j) C[i * ldc + j] = acc[i][j];
}

inline constexpr std::size_t kLanes = 8;
using Lanes = double __attribute__((vector_size(kLanes * sizeof(double))));

// MR x (kLanes*NV) block of C kept in vector registers.
template <std::size_t MR, std::size_t NV>
inline void gemm_block(std::size_t K, const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C,
                       std::size_t ldc) {
    Lanes acc[MR][NV];
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&acc[i][v], C + i * ldc + kLanes * v, sizeof(Lanes));
    for (std::size_t k = 0; k < K; ++k) {
        Lanes b[NV];
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&b[v], B + k * ldb + kLanes * v, sizeof(Lanes));
        for (std::size_t i = 0; i < MR; ++i) {
            const double a = A[i * lda + k];
            for (std::size_t v = 0; v < NV; ++v) acc[i][v] += a * b[v];
        }
    }
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(C + i * ldc + kLanes * v, &acc[i][v], sizeof(Lanes));
}

inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    constexpr std::size_t MR = 4, NV = 2, NR = kLanes * NV;
    std::size_t j = 0;
    for (; j + NR <= N; j += NR) {
        std::size_t i = 0;
        for (; i + MR <= M; i += MR) gemm_block<MR, NV>(K, A + i * K, K, B + j, N, C + i * N + j, N);
        for (; i < M; ++i) gemm_block<1, NV>(K, A + i * K, K, B + j, N, C + i * N + j, N);
    }
    for (; j + kLanes <= N; j += kLanes)
        for (std::size_t i = 0; i < M; ++i) gemm_block<1, 1>(K, A + i * K, K, B + j, N, C + i * N + j, N);
    for (; j < N; ++j)
        for (std::size_t i = 0; i < M; ++i) gemm_tile<1, 1>(K, A + i * K, K, B + j, N, C + i * N + j, N);
}

inline std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* a) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    return t;
}

/// C[M,N] += op(A) op(B), accumulating over k in ascending order per entry.
inline void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, bool trans_a, const double* B,
                     bool trans_b, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        if (trans_b) {
            for (std::size_t j = 0; j < N; ++j) {
                const double* b = B + j * K;
                double acc = c[j];
                for (std::size_t k = 0; k < K; ++k) acc += (trans_a ? A[k * M + i] : A[i * K + k]) * b[k];
                c[j] = acc;
            }
        } else {
            for (std::size_t k = 0; k < K; ++k) {
                const double a = trans_a ? A[k * M + i] : A[i * K + k];
                const double* b = B + k * N;
                for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
            }
        }
    }
}

}  // namespace detail

/// op(a) · op(b) for rank-2 operands.
inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2) {
        throw std::invalid_argument("matmul: rank-2 operands required, got " + shape_str(as) + " and " + shape_str(bs));
    }
    const std::size_t M = trans_a ? as[1] : as[0];
    const std::size_t K = trans_a ? as[0] : as[1];
    const std::size_t Kb = trans_b ? bs[1] : bs[0];
    const std::size_t N = trans_b ? bs[0] : bs[1];
    if (K != Kb) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(as) + " vs " + shape_str(bs));
    }
    Tensor out({M, N});
    detail::gemm_acc(M, N, K, a.value().data().data(), trans_a, b.value().data().data(), trans_b,
                     out.mutable_data().data());
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b, trans_a, trans_b, M, N, K](const Tensor& g, std::span<Tensor* const> gin) {
            const double* G = g.data().data();
            if (gin[0]) {
                // dA = G op(B)^T, laid out as A (transposed when trans_a)
                Tensor& ga = *gin[0];
                if (!trans_a) {
                    detail::gemm_acc(M, K, N, G, false, b.value().data().data(), !trans_b, ga.mutable_data().data());
                } else {
                    detail::gemm_acc(K, M, N, b.value().data().data(), trans_b, G, true, ga.mutable_data().data());
                }
            }
            if (gin[1]) {
                Tensor& gb = *gin[1];
                if (!trans_b) {
                    detail::gemm_acc(K, N, M, a.value().data().data(), !trans_a, G, false, gb.mutable_data().data());
                } else {
                    detail::gemm_acc(N, K, M, G, true, a.value().data().data(), trans_a, gb.mutable_data().data());
                }
            }
        },
        "matmul");
}

/// Divide every vector along `axis` of a rank-2 tensor by max(norm, eps).
inline Var l2_normalize(Var a, std::size_t axis, double eps = 1e-12) {
    const Shape& s = a.shape();
    if (s.size() != 2 || axis > 1) throw std::invalid_argument("l2_normalize: rank-2 input and axis 0/1 required");
    const std::size_t rows = s[0], cols = s[1];
    const std::size_t groups = axis == 1 ? rows : cols;
    const std::size_t len = axis == 1 ? cols : rows;
    auto at = [=](std::size_t group, std::size_t k) { return axis == 1 ? group * cols + k : k * cols + group; };
    const Tensor& av = a.value();
    std::vector<double> norms(groups, 0.0);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double acc = 0;
        for (std::size_t k = 0; k < len; ++k) acc += av[at(gi, k)] * av[at(gi, k)];
        norms[gi] = std::sqrt(acc);
    }
    Tensor out(s);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double d = std::max(norms[gi], eps);
        for (std::size_t k = 0; k < len; ++k) out[at(gi, k)] = av[at(gi, k)] / d;
    }
    Var result = a.tape()->record(
        std::move(out), {a},
        [a, norms, groups, len, eps, at](const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& av = a.value();
            Tensor& ga = *gin[0];
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double n = norms[gi];
                if (n <= eps) {
                    for (std::size_t k = 0; k < len; ++k) ga[at(gi, k)] += g[at(gi, k)] / eps;
                    continue;
                }
                double dot = 0;
                for (std::size_t k = 0; k < len; ++k) dot += av[at(gi, k)] * g[at(gi, k)];
                for (std::size_t k = 0; k < len; ++k) {
                    double y = av[at(gi, k)] / n;
                    ga[at(gi, k)] += (g[at(gi, k)] - y * dot / n) / n;
                }
            }
        },
        "l2_normalize");
    return result;
}

// ---------------------------------------------------------------------------
// Convolution and resampling

struct Conv2dShape {
    std::size_t channels, height, width, out_channels, kh, kw, stride, pad, out_h, out_w;
};

inline Conv2dShape conv2d_shape(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad) {
    if (input.size() != 3) throw std::invalid_argument("conv2d: input must be [C,H,W], got " + shape_str(input));
    if (kernel.size() != 4) throw std::invalid_argument("conv2d: kernel must be [O,C,kh,kw], got " + shape_str(kernel));
    if (kernel[1] != input[0]) {
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(input) + " kernel " +
                                    shape_str(kernel));
    }
    if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0) throw std::invalid_argument("conv2d: kernel extent must be odd");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    if (input[1] + 2 * pad < kernel[2] || input[2] + 2 * pad < kernel[3]) {
        throw std::invalid_argument("conv2d: kernel larger than padded input " + shape_str(input));
    }
    Conv2dShape c{input[0], input[1], input[2], kernel[0], kernel[2], kernel[3], stride, pad, 0, 0};
    c.out_h = (c.height + 2 * pad - c.kh) / stride + 1;
    c.out_w = (c.width + 2 * pad - c.kw) / stride + 1;
    return c;
}

namespace detail {

// Rows ordered (c, ky, kx); padded taps hold 0.
inline std::vector<double> im2col(const Conv2dShape& c, const double* in) {
    const std::size_t P = c.out_h * c.out_w;
    std::vector<double> col(c.channels * c.kh * c.kw * P, 0.0);
    std::size_t row = 0;
    for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t ky = 0; ky < c.kh; ++ky)
            for (std::size_t kx = 0; kx < c.kw; ++kx, ++row) {
                double* dst = col.data() + row * P;
                for (std::size_t oy = 0; oy < c.out_h; ++oy) {
                    long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.pad);
                    if (iy < 0 || iy >= static_cast<long>(c.height)) continue;
                    const double* src = in + (ch * c.height + static_cast<std::size_t>(iy)) * c.width;
                    for (std::size_t ox = 0; ox < c.out_w; ++ox) {
                        long ix = static_cast<long>(ox * c.stride + kx) - static_cast<long>(c.pad);
                        if (ix < 0 || ix >= static_cast<long>(c.width)) continue;
                        dst[oy * c.out_w + ox] = src[ix];
                    }
                }
            }
    return col;
}

inline void col2im_acc(const Conv2dShape& c, const double* col, double* in) {
    const std::size_t P = c.out_h * c.out_w;
    std::size_t row = 0;
    for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t ky = 0; ky < c.kh; ++ky)
            for (std::size_t kx = 0; kx < c.kw; ++kx, ++row) {
                const double* src = col + row * P;
                for (std::size_t oy = 0; oy < c.out_h; ++oy) {
                    long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.pad);
                    if (iy < 0 || iy >= static_cast<long>(c.height)) continue;
                    double* dst = in + (ch * c.height + static_cast<std::size_t>(iy)) * c.width;
                    for (std::size_t ox = 0; ox < c.out_w; ++ox) {
                        long ix = static_cast<long>(ox * c.stride + kx) - static_cast<long>(c.pad);
                        if (ix < 0 || ix >= static_cast<long>(c.width)) continue;
                        dst[ix] += src[oy * c.out_w + ox];
                    }
                }
            }
}

}  // namespace detail

/// Cross-correlation of input [C,H,W] with kernel [O,C,kh,kw]. Each output
/// entry sums taps in (c, ky, kx) order starting from zero; the bias, when
/// given, is added after the sum.
inline Var conv2d(Var input, Var kernel, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
    const Conv2dShape c = conv2d_shape(input.shape(), kernel.shape(), stride, pad);
    if (bias && bias->shape() != Shape{c.out_channels}) {
        throw std::invalid_argument("conv2d: bias shape " + shape_str(bias->shape()) + " for " +
                                    std::to_string(c.out_channels) + " output channels");
    }
    const std::size_t P = c.out_h * c.out_w;
    const std::size_t R = c.channels * c.kh * c.kw;
    auto col = std::make_shared<std::vector<double>>(detail::im2col(c, input.value().data().data()));
    Tensor out({c.out_channels, c.out_h, c.out_w});
    double* O = out.mutable_data().data();
    detail::gemm_nn(c.out_channels, P, R, kernel.value().data().data(), col->data(), O);
    if (bias) {
        const Tensor& b = bias->value();
        for (std::size_t o = 0; o < c.out_channels; ++o)
            for (std::size_t p = 0; p < P; ++p) O[o * P + p] += b[o];
    }
    std::vector<Var> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    if (!input.tracked() && !kernel.tracked() && !(bias && bias->tracked())) col.reset();
    return input.tape()->record(
        std::move(out), std::move(inputs),
        [c, P, R, col, kernel](const Tensor& g, std::span<Tensor* const> gin) {
            const double* G = g.data().data();
            if (gin[1]) {
                std::vector<double> col_t = detail::transpose(R, P, col->data());
                detail::gemm_nn(c.out_channels, R, P, G, col_t.data(), gin[1]->mutable_data().data());
            }
            if (gin.size() > 2 && gin[2]) {
                Tensor& db = *gin[2];
                for (std::size_t o = 0; o < c.out_channels; ++o) {
                    double acc = 0;
                    for (std::size_t p = 0; p < P; ++p) acc += G[o * P + p];
                    db[o] += acc;
                }
            }
            if (gin[0]) {
                std::vector<double> dcol(R * P, 0.0);
                std::vector<double> w_t = detail::transpose(c.out_channels, R, kernel.value().data().data());
                detail::gemm_nn(R, P, c.out_channels, w_t.data(), G, dcol.data());
                detail::col2im_acc(c, dcol.data(), gin[0]->mutable_data().data());
            }
        },
        "conv2d");
}

inline Var conv2d(Var input, Var kernel, std::size_t stride = 1, std::size_t pad = 0) {
    return conv2d(input, kernel, std::nullopt, stride, pad);
}

namespace detail {

struct LinearTap {
    std::size_t i0, i1;
    double frac;
};

// Half-pixel (align_corners = false) source coordinates, clamped at the borders.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<LinearTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
        std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

/// Bilinear resize of [C,h,w] to [C,H,W] with half-pixel centers.
inline Var resize_bilinear(Var a, std::size_t H, std::size_t W) {
    const Shape& s = a.shape();
    if (s.size() != 3) throw std::invalid_argument("resize_bilinear: input must be [C,h,w], got " + shape_str(s));
    if (H == 0 || W == 0 || s[1] == 0 || s[2] == 0) throw std::invalid_argument("resize_bilinear: empty extent");
    const std::size_t C = s[0], h = s[1], w = s[2];
    if (H == h && W == w) return reshape(a, s);
    auto ty = detail::bilinear_taps(h, H);
    auto tx = detail::bilinear_taps(w, W);
    const Tensor& av = a.value();
    Tensor out({C, H, W});
    for (std::size_t c = 0; c < C; ++c) {
        const double* src = av.data().data() + c * h * w;
        for (std::size_t y = 0; y < H; ++y) {
            const double* r0 = src + ty[y].i0 * w;
            const double* r1 = src + ty[y].i1 * w;
            for (std::size_t x = 0; x < W; ++x) {
                const auto& t = tx[x];
                double top = r0[t.i0] + t.frac * (r0[t.i1] - r0[t.i0]);
                double bot = r1[t.i0] + t.frac * (r1[t.i1] - r1[t.i0]);
                out[(c * H + y) * W + x] = top + ty[y].frac * (bot - top);
            }
        }
    }
    return a.tape()->record(
        std::move(out), {a},
        [C, h, w, H, W, ty = std::move(ty), tx = std::move(tx)](const Tensor& g, std::span<Tensor* const> gin) {
            double* ga = gin[0]->mutable_data().data();
            for (std::size_t c = 0; c < C; ++c) {
                double* dst = ga + c * h * w;
                for (std::size_t y = 0; y < H; ++y) {
                    const double fy = ty[y].frac;
                    for (std::size_t x = 0; x < W; ++x) {
                        const auto& t = tx[x];
                        const double v = g[(c * H + y) * W + x];
                        dst[ty[y].i0 * w + t.i0] += v * (1 - fy) * (1 - t.frac);
                        dst[ty[y].i0 * w + t.i1] += v * (1 - fy) * t.frac;
                        dst[ty[y].i1 * w + t.i0] += v * fy * (1 - t.frac);
                        dst[ty[y].i1 * w + t.i1] += v * fy * t.frac;
                    }
                }
            }
        },
        "resize_bilinear");
}

/// Untracked convenience: resize a plain tensor.
inline Tensor resize_bilinear(const Tensor& a, std::size_t H, std::size_t W) {
    Tape tape;
    return resize_bilinear(tape.constant(a), H, W).value();
}

}  // namespace sipe
