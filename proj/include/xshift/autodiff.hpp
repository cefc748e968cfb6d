#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Reverse-mode autodiff over dense row-major double tensors. A forward pass
// records onto the thread-local active ComputationRecord; one backward pass
// per record. Without an active record all ops are plain eager evaluation.

namespace xshift {

using Shape = std::vector<std::size_t>;

enum class OpKind {
    add,
    sub,
    mul,
    scale,
    matmul,
    softmax,
    log,
    exp,
    relu,
    gelu,
    sum,
    mean,
    max_last,
    layer_norm,
    l2_normalize,
    dot,
    concat,
    gather,
    reshape,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::matmul: return "matmul";
        case OpKind::softmax: return "softmax";
        case OpKind::log: return "log";
        case OpKind::exp: return "exp";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::max_last: return "max_last";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::l2_normalize: return "l2_normalize";
        case OpKind::dot: return "dot";
        case OpKind::concat: return "concat";
        case OpKind::gather: return "gather";
        case OpKind::reshape: return "reshape";
    }
    return "?";
}

inline constexpr double kLayerNormEps = 1e-5;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class ComputationRecord;

namespace detail {
inline ComputationRecord*& active_record() {
    thread_local ComputationRecord* rec = nullptr;
    return rec;
}
}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from(Shape{}, std::vector<double>{value}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data_mut() { return node_->data; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return valid() && !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient present");
        return node_->grad;
    }

    double item() const {
        if (size() != 1) throw std::invalid_argument("Tensor::item: tensor of size " + std::to_string(size()));
        return node_->data[0];
    }

    // Value copy detached from any record.
    Tensor detached() const {
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->requires_grad = false;
        return Tensor(std::move(n));
    }

    const detail::NodePtr& node() const { return node_; }

  private:
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
    detail::NodePtr node_;

    friend class ComputationRecord;
    friend Tensor make_op_output(Shape, std::vector<double>);
};

inline Tensor make_op_output(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    return Tensor(std::move(n));
}

// Tape of executed ops. Constructing one makes it the active record for the
// current thread; destruction restores the previous one. Records are
// independent of each other and must not share mutably-owned tensors across
// threads.
class ComputationRecord {
  public:
    ComputationRecord() {
        prev_ = detail::active_record();
        detail::active_record() = this;
    }
    ~ComputationRecord() { detail::active_record() = prev_; }
    ComputationRecord(const ComputationRecord&) = delete;
    ComputationRecord& operator=(const ComputationRecord&) = delete;

    std::size_t num_steps() const { return steps_.size(); }

    void append(OpKind kind, std::vector<detail::NodePtr> inputs, detail::NodePtr output,
                std::function<void()> pull) {
        Step s;
        s.kind = kind;
        s.inputs = std::move(inputs);
        s.output = std::move(output);
        s.pull = std::move(pull);
        produced_.insert(s.output.get());
        steps_.push_back(std::move(s));
    }

    bool produced(const Tensor& t) const { return produced_.count(t.node().get()) != 0; }

    // Populates grad on every requires_grad leaf reachable from `loss`.
    // Gradients are freshly zeroed per call; a record can be consumed once.
    void backward(const Tensor& loss) {
        if (consumed_) throw std::runtime_error("backward: record already consumed; rebuild the forward pass");
        if (!loss.valid() || loss.size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar tensor");
        if (!produced(loss)) throw std::invalid_argument("backward: loss was not produced by this record");

        for (const Step& s : steps_) {
            for (const auto& in : s.inputs)
                if (in->requires_grad) in->grad.assign(in->data.size(), 0.0);
            if (s.output->requires_grad) s.output->grad.assign(s.output->data.size(), 0.0);
        }
        loss.node()->grad.assign(1, 1.0);

        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->pull();
        consumed_ = true;
    }

  private:
    struct Step {
        OpKind kind;
        std::vector<detail::NodePtr> inputs;
        detail::NodePtr output;
        std::function<void()> pull;
    };
    std::vector<Step> steps_;
    std::unordered_set<const detail::TensorNode*> produced_;
    bool consumed_ = false;
    ComputationRecord* prev_ = nullptr;
};

// Suspends recording for its scope; ops evaluate eagerly regardless of
// requires_grad flags. Used for inference paths inside larger graphs.
struct NoRecordScope {
    NoRecordScope() : saved_(detail::active_record()) { detail::active_record() = nullptr; }
    ~NoRecordScope() { detail::active_record() = saved_; }
    NoRecordScope(const NoRecordScope&) = delete;
    NoRecordScope& operator=(const NoRecordScope&) = delete;

  private:
    ComputationRecord* saved_;
};

namespace detail {

inline void record_op(OpKind kind, std::initializer_list<Tensor> inputs, Tensor& out,
                      const std::function<void()>& pull) {
    bool any_rg = false;
    for (const Tensor& t : inputs) any_rg = any_rg || t.requires_grad();
    ComputationRecord* rec = active_record();
    if (rec == nullptr || !any_rg) return;
    out.node()->requires_grad = true;
    std::vector<NodePtr> in_nodes;
    in_nodes.reserve(inputs.size());
    for (const Tensor& t : inputs) in_nodes.push_back(t.node());
    rec->append(kind, std::move(in_nodes), out.node(), pull);
}

[[noreturn]] inline void shape_error(OpKind kind, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
}

// Broadcast rule for binary elementwise ops: identical shapes, a size-1
// operand, or one shape being a strict suffix of the other (leading-batch).
// Row-major layout makes the index map a plain modulo in every case.
inline Shape binary_out_shape(OpKind kind, const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (shape_numel(b) == 1) return a;
    if (shape_numel(a) == 1) return b;
    auto is_suffix = [](const Shape& small, const Shape& big) {
        if (small.size() >= big.size()) return false;
        return std::equal(small.rbegin(), small.rend(), big.rbegin());
    };
    if (is_suffix(b, a)) return a;
    if (is_suffix(a, b)) return b;
    shape_error(kind, a, b);
}

// C(MxN) <- op(A) * op(B) (+C if accumulate). A is stored ra x ca.
inline void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, const double* A,
                 const double* B, double* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, 0.0);
    if (!ta && !tb) {
        for (std::size_t i = 0; i < M; ++i) {
            const double* ai = A + i * K;
            double* ci = C + i * N;
            for (std::size_t k = 0; k < K; ++k) {
                const double aik = ai[k];
                const double* bk = B + k * N;
                for (std::size_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < M; ++i) {
            const double* ai = A + i * K;
            double* ci = C + i * N;
            for (std::size_t j = 0; j < N; ++j) {
                const double* bj = B + j * K;
                double acc = 0.0;
                for (std::size_t k = 0; k < K; ++k) acc += ai[k] * bj[k];
                ci[j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* ak = A + k * M;
            const double* bk = B + k * N;
            for (std::size_t i = 0; i < M; ++i) {
                const double aki = ak[i];
                double* ci = C + i * N;
                for (std::size_t j = 0; j < N; ++j) ci[j] += aki * bk[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < M; ++i) {
            double* ci = C + i * N;
            for (std::size_t j = 0; j < N; ++j) {
                const double* bj = B + j * K;
                double acc = 0.0;
                for (std::size_t k = 0; k < K; ++k) acc += A[k * M + i] * bj[k];
                ci[j] += acc;
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

namespace detail {

// Row-major suffix broadcast means operand index = flat index modulo operand
// size. The kernels below iterate in blocks of the smaller operand so the
// inner loops stay modulo-free.
template <OpKind Kind>
inline void binary_forward_kernel(const double* pa, std::size_t na, const double* pb, std::size_t nb,
                                  double* out, std::size_t n) {
    auto apply = [](double x, double y) {
        if constexpr (Kind == OpKind::add) return x + y;
        else if constexpr (Kind == OpKind::sub) return x - y;
        else return x * y;
    };
    if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = apply(pa[i], pb[i]);
    } else if (na == n) {  // b broadcast over blocks of nb
        for (std::size_t base = 0; base < n; base += nb)
            for (std::size_t j = 0; j < nb; ++j) out[base + j] = apply(pa[base + j], pb[j]);
    } else {  // a broadcast over blocks of na
        for (std::size_t base = 0; base < n; base += na)
            for (std::size_t j = 0; j < na; ++j) out[base + j] = apply(pa[j], pb[base + j]);
    }
}

template <OpKind Kind>
inline Tensor binary_ew(const Tensor& a, const Tensor& b) {
    Shape out_shape = binary_out_shape(Kind, a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    const std::size_t na = a.size(), nb = b.size();
    std::vector<double> out(n);
    binary_forward_kernel<Kind>(a.data().data(), na, b.data().data(), nb, out.data(), n);
    Tensor t = make_op_output(std::move(out_shape), std::move(out));
    auto an = a.node(), bn = b.node(), on = t.node();
    record_op(Kind, {a, b}, t, [an, bn, on, n, na, nb]() {
        const double* g = on->grad.data();
        // d/da: +g (add/sub) or g*b (mul), summed over broadcast blocks.
        if (an->requires_grad) {
            double* ga = an->grad.data();
            const double* pb2 = bn->data.data();
            if (na == n) {
                if constexpr (Kind == OpKind::mul) {
                    if (nb == n)
                        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
                    else
                        for (std::size_t base = 0; base < n; base += nb)
                            for (std::size_t j = 0; j < nb; ++j) ga[base + j] += g[base + j] * pb2[j];
                } else {
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                }
            } else {
                for (std::size_t base = 0; base < n; base += na)
                    for (std::size_t j = 0; j < na; ++j) {
                        if constexpr (Kind == OpKind::mul)
                            ga[j] += g[base + j] * pb2[base + j];
                        else
                            ga[j] += g[base + j];
                    }
            }
        }
        if (bn->requires_grad) {
            double* gb = bn->grad.data();
            const double* pa2 = an->data.data();
            if (nb == n) {
                if constexpr (Kind == OpKind::mul) {
                    if (na == n)
                        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
                    else
                        for (std::size_t base = 0; base < n; base += na)
                            for (std::size_t j = 0; j < na; ++j) gb[base + j] += g[base + j] * pa2[j];
                } else if constexpr (Kind == OpKind::sub) {
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                } else {
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                }
            } else {
                for (std::size_t base = 0; base < n; base += nb)
                    for (std::size_t j = 0; j < nb; ++j) {
                        if constexpr (Kind == OpKind::mul)
                            gb[j] += g[base + j] * pa2[base + j];
                        else if constexpr (Kind == OpKind::sub)
                            gb[j] -= g[base + j];
                        else
                            gb[j] += g[base + j];
                    }
            }
        }
    });
    return t;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_ew<OpKind::add>(a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_ew<OpKind::sub>(a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_ew<OpKind::mul>(a, b); }

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = pa[i] * s;
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::scale, {a}, t, [an, on, s]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        double* ga = an->grad.data();
        for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += s * g[i];
    });
    return t;
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D, optional operand transposes)

inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false) {
    if (a.rank() != 2 || b.rank() != 2) detail::shape_error(OpKind::matmul, a.shape(), b.shape());
    const std::size_t M = transpose_a ? a.shape()[1] : a.shape()[0];
    const std::size_t Ka = transpose_a ? a.shape()[0] : a.shape()[1];
    const std::size_t Kb = transpose_b ? b.shape()[1] : b.shape()[0];
    const std::size_t N = transpose_b ? b.shape()[0] : b.shape()[1];
    if (Ka != Kb) detail::shape_error(OpKind::matmul, a.shape(), b.shape());
    const std::size_t K = Ka;

    std::vector<double> out(M * N);
    detail::gemm(transpose_a, transpose_b, M, N, K, a.data().data(), b.data().data(), out.data(), false);
    Tensor t = make_op_output(Shape{M, N}, std::move(out));
    auto an = a.node(), bn = b.node(), on = t.node();
    detail::record_op(OpKind::matmul, {a, b}, t, [an, bn, on, M, N, K, transpose_a, transpose_b]() {
        const double* g = on->grad.data();
        const double* A = an->data.data();
        const double* B = bn->data.data();
        if (an->requires_grad) {
            double* ga = an->grad.data();
            if (!transpose_a && !transpose_b)
                detail::gemm(false, true, M, K, N, g, B, ga, true);  // dA = G B^T
            else if (!transpose_a && transpose_b)
                detail::gemm(false, false, M, K, N, g, B, ga, true);  // dA = G B
            else if (transpose_a && !transpose_b)
                detail::gemm(false, true, K, M, N, B, g, ga, true);  // dA = B G^T
            else
                detail::gemm(true, true, K, M, N, B, g, ga, true);  // dA = B^T G^T
        }
        if (bn->requires_grad) {
            double* gb = bn->grad.data();
            if (!transpose_a && !transpose_b)
                detail::gemm(true, false, K, N, M, A, g, gb, true);  // dB = A^T G
            else if (!transpose_a && transpose_b)
                detail::gemm(true, false, N, K, M, g, A, gb, true);  // dB = G^T A
            else if (transpose_a && !transpose_b)
                detail::gemm(false, false, K, N, M, A, g, gb, true);  // dB = A G
            else
                detail::gemm(true, true, N, K, M, g, A, gb, true);  // dB = G^T A^T
        }
    });
    return t;
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size())
        detail::shape_error(OpKind::dot, a.shape(), b.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
    Tensor t = make_op_output(Shape{}, {acc});
    auto an = a.node(), bn = b.node(), on = t.node();
    detail::record_op(OpKind::dot, {a, b}, t, [an, bn, on]() {
        const double g = on->grad[0];
        if (an->requires_grad)
            for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += g * bn->data[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += g * an->data[i];
    });
    return t;
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last axis

namespace detail {
inline std::pair<std::size_t, std::size_t> last_axis_dims(OpKind kind, const Tensor& a) {
    if (a.rank() < 1) throw std::invalid_argument(std::string(op_name(kind)) + ": rank-0 input");
    const std::size_t n = a.shape().back();
    return {a.size() / n, n};
}
}  // namespace detail

inline Tensor softmax(const Tensor& a) {
    auto [rows, n] = detail::last_axis_dims(OpKind::softmax, a);
    std::vector<double> out(a.size());
    const double* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double* y = out.data() + r * n;
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        for (std::size_t i = 0; i < n; ++i) y[i] /= z;
    }
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::softmax, {a}, t, [an, on, rows = rows, n = n]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        const double* y = on->data.data();
        double* ga = an->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * n;
            const double* yr = y + r * n;
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += gr[i] * yr[i];
            double* gar = ga + r * n;
            for (std::size_t i = 0; i < n; ++i) gar[i] += yr[i] * (gr[i] - s);
        }
    });
    return t;
}

inline Tensor layer_norm(const Tensor& a) {
    auto [rows, n] = detail::last_axis_dims(OpKind::layer_norm, a);
    std::vector<double> out(a.size());
    std::vector<double> inv_std(rows);
    const double* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += x[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[r] = inv;
        double* y = out.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mu) * inv;
    }
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::layer_norm, {a}, t, [an, on, rows = rows, n = n, inv_std]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        const double* y = on->data.data();
        double* ga = an->grad.data();
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * n;
            const double* yr = y + r * n;
            double gsum = 0.0, gysum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                gsum += gr[i];
                gysum += gr[i] * yr[i];
            }
            const double inv = inv_std[r];
            double* gar = ga + r * n;
            for (std::size_t i = 0; i < n; ++i)
                gar[i] += inv * (gr[i] - gsum / dn - yr[i] * gysum / dn);
        }
    });
    return t;
}

inline Tensor l2_normalize(const Tensor& a) {
    auto [rows, n] = detail::last_axis_dims(OpKind::l2_normalize, a);
    std::vector<double> out(a.size());
    std::vector<double> norms(rows);
    const double* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
        const double norm = std::sqrt(s);
        if (norm == 0.0) throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(r));
        norms[r] = norm;
        double* y = out.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / norm;
    }
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::l2_normalize, {a}, t, [an, on, rows = rows, n = n, norms]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        const double* y = on->data.data();
        double* ga = an->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * n;
            const double* yr = y + r * n;
            double gy = 0.0;
            for (std::size_t i = 0; i < n; ++i) gy += gr[i] * yr[i];
            double* gar = ga + r * n;
            for (std::size_t i = 0; i < n; ++i) gar[i] += (gr[i] - yr[i] * gy) / norms[r];
        }
    });
    return t;
}

// Max over the last axis; ties resolve to the lowest index, which also
// receives the full gradient.
inline Tensor max_last(const Tensor& a) {
    auto [rows, n] = detail::last_axis_dims(OpKind::max_last, a);
    std::vector<double> out(rows);
    std::vector<std::size_t> arg(rows);
    const double* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (x[i] > x[best]) best = i;
        out[r] = x[best];
        arg[r] = best;
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    Tensor t = make_op_output(std::move(out_shape), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::max_last, {a}, t, [an, on, n = n, arg]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        double* ga = an->grad.data();
        for (std::size_t r = 0; r < arg.size(); ++r) ga[r * n + arg[r]] += g[r];
    });
    return t;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        if (!(x > 0.0))
            throw std::domain_error("log: non-positive input " + std::to_string(x) + " at index " +
                                    std::to_string(i));
        out[i] = std::log(x);
    }
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::log, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i] / an->data[i];
    });
    return t;
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a.data()[i]);
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::exp, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i] * on->data[i];
    });
    return t;
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::relu, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < an->data.size(); ++i)
            if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
    });
    return t;
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    Tensor t = make_op_output(a.shape(), std::move(out));
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::gelu, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < an->data.size(); ++i) {
            const double x = an->data[i];
            const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
            an->grad[i] += on->grad[i] * (phi + x * dens);
        }
    });
    return t;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor t = make_op_output(Shape{}, {acc});
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::sum, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        const double g = on->grad[0];
        for (double& v : an->grad) v += g;
    });
    return t;
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    acc /= static_cast<double>(a.size());
    Tensor t = make_op_output(Shape{}, {acc});
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::mean, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        const double g = on->grad[0] / static_cast<double>(an->data.size());
        for (double& v : an->grad) v += g;
    });
    return t;
}

// ---------------------------------------------------------------------------
// Structure ops

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(new_shape));
    Tensor t = make_op_output(std::move(new_shape), a.data());
    auto an = a.node(), on = t.node();
    detail::record_op(OpKind::reshape, {a}, t, [an, on]() {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i];
    });
    return t;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != s0.size()) detail::shape_error(OpKind::concat, s0, p.shape());
        for (std::size_t d = 0; d < s0.size(); ++d)
            if (d != axis && p.shape()[d] != s0[d]) detail::shape_error(OpKind::concat, s0, p.shape());
        out_shape[axis] += p.shape()[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> out(shape_numel(out_shape));
    const std::size_t out_row = out_shape[axis] * inner;
    std::size_t col_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t p_row = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data().data() + o * p_row, p_row, out.data() + o * out_row + col_off);
        col_off += p_row;
    }
    Tensor t = make_op_output(std::move(out_shape), std::move(out));

    std::vector<detail::NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    auto on = t.node();
    auto pull = [nodes, on, outer, inner, out_row]() {
        const double* g = on->grad.data();
        std::size_t col_off2 = 0;
        for (const auto& pn : nodes) {
            const std::size_t p_row = pn->data.size() / outer;
            if (pn->requires_grad) {
                double* gp = pn->grad.data();
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = g + o * out_row + col_off2;
                    double* dst = gp + o * p_row;
                    for (std::size_t i = 0; i < p_row; ++i) dst[i] += src[i];
                }
            }
            col_off2 += p_row;
        }
    };
    bool any_rg = false;
    for (const Tensor& p : parts) any_rg = any_rg || p.requires_grad();
    if (detail::active_record() != nullptr && any_rg) {
        t.node()->requires_grad = true;
        detail::active_record()->append(OpKind::concat, std::move(nodes), t.node(), pull);
    }
    return t;
}

// Gather along `axis` (0 or 1; rank-1 tensors use axis 0). Indices act as
// constants of the forward pass; the backward scatter-adds into the source.
inline Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices, std::size_t axis = 0) {
    if (a.rank() != 1 && a.rank() != 2) throw std::invalid_argument("gather: rank must be 1 or 2");
    if (axis >= a.rank()) throw std::invalid_argument("gather: axis out of range");
    const std::size_t limit = a.shape()[axis];
    for (std::size_t idx : indices)
        if (idx >= limit)
            throw std::invalid_argument("gather: index " + std::to_string(idx) + " out of range " +
                                        std::to_string(limit));
    Shape out_shape = a.shape();
    out_shape[axis] = indices.size();

    const std::size_t rows = a.rank() == 2 ? a.shape()[0] : 1;
    const std::size_t cols = a.rank() == 2 ? a.shape()[1] : a.shape()[0];
    std::vector<double> out(shape_numel(out_shape));
    const double* pa = a.data().data();
    if (axis == a.rank() - 1) {  // last-axis gather (covers rank-1 and rank-2 cols)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < indices.size(); ++j) out[r * indices.size() + j] = pa[r * cols + indices[j]];
    } else {  // rank-2 row gather
        for (std::size_t j = 0; j < indices.size(); ++j)
            std::copy_n(pa + indices[j] * cols, cols, out.data() + j * cols);
    }
    Tensor t = make_op_output(std::move(out_shape), std::move(out));
    auto an = a.node(), on = t.node();
    const bool last_axis = (axis == a.rank() - 1);
    detail::record_op(OpKind::gather, {a}, t, [an, on, indices, rows, cols, last_axis]() {
        if (!an->requires_grad) return;
        const double* g = on->grad.data();
        double* ga = an->grad.data();
        if (last_axis) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < indices.size(); ++j) ga[r * cols + indices[j]] += g[r * indices.size() + j];
        } else {
            for (std::size_t j = 0; j < indices.size(); ++j) {
                double* dst = ga + indices[j] * cols;
                const double* src = g + j * cols;
                for (std::size_t i = 0; i < cols; ++i) dst[i] += src[i];
            }
        }
    });
    return t;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
    if (a.rank() != 2) throw std::invalid_argument("gather: row gather needs a rank-2 tensor");
    return gather(a, indices, 0);
}

inline Tensor gather_cols(const Tensor& a, const std::vector<std::size_t>& indices) {
    if (a.rank() != 2) throw std::invalid_argument("gather: column gather needs a rank-2 tensor");
    return gather(a, indices, 1);
}

// Indices [0, n) in order.
inline std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v(end - begin);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

}  // namespace xshift
