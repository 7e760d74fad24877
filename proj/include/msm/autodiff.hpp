#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msm/errors.hpp"
#include "msm/parallel.hpp"
#include "msm/tensor.hpp"

namespace msm {

// Reverse-mode autodiff over a define-by-run graph. Graphs are rebuilt per
// forward pass; node values are never mutated after creation.

enum class Op {
    Leaf,
    Add,
    AddN,
    Sub,
    Mul,
    Scale,
    Matmul,
    BiasAdd,
    RowSum,
    RowBroadcastMul,
    SoftmaxRows,
    LogSoftmaxRows,
    Gelu,
    RmsNorm,
    Abs,
    MeanAll,
    SumAll,
    RowGather,
    MultiScatterAdd,
    SliceRows,
    SliceCols,
    ConcatCols,
    Transpose,
    GroupConv,
};

struct OpAttrs {
    std::vector<std::vector<std::int32_t>> index_lists;  // RowGather, MultiScatterAdd
    std::int64_t rows_out = 0;                           // MultiScatterAdd
    std::int64_t begin = 0, end = 0;                     // slices
    double scalar = 0.0;                                 // Scale
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    std::uint64_t id = 0;
    Op op = Op::Leaf;
    std::vector<NodePtr> inputs;
    OpAttrs attrs;
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::string param_name;  // nonempty only for parameter leaves
};

// Named parameter store: values and same-shaped gradient accumulators.
struct ParamSet {
    std::map<std::string, Tensor> values;
    std::map<std::string, Tensor> grads;

    void add(const std::string& name, Tensor init) {
        grads.emplace(name, Tensor(init.shape()));
        values.emplace(name, std::move(init));
    }
    bool has(const std::string& name) const { return values.count(name) != 0; }
    Tensor& value(const std::string& name) { return values.at(name); }
    const Tensor& value(const std::string& name) const { return values.at(name); }
    Tensor& grad(const std::string& name) { return grads.at(name); }
    void zero_grads() {
        for (auto& [name, g] : grads) g = Tensor(g.shape());
    }
};

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

// C += A * B, all row-major; deterministic for any thread count
inline void gemm_acc(const double* a, std::int64_t m, std::int64_t k, const double* b, std::int64_t n, double* c) {
    parallel_for(m, 16, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// C += A * B^T  (A: m x k, B: n x k, C: m x n)
inline void gemm_nt_acc(const double* a, std::int64_t m, std::int64_t k, const double* b, std::int64_t n, double* c) {
    parallel_for(m, 16, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (std::int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += s;
            }
        }
    });
}

// C += A^T * B  (A: m x k, B: m x n, C: k x n)
inline void gemm_tn_acc(const double* a, std::int64_t m, std::int64_t k, const double* b, std::int64_t n, double* c) {
    parallel_for(k, 16, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p) {
            double* crow = c + p * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const double av = a[i * k + p];
                const double* brow = b + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double gauss_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

constexpr double kRmsEps = 1e-6;

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace detail

inline NodePtr make_leaf(Tensor value, bool requires_grad = false, std::string param_name = {}) {
    auto n = std::make_shared<Node>();
    n->id = detail::next_node_id();
    n->op = Op::Leaf;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->param_name = std::move(param_name);
    return n;
}

inline NodePtr constant(Tensor value) { return make_leaf(std::move(value), false); }

// Forward evaluation of one primitive. Shape errors throw ShapeError; a
// non-finite result throws NumericError.
inline NodePtr apply_primitive(Op op, std::vector<NodePtr> inputs, OpAttrs attrs = {}) {
    using detail::require;
    auto n = std::make_shared<Node>();
    n->id = detail::next_node_id();
    n->op = op;
    n->attrs = std::move(attrs);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
    n->inputs = std::move(inputs);
    const auto& in = n->inputs;

    switch (op) {
        case Op::Leaf:
            throw ContractError("apply_primitive cannot create leaves");
        case Op::Add: {
            require(in.size() == 2 && in[0]->value.same_shape(in[1]->value), "add: shape mismatch");
            Tensor out(in[0]->value.shape());
            const double* a = in[0]->value.data();
            const double* b = in[1]->value.data();
            double* o = out.data();
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] = a[i] + b[i];
            n->value = std::move(out);
            break;
        }
        case Op::AddN: {
            require(!in.empty(), "add_n: no inputs");
            for (const auto& x : in) require(x->value.same_shape(in[0]->value), "add_n: shape mismatch");
            Tensor out(in[0]->value.shape());
            double* o = out.data();
            for (const auto& x : in) {
                const double* a = x->value.data();
                for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] += a[i];
            }
            n->value = std::move(out);
            break;
        }
        case Op::Sub: {
            require(in.size() == 2 && in[0]->value.same_shape(in[1]->value), "sub: shape mismatch");
            Tensor out(in[0]->value.shape());
            const double* a = in[0]->value.data();
            const double* b = in[1]->value.data();
            double* o = out.data();
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] = a[i] - b[i];
            n->value = std::move(out);
            break;
        }
        case Op::Mul: {
            require(in.size() == 2 && in[0]->value.same_shape(in[1]->value), "mul: shape mismatch");
            Tensor out(in[0]->value.shape());
            const double* a = in[0]->value.data();
            const double* b = in[1]->value.data();
            double* o = out.data();
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] = a[i] * b[i];
            n->value = std::move(out);
            break;
        }
        case Op::Scale: {
            require(in.size() == 1, "scale: one input");
            Tensor out(in[0]->value.shape());
            const double* a = in[0]->value.data();
            double* o = out.data();
            const double c = n->attrs.scalar;
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] = c * a[i];
            n->value = std::move(out);
            break;
        }
        case Op::Matmul: {
            require(in.size() == 2 && in[0]->value.ndim() == 2 && in[1]->value.ndim() == 2, "matmul: need 2-d inputs");
            const auto& a = in[0]->value;
            const auto& b = in[1]->value;
            require(a.cols() == b.rows(), "matmul: inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
            Tensor out({a.rows(), b.cols()});
            detail::gemm_acc(a.data(), a.rows(), a.cols(), b.data(), b.cols(), out.data());
            n->value = std::move(out);
            break;
        }
        case Op::BiasAdd: {
            require(in.size() == 2 && in[0]->value.ndim() == 2 && in[1]->value.ndim() == 1, "bias_add: matrix + vector");
            const auto& x = in[0]->value;
            const auto& b = in[1]->value;
            require(x.cols() == b.numel(), "bias_add: width mismatch");
            Tensor out(x.shape());
            const std::int64_t r = x.rows(), c = x.cols();
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b[j];
            n->value = std::move(out);
            break;
        }
        case Op::RowSum: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "row_sum: 2-d input");
            const auto& x = in[0]->value;
            Tensor out({x.rows(), 1});
            for (std::int64_t i = 0; i < x.rows(); ++i) {
                double s = 0.0;
                for (std::int64_t j = 0; j < x.cols(); ++j) s += x.at(i, j);
                out.at(i, 0) = s;
            }
            n->value = std::move(out);
            break;
        }
        case Op::RowBroadcastMul: {
            require(in.size() == 2 && in[0]->value.ndim() == 2 && in[1]->value.ndim() == 2, "row_broadcast_mul: 2-d inputs");
            const auto& x = in[0]->value;
            const auto& s = in[1]->value;
            require(s.cols() == 1 && s.rows() == x.rows(), "row_broadcast_mul: scale must be [rows x 1]");
            Tensor out(x.shape());
            for (std::int64_t i = 0; i < x.rows(); ++i) {
                const double f = s.at(i, 0);
                for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) = f * x.at(i, j);
            }
            n->value = std::move(out);
            break;
        }
        case Op::SoftmaxRows:
        case Op::LogSoftmaxRows: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "softmax: 2-d input");
            const auto& x = in[0]->value;
            Tensor out(x.shape());
            for (std::int64_t i = 0; i < x.rows(); ++i) {
                double mx = x.at(i, 0);
                for (std::int64_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x.at(i, j));
                double z = 0.0;
                for (std::int64_t j = 0; j < x.cols(); ++j) z += std::exp(x.at(i, j) - mx);
                if (op == Op::SoftmaxRows) {
                    for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) = std::exp(x.at(i, j) - mx) / z;
                } else {
                    const double lz = std::log(z);
                    for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(i, j) - mx - lz;
                }
            }
            n->value = std::move(out);
            break;
        }
        case Op::Gelu: {
            require(in.size() == 1, "gelu: one input");
            const auto& x = in[0]->value;
            Tensor out(x.shape());
            const double* a = x.data();
            double* o = out.data();
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) o[i] = a[i] * detail::gauss_cdf(a[i]);
            n->value = std::move(out);
            break;
        }
        case Op::RmsNorm: {
            require(in.size() == 2 && in[0]->value.ndim() == 2 && in[1]->value.ndim() == 1, "rmsnorm: matrix + gain");
            const auto& x = in[0]->value;
            const auto& g = in[1]->value;
            require(g.numel() == x.cols(), "rmsnorm: gain width mismatch");
            Tensor out(x.shape());
            for (std::int64_t i = 0; i < x.rows(); ++i) {
                double ms = 0.0;
                for (std::int64_t j = 0; j < x.cols(); ++j) ms += x.at(i, j) * x.at(i, j);
                const double r = std::sqrt(ms / static_cast<double>(x.cols()) + detail::kRmsEps);
                for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) = g[j] * x.at(i, j) / r;
            }
            n->value = std::move(out);
            break;
        }
        case Op::Abs: {
            require(in.size() == 1, "abs: one input");
            const auto& x = in[0]->value;
            Tensor out(x.shape());
            for (std::int64_t i = 0, e = out.numel(); i < e; ++i) out[i] = std::fabs(x[i]);
            n->value = std::move(out);
            break;
        }
        case Op::MeanAll:
        case Op::SumAll: {
            require(in.size() == 1 && in[0]->value.numel() > 0, "reduce: nonempty input");
            const auto& x = in[0]->value;
            double s = 0.0;
            for (std::int64_t i = 0, e = x.numel(); i < e; ++i) s += x[i];
            if (op == Op::MeanAll) s /= static_cast<double>(x.numel());
            n->value = Tensor::scalar(s);
            break;
        }
        case Op::RowGather: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "row_gather: 2-d input");
            require(n->attrs.index_lists.size() == 1, "row_gather: one index list");
            const auto& x = in[0]->value;
            const auto& idx = n->attrs.index_lists[0];
            Tensor out({static_cast<std::int64_t>(idx.size()), x.cols()});
            for (std::size_t i = 0; i < idx.size(); ++i) {
                require(idx[i] >= 0 && idx[i] < x.rows(), "row_gather: index out of range");
                const double* src = x.data() + static_cast<std::int64_t>(idx[i]) * x.cols();
                double* dst = out.data() + static_cast<std::int64_t>(i) * x.cols();
                for (std::int64_t j = 0; j < x.cols(); ++j) dst[j] = src[j];
            }
            n->value = std::move(out);
            break;
        }
        case Op::MultiScatterAdd: {
            require(!in.empty() && n->attrs.index_lists.size() == in.size(), "multi_scatter_add: one index list per input");
            require(n->attrs.rows_out > 0, "multi_scatter_add: rows_out required");
            const std::int64_t c = in[0]->value.cols();
            Tensor out({n->attrs.rows_out, c});
            for (std::size_t k = 0; k < in.size(); ++k) {
                const auto& x = in[k]->value;
                const auto& idx = n->attrs.index_lists[k];
                require(x.ndim() == 2 && x.cols() == c, "multi_scatter_add: width mismatch");
                require(static_cast<std::int64_t>(idx.size()) == x.rows(), "multi_scatter_add: index length mismatch");
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    require(idx[i] >= 0 && idx[i] < n->attrs.rows_out, "multi_scatter_add: index out of range");
                    const double* src = x.data() + static_cast<std::int64_t>(i) * c;
                    double* dst = out.data() + static_cast<std::int64_t>(idx[i]) * c;
                    for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
            n->value = std::move(out);
            break;
        }
        case Op::SliceRows: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "slice_rows: 2-d input");
            const auto& x = in[0]->value;
            const std::int64_t r0 = n->attrs.begin, r1 = n->attrs.end;
            require(0 <= r0 && r0 <= r1 && r1 <= x.rows(), "slice_rows: bad range");
            Tensor out({r1 - r0, x.cols()});
            for (std::int64_t i = r0; i < r1; ++i)
                for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i - r0, j) = x.at(i, j);
            n->value = std::move(out);
            break;
        }
        case Op::SliceCols: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "slice_cols: 2-d input");
            const auto& x = in[0]->value;
            const std::int64_t c0 = n->attrs.begin, c1 = n->attrs.end;
            require(0 <= c0 && c0 <= c1 && c1 <= x.cols(), "slice_cols: bad range");
            Tensor out({x.rows(), c1 - c0});
            for (std::int64_t i = 0; i < x.rows(); ++i)
                for (std::int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = x.at(i, j);
            n->value = std::move(out);
            break;
        }
        case Op::ConcatCols: {
            require(!in.empty(), "concat_cols: no inputs");
            const std::int64_t r = in[0]->value.rows();
            std::int64_t c = 0;
            for (const auto& x : in) {
                require(x->value.ndim() == 2 && x->value.rows() == r, "concat_cols: row mismatch");
                c += x->value.cols();
            }
            Tensor out({r, c});
            std::int64_t off = 0;
            for (const auto& x : in) {
                const std::int64_t xc = x->value.cols();
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < xc; ++j) out.at(i, off + j) = x->value.at(i, j);
                off += xc;
            }
            n->value = std::move(out);
            break;
        }
        case Op::Transpose: {
            require(in.size() == 1 && in[0]->value.ndim() == 2, "transpose: 2-d input");
            const auto& x = in[0]->value;
            Tensor out({x.cols(), x.rows()});
            for (std::int64_t i = 0; i < x.rows(); ++i)
                for (std::int64_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
            n->value = std::move(out);
            break;
        }
        case Op::GroupConv: {
            // inputs: x [N x Cin], w [G*Cin x Cout], bias [Cout]
            // index_lists holds (src_g, dst_g) pairs per weight group; within a
            // group the destination rows must be unique
            require(in.size() == 3, "group_conv: x, w, bias");
            const auto& x = in[0]->value;
            const auto& w = in[1]->value;
            const auto& bias = in[2]->value;
            require(x.ndim() == 2 && w.ndim() == 2 && bias.ndim() == 1, "group_conv: bad ranks");
            require(n->attrs.index_lists.size() % 2 == 0 && !n->attrs.index_lists.empty(), "group_conv: src/dst list pairs");
            const std::int64_t groups = static_cast<std::int64_t>(n->attrs.index_lists.size()) / 2;
            const std::int64_t cin = x.cols(), cout = w.cols();
            require(w.rows() == groups * cin, "group_conv: weight rows != groups * cin");
            require(bias.numel() == cout, "group_conv: bias width mismatch");
            require(n->attrs.rows_out > 0, "group_conv: rows_out required");
            Tensor out({n->attrs.rows_out, cout});
            for (std::int64_t r = 0; r < out.rows(); ++r) {
                double* orow = out.data() + r * cout;
                for (std::int64_t j = 0; j < cout; ++j) orow[j] = bias[j];
            }
            for (std::int64_t g = 0; g < groups; ++g) {
                const auto& src = n->attrs.index_lists[static_cast<std::size_t>(2 * g)];
                const auto& dst = n->attrs.index_lists[static_cast<std::size_t>(2 * g + 1)];
                require(src.size() == dst.size(), "group_conv: src/dst length mismatch");
                for (std::size_t i = 0; i < src.size(); ++i)
                    require(src[i] >= 0 && src[i] < x.rows() && dst[i] >= 0 && dst[i] < out.rows(),
                            "group_conv: index out of range");
                const double* wg = w.data() + g * cin * cout;
                const double* xd = x.data();
                double* od = out.data();
                parallel_for(static_cast<std::int64_t>(src.size()), 64, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) {
                        const double* xrow = xd + static_cast<std::int64_t>(src[static_cast<std::size_t>(i)]) * cin;
                        double* orow = od + static_cast<std::int64_t>(dst[static_cast<std::size_t>(i)]) * cout;
                        for (std::int64_t k = 0; k < cin; ++k) {
                            const double a = xrow[k];
                            const double* wrow = wg + k * cout;
                            for (std::int64_t j = 0; j < cout; ++j) orow[j] += a * wrow[j];
                        }
                    }
                });
            }
            n->value = std::move(out);
            break;
        }
    }

    if (!n->value.all_finite()) throw NumericError("non-finite output from primitive");
    return n;
}

namespace detail {

inline Tensor& ensure_grad(Node& n) {
    if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
}

// Accumulates input gradients for one node given its output gradient.
inline void backward_step(Node& n) {
    const Tensor& g = n.grad;
    auto& in = n.inputs;
    auto acc = [&](std::size_t k) -> Tensor& { return ensure_grad(*in[k]); };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add: {
            for (std::size_t k = 0; k < 2; ++k) {
                if (!in[k]->requires_grad) continue;
                Tensor& gi = acc(k);
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i];
            }
            break;
        }
        case Op::AddN: {
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (!in[k]->requires_grad) continue;
                Tensor& gi = acc(k);
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            if (in[0]->requires_grad) {
                Tensor& gi = acc(0);
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i];
            }
            if (in[1]->requires_grad) {
                Tensor& gi = acc(1);
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            if (in[0]->requires_grad) {
                Tensor& gi = acc(0);
                const double* b = in[1]->value.data();
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i] * b[i];
            }
            if (in[1]->requires_grad) {
                Tensor& gi = acc(1);
                const double* a = in[0]->value.data();
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i] * a[i];
            }
            break;
        }
        case Op::Scale: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const double c = n.attrs.scalar;
            for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += c * g[i];
            break;
        }
        case Op::Matmul: {
            const auto& a = in[0]->value;
            const auto& b = in[1]->value;
            if (in[0]->requires_grad) gemm_nt_acc(g.data(), a.rows(), b.cols(), b.data(), a.cols(), acc(0).data());
            if (in[1]->requires_grad) gemm_tn_acc(a.data(), a.rows(), a.cols(), g.data(), b.cols(), acc(1).data());
            break;
        }
        case Op::BiasAdd: {
            const std::int64_t r = g.rows(), c = g.cols();
            if (in[0]->requires_grad) {
                Tensor& gi = acc(0);
                for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i];
            }
            if (in[1]->requires_grad) {
                Tensor& gb = acc(1);
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) gb[j] += g.at(i, j);
            }
            break;
        }
        case Op::RowSum: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            for (std::int64_t i = 0; i < gi.rows(); ++i)
                for (std::int64_t j = 0; j < gi.cols(); ++j) gi.at(i, j) += g.at(i, 0);
            break;
        }
        case Op::RowBroadcastMul: {
            const auto& x = in[0]->value;
            const auto& s = in[1]->value;
            if (in[0]->requires_grad) {
                Tensor& gi = acc(0);
                for (std::int64_t i = 0; i < x.rows(); ++i) {
                    const double f = s.at(i, 0);
                    for (std::int64_t j = 0; j < x.cols(); ++j) gi.at(i, j) += f * g.at(i, j);
                }
            }
            if (in[1]->requires_grad) {
                Tensor& gs = acc(1);
                for (std::int64_t i = 0; i < x.rows(); ++i) {
                    double d = 0.0;
                    for (std::int64_t j = 0; j < x.cols(); ++j) d += g.at(i, j) * x.at(i, j);
                    gs.at(i, 0) += d;
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const Tensor& y = n.value;
            for (std::int64_t i = 0; i < y.rows(); ++i) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
                for (std::int64_t j = 0; j < y.cols(); ++j) gi.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
            break;
        }
        case Op::LogSoftmaxRows: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const Tensor& y = n.value;  // log-probabilities
            for (std::int64_t i = 0; i < y.rows(); ++i) {
                double gs = 0.0;
                for (std::int64_t j = 0; j < y.cols(); ++j) gs += g.at(i, j);
                for (std::int64_t j = 0; j < y.cols(); ++j) gi.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
            }
            break;
        }
        case Op::Gelu: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const double* x = in[0]->value.data();
            for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i] * (gauss_cdf(x[i]) + x[i] * gauss_pdf(x[i]));
            break;
        }
        case Op::RmsNorm: {
            const auto& x = in[0]->value;
            const auto& gain = in[1]->value;
            const std::int64_t r = x.rows(), c = x.cols();
            for (std::int64_t i = 0; i < r; ++i) {
                double ms = 0.0;
                for (std::int64_t j = 0; j < c; ++j) ms += x.at(i, j) * x.at(i, j);
                const double rr = std::sqrt(ms / static_cast<double>(c) + kRmsEps);
                if (in[0]->requires_grad) {
                    Tensor& gi = ensure_grad(*in[0]);
                    double dot = 0.0;  // sum_k g_k * gain_k * x_k
                    for (std::int64_t j = 0; j < c; ++j) dot += g.at(i, j) * gain[j] * x.at(i, j);
                    const double r3 = rr * rr * rr * static_cast<double>(c);
                    for (std::int64_t j = 0; j < c; ++j) gi.at(i, j) += g.at(i, j) * gain[j] / rr - x.at(i, j) * dot / r3;
                }
                if (in[1]->requires_grad) {
                    Tensor& gg = ensure_grad(*in[1]);
                    for (std::int64_t j = 0; j < c; ++j) gg[j] += g.at(i, j) * x.at(i, j) / rr;
                }
            }
            break;
        }
        case Op::Abs: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const double* x = in[0]->value.data();
            // subgradient at 0 is 0
            for (std::int64_t i = 0, e = g.numel(); i < e; ++i) gi[i] += g[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
            break;
        }
        case Op::MeanAll: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const double d = g[0] / static_cast<double>(gi.numel());
            for (std::int64_t i = 0, e = gi.numel(); i < e; ++i) gi[i] += d;
            break;
        }
        case Op::SumAll: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            for (std::int64_t i = 0, e = gi.numel(); i < e; ++i) gi[i] += g[0];
            break;
        }
        case Op::RowGather: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const auto& idx = n.attrs.index_lists[0];
            const std::int64_t c = gi.cols();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double* src = g.data() + static_cast<std::int64_t>(i) * c;
                double* dst = gi.data() + static_cast<std::int64_t>(idx[i]) * c;
                for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::MultiScatterAdd: {
            const std::int64_t c = g.cols();
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (!in[k]->requires_grad) continue;
                Tensor& gi = acc(k);
                const auto& idx = n.attrs.index_lists[k];
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const double* src = g.data() + static_cast<std::int64_t>(idx[i]) * c;
                    double* dst = gi.data() + static_cast<std::int64_t>(i) * c;
                    for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
            break;
        }
        case Op::SliceRows: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const std::int64_t r0 = n.attrs.begin;
            for (std::int64_t i = 0; i < g.rows(); ++i)
                for (std::int64_t j = 0; j < g.cols(); ++j) gi.at(r0 + i, j) += g.at(i, j);
            break;
        }
        case Op::SliceCols: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            const std::int64_t c0 = n.attrs.begin;
            for (std::int64_t i = 0; i < g.rows(); ++i)
                for (std::int64_t j = 0; j < g.cols(); ++j) gi.at(i, c0 + j) += g.at(i, j);
            break;
        }
        case Op::ConcatCols: {
            std::int64_t off = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                const std::int64_t xc = in[k]->value.cols();
                if (in[k]->requires_grad) {
                    Tensor& gi = acc(k);
                    for (std::int64_t i = 0; i < g.rows(); ++i)
                        for (std::int64_t j = 0; j < xc; ++j) gi.at(i, j) += g.at(i, off + j);
                }
                off += xc;
            }
            break;
        }
        case Op::Transpose: {
            if (!in[0]->requires_grad) break;
            Tensor& gi = acc(0);
            for (std::int64_t i = 0; i < g.rows(); ++i)
                for (std::int64_t j = 0; j < g.cols(); ++j) gi.at(j, i) += g.at(i, j);
            break;
        }
        case Op::GroupConv: {
            const auto& x = in[0]->value;
            const auto& w = in[1]->value;
            const std::int64_t groups = static_cast<std::int64_t>(n.attrs.index_lists.size()) / 2;
            const std::int64_t cin = x.cols(), cout = w.cols();
            if (in[0]->requires_grad) {
                Tensor& gx = acc(0);
                for (std::int64_t grp = 0; grp < groups; ++grp) {
                    const auto& src = n.attrs.index_lists[static_cast<std::size_t>(2 * grp)];
                    const auto& dst = n.attrs.index_lists[static_cast<std::size_t>(2 * grp + 1)];
                    const double* wg = w.data() + grp * cin * cout;
                    const double* gd = g.data();
                    double* gxd = gx.data();
                    // src rows are unique within a group, so pairs can run in parallel
                    parallel_for(static_cast<std::int64_t>(src.size()), 64, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i) {
                            const double* grow = gd + static_cast<std::int64_t>(dst[static_cast<std::size_t>(i)]) * cout;
                            double* gxrow = gxd + static_cast<std::int64_t>(src[static_cast<std::size_t>(i)]) * cin;
                            for (std::int64_t k = 0; k < cin; ++k) {
                                const double* wrow = wg + k * cout;
                                double s = 0.0;
                                for (std::int64_t j = 0; j < cout; ++j) s += grow[j] * wrow[j];
                                gxrow[k] += s;
                            }
                        }
                    });
                }
            }
            if (in[1]->requires_grad) {
                Tensor& gw = acc(1);
                for (std::int64_t grp = 0; grp < groups; ++grp) {
                    const auto& src = n.attrs.index_lists[static_cast<std::size_t>(2 * grp)];
                    const auto& dst = n.attrs.index_lists[static_cast<std::size_t>(2 * grp + 1)];
                    const double* xd = x.data();
                    const double* gd = g.data();
                    double* gwg = gw.data() + grp * cin * cout;
                    parallel_for(cin, 4, [&](std::int64_t klo, std::int64_t khi) {
                        for (std::int64_t k = klo; k < khi; ++k) {
                            double* gwrow = gwg + k * cout;
                            for (std::size_t i = 0; i < src.size(); ++i) {
                                const double a = xd[static_cast<std::int64_t>(src[i]) * cin + k];
                                const double* grow = gd + static_cast<std::int64_t>(dst[i]) * cout;
                                for (std::int64_t j = 0; j < cout; ++j) gwrow[j] += a * grow[j];
                            }
                        }
                    });
                }
            }
            if (in[2]->requires_grad) {
                Tensor& gb = acc(2);
                for (std::int64_t r = 0; r < g.rows(); ++r) {
                    const double* grow = g.data() + r * cout;
                    for (std::int64_t j = 0; j < cout; ++j) gb[j] += grow[j];
                }
            }
            break;
        }
    }
}

inline void topo_order(const NodePtr& root, std::vector<Node*>& order) {
    // iterative post-order over grad-requiring nodes
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        bool descended = false;
        while (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
                descended = true;
                break;
            }
        }
        if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
            order.push_back(stack.back().first);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Accumulates dLoss/dParam into params.grads for every parameter leaf that is
// reachable from the loss; unreachable parameters keep their current value
// (zero them with zero_grads before a fresh pass).
inline void backward(const NodePtr& loss, ParamSet& params) {
    if (loss->value.numel() != 1) throw ContractError("backward: loss must be scalar, got " + loss->value.shape_str());
    if (!loss->requires_grad) return;
    std::vector<Node*> order;
    detail::topo_order(loss, order);
    loss->grad = Tensor::scalar(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->grad.numel() == 0) continue;  // no gradient flowed here
        detail::backward_step(*node);
    }
    for (Node* node : order) {
        if (node->op == Op::Leaf && !node->param_name.empty() && node->grad.numel() != 0) {
            Tensor& dst = params.grad(node->param_name);
            if (!dst.same_shape(node->grad)) throw ShapeError("backward: gradient shape mismatch for " + node->param_name);
            for (std::int64_t i = 0, e = dst.numel(); i < e; ++i) dst[i] += node->grad[i];
        }
    }
}

// Builds parameter leaf nodes bound to a ParamSet for one forward pass. Each
// name yields a single shared leaf so reuse accumulates gradients.
class ParamNodes {
  public:
    ParamNodes(ParamSet& params, bool requires_grad) : params_(&params), requires_grad_(requires_grad) {}

    NodePtr operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        auto leaf = make_leaf(params_->value(name), requires_grad_, requires_grad_ ? name : std::string{});
        cache_.emplace(name, leaf);
        return leaf;
    }

    bool requires_grad() const { return requires_grad_; }
    ParamSet& params() { return *params_; }

  private:
    ParamSet* params_;
    bool requires_grad_;
    std::map<std::string, NodePtr> cache_;
};

// Convenience wrappers used by model code.
namespace ops {

inline NodePtr add(NodePtr a, NodePtr b) { return apply_primitive(Op::Add, {std::move(a), std::move(b)}); }
inline NodePtr add_n(std::vector<NodePtr> xs) { return apply_primitive(Op::AddN, std::move(xs)); }
inline NodePtr sub(NodePtr a, NodePtr b) { return apply_primitive(Op::Sub, {std::move(a), std::move(b)}); }
inline NodePtr mul(NodePtr a, NodePtr b) { return apply_primitive(Op::Mul, {std::move(a), std::move(b)}); }
inline NodePtr scale(NodePtr a, double c) {
    OpAttrs at;
    at.scalar = c;
    return apply_primitive(Op::Scale, {std::move(a)}, std::move(at));
}
inline NodePtr matmul(NodePtr a, NodePtr b) { return apply_primitive(Op::Matmul, {std::move(a), std::move(b)}); }
inline NodePtr bias_add(NodePtr x, NodePtr b) { return apply_primitive(Op::BiasAdd, {std::move(x), std::move(b)}); }
inline NodePtr row_sum(NodePtr x) { return apply_primitive(Op::RowSum, {std::move(x)}); }
inline NodePtr row_broadcast_mul(NodePtr x, NodePtr s) { return apply_primitive(Op::RowBroadcastMul, {std::move(x), std::move(s)}); }
inline NodePtr softmax_rows(NodePtr x) { return apply_primitive(Op::SoftmaxRows, {std::move(x)}); }
inline NodePtr log_softmax_rows(NodePtr x) { return apply_primitive(Op::LogSoftmaxRows, {std::move(x)}); }
inline NodePtr gelu(NodePtr x) { return apply_primitive(Op::Gelu, {std::move(x)}); }
inline NodePtr rmsnorm(NodePtr x, NodePtr gain) { return apply_primitive(Op::RmsNorm, {std::move(x), std::move(gain)}); }
inline NodePtr abs(NodePtr x) { return apply_primitive(Op::Abs, {std::move(x)}); }
inline NodePtr mean_all(NodePtr x) { return apply_primitive(Op::MeanAll, {std::move(x)}); }
inline NodePtr sum_all(NodePtr x) { return apply_primitive(Op::SumAll, {std::move(x)}); }
inline NodePtr row_gather(NodePtr x, std::vector<std::int32_t> idx) {
    OpAttrs at;
    at.index_lists.push_back(std::move(idx));
    return apply_primitive(Op::RowGather, {std::move(x)}, std::move(at));
}
inline NodePtr multi_scatter_add(std::vector<NodePtr> xs, std::vector<std::vector<std::int32_t>> idx, std::int64_t rows_out) {
    OpAttrs at;
    at.index_lists = std::move(idx);
    at.rows_out = rows_out;
    return apply_primitive(Op::MultiScatterAdd, std::move(xs), std::move(at));
}
inline NodePtr row_scatter_add(NodePtr x, std::vector<std::int32_t> idx, std::int64_t rows_out) {
    return multi_scatter_add({std::move(x)}, {std::move(idx)}, rows_out);
}
inline NodePtr slice_rows(NodePtr x, std::int64_t r0, std::int64_t r1) {
    OpAttrs at;
    at.begin = r0;
    at.end = r1;
    return apply_primitive(Op::SliceRows, {std::move(x)}, std::move(at));
}
inline NodePtr slice_cols(NodePtr x, std::int64_t c0, std::int64_t c1) {
    OpAttrs at;
    at.begin = c0;
    at.end = c1;
    return apply_primitive(Op::SliceCols, {std::move(x)}, std::move(at));
}
inline NodePtr concat_cols(std::vector<NodePtr> xs) { return apply_primitive(Op::ConcatCols, std::move(xs)); }
inline NodePtr transpose(NodePtr x) { return apply_primitive(Op::Transpose, {std::move(x)}); }
inline NodePtr group_conv(NodePtr x, NodePtr w, NodePtr bias, std::vector<std::vector<std::int32_t>> src_dst_lists,
                          std::int64_t rows_out) {
    OpAttrs at;
    at.index_lists = std::move(src_dst_lists);
    at.rows_out = rows_out;
    return apply_primitive(Op::GroupConv, {std::move(x), std::move(w), std::move(bias)}, std::move(at));
}

}  // namespace ops

}  // namespace msm
