#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include <cblas.h>

#include "gbnet/tensor.hpp"

namespace gbnet {

namespace detail {

// C[M x N] = op(A)[M x K] * op(B)[K x N] * alpha + C * beta, row major.
template <typename S>
inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 S alpha, const S* a, std::int64_t lda, const S* b, std::int64_t ldb, S beta,
                 S* c, std::int64_t ldc) {
    static const bool blas_init = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)blas_init;
    const CBLAS_TRANSPOSE ta = trans_a ? CblasTrans : CblasNoTrans;
    const CBLAS_TRANSPOSE tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<S, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                    static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                    static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    } else {
        static_assert(std::is_same_v<S, double>);
        cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                    static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                    static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    }
}

template <typename S>
inline void maybe_record(const char* name, const Tensor<S>& out, bool track,
                         std::function<void()> fn) {
    if (!track) return;
    out.node()->requires_grad = true;
    Tape<S>::active()->record(name, out.node(), std::move(fn));
}

// outer/mid/inner decomposition of `shape` around `axis`.
inline void axis_split(const Shape& shape, std::int64_t axis, std::int64_t& outer,
                       std::int64_t& mid, std::int64_t& inner) {
    if (axis < 0 || axis >= static_cast<std::int64_t>(shape.size()))
        shape_error("reduce: axis " + std::to_string(axis) + " out of range for " +
                    shape_str(shape));
    outer = 1;
    inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= shape[i];
    mid = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline Shape drop_axis(const Shape& shape, std::int64_t axis) {
    Shape out;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(shape.size()); ++i)
        if (i != axis) out.push_back(shape[i]);
    return out;
}

}  // namespace detail

// ---- matmul ----------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
        shape_error("matmul: expected rank-2 inputs, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::int64_t ka = trans_a ? a.dim(0) : a.dim(1);
    const std::int64_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                    (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                    (trans_b ? "^T" : ""));
    const std::int64_t k = ka;
    auto out = Tensor<S>::uninit({m, n});
    detail::gemm<S>(trans_a, trans_b, m, n, k, S(1), a.data().data(), a.dim(1),
                    b.data().data(), b.dim(1), S(0), out.data().data(), n);
    check_finite("matmul", out);
    detail::maybe_record<S>("matmul", out, tracing(a, b), [=]() {
        const S* dc = out.node()->grad.data();
        if (a.requires_grad()) {
            S* da = a.node()->ensure_grad().data();
            const S* bp = b.data().data();
            if (!trans_a && !trans_b)
                detail::gemm<S>(false, true, m, k, n, S(1), dc, n, bp, n, S(1), da, k);
            else if (trans_a && !trans_b)
                detail::gemm<S>(false, true, k, m, n, S(1), bp, n, dc, n, S(1), da, m);
            else if (!trans_a && trans_b)
                detail::gemm<S>(false, false, m, k, n, S(1), dc, n, bp, k, S(1), da, k);
            else
                detail::gemm<S>(true, true, k, m, n, S(1), bp, k, dc, n, S(1), da, m);
        }
        if (b.requires_grad()) {
            S* db = b.node()->ensure_grad().data();
            const S* ap = a.data().data();
            if (!trans_a && !trans_b)
                detail::gemm<S>(true, false, k, n, m, S(1), ap, k, dc, n, S(1), db, n);
            else if (trans_a && !trans_b)
                detail::gemm<S>(false, false, k, n, m, S(1), ap, m, dc, n, S(1), db, n);
            else if (!trans_a && trans_b)
                detail::gemm<S>(true, false, n, k, m, S(1), dc, n, ap, k, S(1), db, k);
            else
                detail::gemm<S>(true, true, n, k, m, S(1), dc, n, ap, m, S(1), db, k);
        }
    });
    return out;
}

// ---- elementwise -----------------------------------------------------------

namespace detail {
template <typename S>
inline void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}
}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("add", a, b);
    auto out = Tensor<S>::uninit(a.shape());
    const auto n = static_cast<std::size_t>(a.numel());
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::maybe_record<S>("add", out, tracing(a, b), [=]() {
        const S* go = out.node()->grad.data();
        if (a.requires_grad()) {
            S* ga = a.node()->ensure_grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            S* gb = b.node()->ensure_grad().data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("sub", a, b);
    auto out = Tensor<S>::uninit(a.shape());
    const auto n = static_cast<std::size_t>(a.numel());
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    detail::maybe_record<S>("sub", out, tracing(a, b), [=]() {
        const S* go = out.node()->grad.data();
        if (a.requires_grad()) {
            S* ga = a.node()->ensure_grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            S* gb = b.node()->ensure_grad().data();
            for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("mul", a, b);
    auto out = Tensor<S>::uninit(a.shape());
    const auto n = static_cast<std::size_t>(a.numel());
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    detail::maybe_record<S>("mul", out, tracing(a, b), [=]() {
        const S* go = out.node()->grad.data();
        if (a.requires_grad()) {
            S* ga = a.node()->ensure_grad().data();
            const S* pb2 = b.data().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * pb2[i];
        }
        if (b.requires_grad()) {
            S* gb = b.node()->ensure_grad().data();
            const S* pa2 = a.data().data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * pa2[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& a, S c) {
    auto out = Tensor<S>::uninit(a.shape());
    const auto n = static_cast<std::size_t>(a.numel());
    const S* pa = a.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    detail::maybe_record<S>("scalar_mul", out, tracing(a), [=]() {
        if (!a.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* ga = a.node()->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * c;
    });
    return out;
}

// y = alpha * x where alpha is a learnable one-element tensor.
template <typename S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& alpha) {
    if (alpha.numel() != 1)
        shape_error("scale_by: alpha must hold one element, got " + shape_str(alpha.shape()));
    auto out = Tensor<S>::uninit(x.shape());
    const auto n = static_cast<std::size_t>(x.numel());
    const S a = alpha.data()[0];
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * a;
    detail::maybe_record<S>("scale_by", out, tracing(x, alpha), [=]() {
        const S* go = out.node()->grad.data();
        if (x.requires_grad()) {
            S* gx = x.node()->ensure_grad().data();
            const S a2 = alpha.data()[0];
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * a2;
        }
        if (alpha.requires_grad()) {
            const S* px2 = x.data().data();
            S acc = 0;
            for (std::size_t i = 0; i < n; ++i) acc += go[i] * px2[i];
            alpha.node()->ensure_grad()[0] += acc;
        }
    });
    return out;
}

// Broadcast add of a length-C vector over the trailing dimension.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
    if (v.rank() != 1 || x.rank() < 1 || x.shape().back() != v.dim(0))
        shape_error("add_rowvec: cannot broadcast " + shape_str(v.shape()) + " over " +
                    shape_str(x.shape()));
    const std::int64_t c = v.dim(0);
    const std::int64_t rows = x.numel() / c;
    auto out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    const S* pv = v.data().data();
    S* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pv[j];
    detail::maybe_record<S>("add_rowvec", out, tracing(x, v), [=]() {
        const S* go = out.node()->grad.data();
        if (x.requires_grad()) {
            S* gx = x.node()->ensure_grad().data();
            const auto n = static_cast<std::size_t>(rows * c);
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
        }
        if (v.requires_grad()) {
            S* gv = v.node()->ensure_grad().data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) gv[j] += go[r * c + j];
        }
    });
    return out;
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
    auto out = Tensor<S>::uninit(x.shape());
    const auto n = static_cast<std::size_t>(x.numel());
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > S(0) ? px[i] : px[i] * slope;
    detail::maybe_record<S>("leaky_relu", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        const S* px2 = x.data().data();
        S* gx = x.node()->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * (px2[i] > S(0) ? S(1) : slope);
    });
    return out;
}

// ---- reductions ------------------------------------------------------------

// Max over `axis`; ties resolve to the lowest index. The reduced axis is
// removed from the output shape.
template <typename S>
Tensor<S> reduce_max(const Tensor<S>& x, std::int64_t axis) {
    std::int64_t outer, mid, inner;
    detail::axis_split(x.shape(), axis, outer, mid, inner);
    auto out = Tensor<S>::uninit(detail::drop_axis(x.shape(), axis));
    auto arg = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(outer * inner));
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            S best = px[o * mid * inner + i];
            std::int64_t best_j = 0;
            for (std::int64_t j = 1; j < mid; ++j) {
                const S v = px[(o * mid + j) * inner + i];
                if (v > best) {
                    best = v;
                    best_j = j;
                }
            }
            po[o * inner + i] = best;
            (*arg)[static_cast<std::size_t>(o * inner + i)] = best_j;
        }
    detail::maybe_record<S>("reduce_max", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t j = (*arg)[static_cast<std::size_t>(o * inner + i)];
                gx[(o * mid + j) * inner + i] += go[o * inner + i];
            }
    });
    return out;
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& x, std::int64_t axis) {
    std::int64_t outer, mid, inner;
    detail::axis_split(x.shape(), axis, outer, mid, inner);
    auto out = Tensor<S>::uninit(detail::drop_axis(x.shape(), axis));
    const S* px = x.data().data();
    S* po = out.data().data();
    const S inv = S(1) / static_cast<S>(mid);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            S acc = 0;
            for (std::int64_t j = 0; j < mid; ++j) acc += px[(o * mid + j) * inner + i];
            po[o * inner + i] = acc * inv;
        }
    detail::maybe_record<S>("reduce_mean", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const S g = go[o * inner + i] * inv;
                for (std::int64_t j = 0; j < mid; ++j) gx[(o * mid + j) * inner + i] += g;
            }
    });
    return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    auto out = Tensor<S>::uninit(Shape{});
    const auto n = static_cast<std::size_t>(x.numel());
    const S* px = x.data().data();
    S acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;
    detail::maybe_record<S>("sum_all", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S g = out.node()->grad[0];
        S* gx = x.node()->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

// Numerically stable softmax along `axis` (max subtracted before exp).
template <typename S>
Tensor<S> softmax_axis(const Tensor<S>& x, std::int64_t axis) {
    std::int64_t outer, mid, inner;
    detail::axis_split(x.shape(), axis, outer, mid, inner);
    auto out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * mid * inner + i;
            S mx = px[base];
            for (std::int64_t j = 1; j < mid; ++j)
                mx = std::max(mx, px[base + j * inner]);
            S denom = 0;
            for (std::int64_t j = 0; j < mid; ++j) {
                const S e = std::exp(px[base + j * inner] - mx);
                po[base + j * inner] = e;
                denom += e;
            }
            const S inv = S(1) / denom;
            for (std::int64_t j = 0; j < mid; ++j) po[base + j * inner] *= inv;
        }
    detail::maybe_record<S>("softmax", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        const S* py = out.data().data();
        S* gx = x.node()->ensure_grad().data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t base = o * mid * inner + i;
                S dot = 0;
                for (std::int64_t j = 0; j < mid; ++j)
                    dot += py[base + j * inner] * go[base + j * inner];
                for (std::int64_t j = 0; j < mid; ++j)
                    gx[base + j * inner] +=
                        py[base + j * inner] * (go[base + j * inner] - dot);
            }
    });
    return out;
}

// ---- shape ops -------------------------------------------------------------

// Shares the underlying buffer; no copy in either direction.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                    shape_str(new_shape));
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = std::move(new_shape);
    node->data = x.node()->data;
    Tensor<S> out(std::move(node));
    detail::maybe_record<S>("reshape", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        const auto n = static_cast<std::size_t>(x.numel());
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
    });
    return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<std::int64_t>& perm) {
    const auto r = static_cast<std::size_t>(x.rank());
    if (perm.size() != r)
        shape_error("permute: order has " + std::to_string(perm.size()) + " axes for rank " +
                    std::to_string(r));
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        const auto p = perm[i];
        if (p < 0 || p >= static_cast<std::int64_t>(r) || seen[static_cast<std::size_t>(p)])
            shape_error("permute: invalid axis order");
        seen[static_cast<std::size_t>(p)] = true;
        out_shape[i] = x.dim(static_cast<std::size_t>(p));
    }
    std::vector<std::int64_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * x.dim(i);
        out_strides[i - 1] = out_strides[i] * out_shape[i];
    }
    auto out = Tensor<S>::uninit(out_shape);
    const S* px = x.data().data();
    S* po = out.data().data();
    const auto n = static_cast<std::int64_t>(x.numel());
    // walk output linearly, map each position back through perm
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t rem = lin, src = 0;
        for (std::size_t i = 0; i < r; ++i) {
            const std::int64_t idx = rem / out_strides[i];
            rem -= idx * out_strides[i];
            src += idx * in_strides[static_cast<std::size_t>(perm[i])];
        }
        po[lin] = px[src];
    }
    detail::maybe_record<S>("permute", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        for (std::int64_t lin = 0; lin < n; ++lin) {
            std::int64_t rem = lin, src = 0;
            for (std::size_t i = 0; i < r; ++i) {
                const std::int64_t idx = rem / out_strides[i];
                rem -= idx * out_strides[i];
                src += idx * in_strides[static_cast<std::size_t>(perm[i])];
            }
            gx[src] += go[lin];
        }
    });
    return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& x) {
    if (x.rank() != 2) shape_error("transpose2d: expected rank 2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::int64_t start, std::int64_t count) {
    if (x.rank() < 1) shape_error("slice_rows: scalar input");
    const std::int64_t rows = x.dim(0);
    if (start < 0 || count < 0 || start + count > rows)
        shape_error("slice_rows: range [" + std::to_string(start) + ", " +
                    std::to_string(start + count) + ") exceeds " + std::to_string(rows) +
                    " rows");
    const std::int64_t stride = x.numel() / rows;
    Shape out_shape = x.shape();
    out_shape[0] = count;
    auto out = Tensor<S>::uninit(out_shape);
    const S* px = x.data().data() + start * stride;
    std::copy(px, px + count * stride, out.data().data());
    detail::maybe_record<S>("slice_rows", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data() + start * stride;
        const auto n = static_cast<std::size_t>(count * stride);
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
    });
    return out;
}

template <typename S>
Tensor<S> concat_axis(const std::vector<Tensor<S>>& parts, std::int64_t axis) {
    if (parts.empty()) shape_error("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis < 0 || axis >= static_cast<std::int64_t>(ref.size()))
        shape_error("concat: axis " + std::to_string(axis) + " out of range for " +
                    shape_str(ref));
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank())
            shape_error("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                        shape_str(ref));
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(ref.size()); ++i)
            if (i != axis && p.shape()[i] != ref[i])
                shape_error("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                            shape_str(ref) + " outside axis " + std::to_string(axis));
        axis_total += p.shape()[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = axis_total;
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    auto out = Tensor<S>::uninit(out_shape);
    S* po = out.data().data();
    const std::int64_t out_row = axis_total * inner;
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t p_row = p.shape()[axis] * inner;
        const S* pp = p.data().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(pp + o * p_row, pp + (o + 1) * p_row, po + o * out_row + offset);
        offset += p_row;
    }
    bool track = false;
    for (const auto& p : parts) track = track || tracing(p);
    detail::maybe_record<S>("concat", out, track, [=]() {
        const S* go = out.node()->grad.data();
        std::int64_t off = 0;
        for (const auto& p : parts) {
            const std::int64_t p_row = p.shape()[axis] * inner;
            if (p.requires_grad()) {
                S* gp = p.node()->ensure_grad().data();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const S* src = go + o * out_row + off;
                    S* dst = gp + o * p_row;
                    for (std::int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
                }
            }
            off += p_row;
        }
    });
    return out;
}

// ---- graph gather ----------------------------------------------------------

// Per-point neighbor features: out[i][j] = [x_i, x_{nbr(i,j)} - x_i].
// `nbr` is row major [N x k]; entries index rows of x.
template <typename S>
Tensor<S> edge_features(const Tensor<S>& x, const std::vector<std::int64_t>& nbr,
                        std::int64_t k) {
    if (x.rank() != 2) shape_error("edge_features: points must be rank 2, got " +
                                   shape_str(x.shape()));
    const std::int64_t n = x.dim(0);
    const std::int64_t d = x.dim(1);
    if (static_cast<std::int64_t>(nbr.size()) != n * k)
        shape_error("edge_features: neighbor table has " + std::to_string(nbr.size()) +
                    " entries, expected " + std::to_string(n * k));
    for (auto idx : nbr)
        if (idx < 0 || idx >= n)
            throw ValueError("edge_features: neighbor index " + std::to_string(idx) +
                             " out of range [0, " + std::to_string(n) + ")");
    auto out = Tensor<S>::uninit({n, k, 2 * d});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const S* xi = px + i * d;
        for (std::int64_t j = 0; j < k; ++j) {
            const S* xj = px + nbr[static_cast<std::size_t>(i * k + j)] * d;
            S* row = po + (i * k + j) * 2 * d;
            for (std::int64_t c = 0; c < d; ++c) {
                row[c] = xi[c];
                row[d + c] = xj[c] - xi[c];
            }
        }
    }
    detail::maybe_record<S>("edge_features", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        for (std::int64_t i = 0; i < n; ++i) {
            S* gi = gx + i * d;
            for (std::int64_t j = 0; j < k; ++j) {
                S* gj = gx + nbr[static_cast<std::size_t>(i * k + j)] * d;
                const S* row = go + (i * k + j) * 2 * d;
                for (std::int64_t c = 0; c < d; ++c) {
                    gi[c] += row[c] - row[d + c];
                    gj[c] += row[d + c];
                }
            }
        }
    });
    return out;
}

// ---- batch norm ------------------------------------------------------------

// Rows are positions, columns are channels. Normalizes with biased batch
// variance, then updates running stats in place with the unbiased estimate.
// Backward recomputes x_hat from the saved per-channel mean and inverse sigma.
template <typename S>
Tensor<S> batchnorm_train(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          Tensor<S>& running_mean, Tensor<S>& running_var, S momentum, S eps) {
    if (x.rank() != 2) shape_error("batchnorm: expected rank-2 input, got " +
                                   shape_str(x.shape()));
    const std::int64_t rows = x.dim(0);
    const std::int64_t c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        shape_error("batchnorm: parameter length disagrees with " + std::to_string(c) +
                    " channels");
    if (rows < 2) throw ValueError("batchnorm: need at least 2 rows in training mode");

    auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c));
    auto inv = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c));
    const S* px = x.data().data();
    for (std::int64_t j = 0; j < c; ++j) {
        double acc = 0;
        for (std::int64_t r = 0; r < rows; ++r) acc += px[r * c + j];
        (*mean)[static_cast<std::size_t>(j)] = static_cast<S>(acc / rows);
    }
    for (std::int64_t j = 0; j < c; ++j) {
        const S m = (*mean)[static_cast<std::size_t>(j)];
        double acc = 0;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double d = px[r * c + j] - m;
            acc += d * d;
        }
        const double var_biased = acc / rows;
        const double var_unbiased = acc / (rows - 1);
        (*inv)[static_cast<std::size_t>(j)] =
            static_cast<S>(1.0 / std::sqrt(var_biased + static_cast<double>(eps)));
        running_mean.data()[static_cast<std::size_t>(j)] =
            (S(1) - momentum) * running_mean.data()[static_cast<std::size_t>(j)] + momentum * m;
        running_var.data()[static_cast<std::size_t>(j)] =
            (S(1) - momentum) * running_var.data()[static_cast<std::size_t>(j)] +
            momentum * static_cast<S>(var_unbiased);
    }
    auto out = Tensor<S>::uninit(x.shape());
    S* po = out.data().data();
    const S* pg = gamma.data().data();
    const S* pb = beta.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) {
            const auto ju = static_cast<std::size_t>(j);
            po[r * c + j] = pg[j] * ((px[r * c + j] - (*mean)[ju]) * (*inv)[ju]) + pb[j];
        }
    check_finite("batchnorm", out);
    detail::maybe_record<S>("batchnorm_train", out, tracing(x, gamma, beta), [=]() {
        const S* go = out.node()->grad.data();
        const S* px2 = x.data().data();
        const S* pg2 = gamma.data().data();
        std::vector<S> sum_dy(static_cast<std::size_t>(c), S(0));
        std::vector<S> sum_dy_xhat(static_cast<std::size_t>(c), S(0));
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j) {
                const auto ju = static_cast<std::size_t>(j);
                const S xh = (px2[r * c + j] - (*mean)[ju]) * (*inv)[ju];
                sum_dy[ju] += go[r * c + j];
                sum_dy_xhat[ju] += go[r * c + j] * xh;
            }
        if (gamma.requires_grad()) {
            S* gg = gamma.node()->ensure_grad().data();
            for (std::int64_t j = 0; j < c; ++j) gg[j] += sum_dy_xhat[static_cast<std::size_t>(j)];
        }
        if (beta.requires_grad()) {
            S* gb = beta.node()->ensure_grad().data();
            for (std::int64_t j = 0; j < c; ++j) gb[j] += sum_dy[static_cast<std::size_t>(j)];
        }
        if (x.requires_grad()) {
            S* gx = x.node()->ensure_grad().data();
            const S inv_rows = S(1) / static_cast<S>(rows);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) {
                    const auto ju = static_cast<std::size_t>(j);
                    const S xh = (px2[r * c + j] - (*mean)[ju]) * (*inv)[ju];
                    const S dxhat = go[r * c + j] * pg2[j];
                    gx[r * c + j] += (*inv)[ju] *
                                     (dxhat - inv_rows * sum_dy[ju] * pg2[j] -
                                      xh * inv_rows * sum_dy_xhat[ju] * pg2[j]);
                }
        }
    });
    return out;
}

template <typename S>
Tensor<S> batchnorm_eval(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                         const Tensor<S>& running_mean, const Tensor<S>& running_var, S eps) {
    if (x.rank() != 2) shape_error("batchnorm: expected rank-2 input, got " +
                                   shape_str(x.shape()));
    const std::int64_t rows = x.dim(0);
    const std::int64_t c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        shape_error("batchnorm: parameter length disagrees with " + std::to_string(c) +
                    " channels");
    auto inv = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c));
    for (std::int64_t j = 0; j < c; ++j)
        (*inv)[static_cast<std::size_t>(j)] = S(
            1.0 / std::sqrt(static_cast<double>(running_var.data()[static_cast<std::size_t>(j)]) +
                            static_cast<double>(eps)));
    auto out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    const S* pg = gamma.data().data();
    const S* pb = beta.data().data();
    const S* pm = running_mean.data().data();
    S* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j)
            po[r * c + j] =
                pg[j] * ((px[r * c + j] - pm[j]) * (*inv)[static_cast<std::size_t>(j)]) + pb[j];
    check_finite("batchnorm", out);
    detail::maybe_record<S>("batchnorm_eval", out, tracing(x, gamma, beta), [=]() {
        const S* go = out.node()->grad.data();
        const S* px2 = x.data().data();
        const S* pg2 = gamma.data().data();
        const S* pm2 = running_mean.data().data();
        if (x.requires_grad()) {
            S* gx = x.node()->ensure_grad().data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j)
                    gx[r * c + j] += go[r * c + j] * pg2[j] * (*inv)[static_cast<std::size_t>(j)];
        }
        if (gamma.requires_grad()) {
            S* gg = gamma.node()->ensure_grad().data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j)
                    gg[j] += go[r * c + j] * (px2[r * c + j] - pm2[j]) *
                             (*inv)[static_cast<std::size_t>(j)];
        }
        if (beta.requires_grad()) {
            S* gb = beta.node()->ensure_grad().data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) gb[j] += go[r * c + j];
        }
    });
    return out;
}

// ---- loss ------------------------------------------------------------------

// Mean softmax cross entropy over rows of `logits`, via the log-sum-exp form.
template <typename S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<std::int64_t>& labels) {
    if (logits.rank() != 2)
        shape_error("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
    const std::int64_t b = logits.dim(0);
    const std::int64_t c = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        shape_error("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(b) + " rows");
    for (auto y : labels)
        if (y < 0 || y >= c)
            throw ValueError("cross_entropy: label " + std::to_string(y) +
                             " out of range [0, " + std::to_string(c) + ")");
    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b * c));
    const S* pz = logits.data().data();
    double total = 0;
    for (std::int64_t r = 0; r < b; ++r) {
        S mx = pz[r * c];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, pz[r * c + j]);
        double denom = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double e = std::exp(static_cast<double>(pz[r * c + j] - mx));
            (*probs)[static_cast<std::size_t>(r * c + j)] = static_cast<S>(e);
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (std::int64_t j = 0; j < c; ++j)
            (*probs)[static_cast<std::size_t>(r * c + j)] *= static_cast<S>(inv);
        total += std::log(denom) + mx - pz[r * c + labels[static_cast<std::size_t>(r)]];
    }
    auto out = Tensor<S>::scalar(static_cast<S>(total / b));
    check_finite("cross_entropy", out);
    detail::maybe_record<S>("cross_entropy", out, tracing(logits), [=]() {
        if (!logits.requires_grad()) return;
        const S g = out.node()->grad[0] / static_cast<S>(b);
        S* gz = logits.node()->ensure_grad().data();
        for (std::int64_t r = 0; r < b; ++r)
            for (std::int64_t j = 0; j < c; ++j) {
                S p = (*probs)[static_cast<std::size_t>(r * c + j)];
                if (j == labels[static_cast<std::size_t>(r)]) p -= S(1);
                gz[r * c + j] += g * p;
            }
    });
    return out;
}

}  // namespace gbnet
