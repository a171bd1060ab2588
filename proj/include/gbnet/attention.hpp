#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gbnet/layers.hpp"

namespace gbnet {

// Channel affinity attention over a per-cloud feature map F [N x d].
// Query/key/value projections act along the point axis (channels of the
// underlying shared MLPs are point slots), so compressing N to N/ratio
// keeps every pairwise channel relation while shrinking the working set.
template <typename S>
struct CaaLayer {
    MlpLayer<S> mlp_q;  // N -> N/ratio
    MlpLayer<S> mlp_k;  // N -> N/ratio
    MlpLayer<S> mlp_v;  // N -> N
    Tensor<S> alpha;    // learned residual gate, starts at 0
    std::int64_t n_points = 0;
    std::int64_t ratio = 4;

    void init(std::int64_t n, std::int64_t ratio_, Pcg32& rng) {
        if (ratio_ < 1)
            throw ValueError("caa: ratio must be >= 1, got " + std::to_string(ratio_));
        if (n < ratio_)
            throw ValueError("caa: need at least ratio = " + std::to_string(ratio_) +
                             " points, got " + std::to_string(n));
        n_points = n;
        ratio = ratio_;
        const std::int64_t np = n / ratio_;
        mlp_q.init(n, np, rng);
        mlp_k.init(n, np, rng);
        mlp_v.init(n, n, rng);
        alpha = Tensor<S>::zeros({1});
        alpha.set_requires_grad(true);
    }

    void set_mode(Mode m) {
        mlp_q.bn.mode = m;
        mlp_k.bn.mode = m;
        mlp_v.bn.mode = m;
    }

    void collect(std::vector<Param<S>>& params, const std::string& prefix) {
        mlp_q.collect(params, prefix + ".q");
        mlp_k.collect(params, prefix + ".k");
        mlp_v.collect(params, prefix + ".v");
        params.push_back({prefix + ".alpha", alpha});
    }

    void collect_buffers(std::vector<Param<S>>& bufs, const std::string& prefix) {
        mlp_q.collect_buffers(bufs, prefix + ".q");
        mlp_k.collect_buffers(bufs, prefix + ".k");
        mlp_v.collect_buffers(bufs, prefix + ".v");
    }
};

template <typename S>
struct AttentionState {
    Tensor<S> q;         // [N/ratio x d]
    Tensor<S> k;         // [N/ratio x d]
    Tensor<S> v;         // [N x d]
    Tensor<S> scores;    // [d x d] channel relations
    Tensor<S> affinity;  // [d x d], columns sum to 1
};

template <typename S>
inline void caa_check_input(const CaaLayer<S>& layer, const Tensor<S>& f) {
    if (f.rank() != 2 || f.dim(0) != layer.n_points)
        shape_error("caa: expected [" + std::to_string(layer.n_points) +
                    " x d] features, got " + shape_str(f.shape()));
}

// Compact channel comparator: scores[i][j] = <q_i, k_j> over compressed
// point slots. Never materializes anything N x N wide.
template <typename S>
Tensor<S> ccc_compute(CaaLayer<S>& layer, const Tensor<S>& f, AttentionState<S>* state = nullptr) {
    caa_check_input(layer, f);
    auto ft = transpose2d(f);  // [d x N]
    auto q = transpose2d(mlp_forward(layer.mlp_q, ft));
    auto k = transpose2d(mlp_forward(layer.mlp_k, ft));
    auto scores = matmul(q, k, true, false);  // [d x d]
    if (state) {
        state->q = q;
        state->k = k;
        state->scores = scores;
    }
    return scores;
}

// Affinity softmax over each column of (col_max - score): the channel pair
// with the highest score lands at the column minimum, so dissimilar
// channels get the strongest mixing weight.
template <typename S>
Tensor<S> cae_affinity(const Tensor<S>& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
        shape_error("cae_affinity: scores must be square, got " + shape_str(scores.shape()));
    auto col_max = reduce_max(scores, 0);
    return softmax_axis(add_rowvec(scalar_mul(scores, S(-1)), col_max), 0);
}

template <typename S>
Tensor<S> caa_forward(CaaLayer<S>& layer, const Tensor<S>& f, AttentionState<S>* state = nullptr) {
    auto scores = ccc_compute(layer, f, state);
    auto affinity = cae_affinity(scores);
    auto v = transpose2d(mlp_forward(layer.mlp_v, transpose2d(f)));  // [N x d]
    if (state) {
        state->v = v;
        state->affinity = affinity;
    }
    return add(f, scale_by(matmul(v, affinity), layer.alpha));
}

// Applies one CaaLayer independently to each cloud of a stacked feature map.
template <typename S>
Tensor<S> caa_forward_stacked(CaaLayer<S>& layer, const Tensor<S>& f) {
    if (f.rank() != 2 || f.dim(0) % layer.n_points != 0)
        shape_error("caa: stacked features " + shape_str(f.shape()) +
                    " do not split into clouds of " + std::to_string(layer.n_points));
    const std::int64_t clouds = f.dim(0) / layer.n_points;
    if (clouds == 1) return caa_forward(layer, f);
    std::vector<Tensor<S>> outs;
    outs.reserve(static_cast<std::size_t>(clouds));
    for (std::int64_t b = 0; b < clouds; ++b)
        outs.push_back(caa_forward(layer, slice_rows(f, b * layer.n_points, layer.n_points)));
    return concat_axis(outs, 0);
}

}  // namespace gbnet
