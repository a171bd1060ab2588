#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gbnet/attention.hpp"

namespace gbnet {

// Edge block with two branches over one neighbor graph:
//  - prominent: edge MLP, back-projection to the input space, a second edge
//    MLP over the restoration error, max-pool over neighbors, attention;
//  - fine-grained: slot-sensitive LFC over the same edges, attention.
// The prominent result also carries to the next block; the block output is
// the two branches concatenated, prominent first. Either branch can be
// switched off, leaving a plain max-pooled edge convolution.
template <typename S>
struct AbemLayer {
    MlpLayer<S> edge_mlp;   // 2*d_in -> d_out on [x_i, x_j - x_i]
    LfcLayer<S> back_proj;  // k slots of d_out -> d_in
    MlpLayer<S> error_mlp;  // 2*d_in -> d_out on restoration-error edges
    LfcLayer<S> fine_lfc;   // k slots of 2*d_in -> d_out
    CaaLayer<S> attn_prom;
    CaaLayer<S> attn_fine;
    std::int64_t d_in = 0, d_out = 0, k = 0, n_points = 0;
    bool use_prominent = true;
    bool use_fine_grained = true;

    void init(std::int64_t d_in_, std::int64_t d_out_, std::int64_t k_, std::int64_t n,
              std::int64_t ratio, bool prominent, bool fine_grained, Pcg32& rng) {
        if (n <= k_)
            throw ValueError("abem: need more points than neighbors, got n = " +
                             std::to_string(n) + ", k = " + std::to_string(k_));
        d_in = d_in_;
        d_out = d_out_;
        k = k_;
        n_points = n;
        use_prominent = prominent;
        use_fine_grained = fine_grained;
        edge_mlp.init(2 * d_in, d_out, rng);
        if (use_prominent) {
            back_proj.init(d_out, d_in, k, rng);
            error_mlp.init(2 * d_in, d_out, rng);
            attn_prom.init(n, ratio, rng);
        }
        if (use_fine_grained) {
            fine_lfc.init(2 * d_in, d_out, k, rng);
            attn_fine.init(n, ratio, rng);
        }
    }

    std::int64_t out_width() const { return d_out * (use_fine_grained ? 2 : 1); }

    void set_mode(Mode m) {
        edge_mlp.bn.mode = m;
        if (use_prominent) {
            back_proj.bn.mode = m;
            error_mlp.bn.mode = m;
            attn_prom.set_mode(m);
        }
        if (use_fine_grained) {
            fine_lfc.bn.mode = m;
            attn_fine.set_mode(m);
        }
    }

    void collect(std::vector<Param<S>>& params, const std::string& prefix) {
        edge_mlp.collect(params, prefix + ".edge");
        if (use_prominent) {
            back_proj.collect(params, prefix + ".back");
            error_mlp.collect(params, prefix + ".err");
            attn_prom.collect(params, prefix + ".attn_prom");
        }
        if (use_fine_grained) {
            fine_lfc.collect(params, prefix + ".fine");
            attn_fine.collect(params, prefix + ".attn_fine");
        }
    }

    void collect_buffers(std::vector<Param<S>>& bufs, const std::string& prefix) {
        edge_mlp.collect_buffers(bufs, prefix + ".edge");
        if (use_prominent) {
            back_proj.collect_buffers(bufs, prefix + ".back");
            error_mlp.collect_buffers(bufs, prefix + ".err");
            attn_prom.collect_buffers(bufs, prefix + ".attn_prom");
        }
        if (use_fine_grained) {
            fine_lfc.collect_buffers(bufs, prefix + ".fine");
            attn_fine.collect_buffers(bufs, prefix + ".attn_fine");
        }
    }
};

template <typename S>
struct AbemState {
    Tensor<S> edge_feats;   // [N x k x d_out]
    Tensor<S> restored;     // [N x d_in]
    Tensor<S> residual;     // restored - x
    Tensor<S> error_feats;  // [N x k x d_out]
    Tensor<S> pooled;       // neighbor max of edge + error features
    Tensor<S> prominent;    // [N x d_out]
    Tensor<S> fine;         // [N x d_out]
};

template <typename S>
struct AbemOut {
    Tensor<S> out;    // [N x out_width], prominent columns first
    Tensor<S> carry;  // [N x d_out], input to the next block's graph and edges
};

// x is one cloud [N x d_in] or a stack of clouds [(B*N) x d_in]; nbr must
// have been built over exactly those rows with the layer's k.
template <typename S>
AbemOut<S> abem_forward(AbemLayer<S>& layer, const Tensor<S>& x, const NeighborIndex& nbr,
                        AbemState<S>* state = nullptr) {
    if (x.rank() != 2 || x.dim(1) != layer.d_in)
        shape_error("abem: expected [rows x " + std::to_string(layer.d_in) + "] input, got " +
                    shape_str(x.shape()));
    if (nbr.n != x.dim(0) || nbr.k != layer.k)
        shape_error("abem: neighbor table " + std::to_string(nbr.n) + " x " +
                    std::to_string(nbr.k) + " does not match input " + shape_str(x.shape()) +
                    " with k = " + std::to_string(layer.k));

    auto edge_feats = edgeconv_forward(layer.edge_mlp, x, nbr);
    Tensor<S> carry;
    if (layer.use_prominent) {
        auto restored = lfc_forward(layer.back_proj, edge_feats);
        auto residual = sub(restored, x);
        auto error_feats = edgeconv_forward(layer.error_mlp, residual, nbr);
        auto pooled = reduce_max(add(edge_feats, error_feats), 1);
        carry = caa_forward_stacked(layer.attn_prom, pooled);
        if (state) {
            state->restored = restored;
            state->residual = residual;
            state->error_feats = error_feats;
            state->pooled = pooled;
        }
    } else {
        carry = reduce_max(edge_feats, 1);
    }

    Tensor<S> out = carry;
    if (layer.use_fine_grained) {
        auto fine = caa_forward_stacked(layer.attn_fine, edgelfc_forward(layer.fine_lfc, x, nbr));
        out = concat_axis<S>({carry, fine}, 1);
        if (state) state->fine = fine;
    }
    if (state) {
        state->edge_feats = edge_feats;
        state->prominent = carry;
    }
    return {out, carry};
}

}  // namespace gbnet
