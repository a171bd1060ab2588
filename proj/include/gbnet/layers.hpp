#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "gbnet/geometry.hpp"
#include "gbnet/ops.hpp"
#include "gbnet/rng.hpp"

namespace gbnet {

enum class Mode { train, eval };

enum class Activation { leaky_relu, identity };

struct ActivationSpec {
    Activation kind = Activation::leaky_relu;
    float slope = 0.2f;
};

template <typename S>
Tensor<S> apply_activation(const Tensor<S>& x, const ActivationSpec& act) {
    switch (act.kind) {
        case Activation::leaky_relu:
            return leaky_relu(x, static_cast<S>(act.slope));
        case Activation::identity:
            return x;
    }
    throw ValueError("unknown activation");
}

// Named learnable tensor; names form stable dotted paths used by checkpoints.
template <typename S>
struct Param {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
struct BatchNormState {
    Tensor<S> gamma, beta, running_mean, running_var;
    S momentum = S(0.1);
    S eps = S(1e-5);
    Mode mode = Mode::train;

    void init(std::int64_t channels) {
        gamma = Tensor<S>::full({channels}, S(1));
        beta = Tensor<S>::zeros({channels});
        running_mean = Tensor<S>::zeros({channels});
        running_var = Tensor<S>::full({channels}, S(1));
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    std::int64_t channels() const { return gamma.numel(); }

    void collect(std::vector<Param<S>>& params, const std::string& prefix) {
        params.push_back({prefix + ".gamma", gamma});
        params.push_back({prefix + ".beta", beta});
    }

    void collect_buffers(std::vector<Param<S>>& bufs, const std::string& prefix) {
        bufs.push_back({prefix + ".running_mean", running_mean});
        bufs.push_back({prefix + ".running_var", running_var});
    }
};

// Normalizes the trailing channel axis over all other positions. A train-mode
// call with a single row cannot form batch statistics, so it falls back to the
// running stats and warns once.
template <typename S>
Tensor<S> batchnorm_forward(BatchNormState<S>& bn, const Tensor<S>& x) {
    const std::int64_t c = bn.channels();
    if (x.rank() < 1 || x.shape().back() != c)
        shape_error("batchnorm: input " + shape_str(x.shape()) + " does not end in " +
                    std::to_string(c) + " channels");
    const std::int64_t rows = x.numel() / c;
    auto x2 = x.rank() == 2 ? x : reshape(x, {rows, c});
    Tensor<S> y2;
    if (bn.mode == Mode::train && rows >= 2) {
        y2 = batchnorm_train(x2, bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                             bn.momentum, bn.eps);
    } else {
        if (bn.mode == Mode::train) {
            static bool warned = false;
            if (!warned) {
                std::cerr << "batchnorm: single-row batch, using running statistics\n";
                warned = true;
            }
        }
        y2 = batchnorm_eval(x2, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps);
    }
    return x.rank() == 2 ? y2 : reshape(y2, x.shape());
}

namespace detail {
template <typename S>
Tensor<S> kaiming_uniform(Shape shape, std::int64_t fan_in, Pcg32& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    auto t = Tensor<S>::uninit(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-bound, bound));
    return t;
}
}  // namespace detail

// Shared per-position affine map + BN + activation (a 1x1 convolution).
// use_bn = false turns it into a plain affine layer.
template <typename S>
struct MlpLayer {
    Tensor<S> weight;  // [C_out x C_in]
    Tensor<S> bias;    // [C_out]
    BatchNormState<S> bn;
    ActivationSpec activation;
    bool use_bn = true;

    void init(std::int64_t c_in, std::int64_t c_out, Pcg32& rng) {
        weight = detail::kaiming_uniform<S>({c_out, c_in}, c_in, rng);
        bias = Tensor<S>::zeros({c_out});
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        bn.init(c_out);
    }

    std::int64_t c_in() const { return weight.dim(1); }
    std::int64_t c_out() const { return weight.dim(0); }

    void collect(std::vector<Param<S>>& params, const std::string& prefix) {
        params.push_back({prefix + ".weight", weight});
        params.push_back({prefix + ".bias", bias});
        if (use_bn) bn.collect(params, prefix + ".bn");
    }

    void collect_buffers(std::vector<Param<S>>& bufs, const std::string& prefix) {
        if (use_bn) bn.collect_buffers(bufs, prefix + ".bn");
    }
};

template <typename S>
Tensor<S> mlp_forward(MlpLayer<S>& layer, const Tensor<S>& x) {
    if (x.rank() < 2 || x.shape().back() != layer.c_in())
        shape_error("mlp: input " + shape_str(x.shape()) + " does not end in " +
                    std::to_string(layer.c_in()) + " channels");
    const std::int64_t rows = x.numel() / layer.c_in();
    auto x2 = x.rank() == 2 ? x : reshape(x, {rows, layer.c_in()});
    auto y = add_rowvec(matmul(x2, layer.weight, false, true), layer.bias);
    if (layer.use_bn) y = batchnorm_forward(layer.bn, y);
    y = apply_activation(y, layer.activation);
    if (x.rank() == 2) return y;
    Shape out_shape = x.shape();
    out_shape.back() = layer.c_out();
    return reshape(y, out_shape);
}

// Shared 1xk map: mixes channels and folds k ordered neighbor slots into one
// output per point.
template <typename S>
struct LfcLayer {
    Tensor<S> weight;  // [C_out x C_in x k]
    Tensor<S> bias;    // [C_out]
    BatchNormState<S> bn;
    ActivationSpec activation;
    std::int64_t k = 0;

    void init(std::int64_t c_in, std::int64_t c_out, std::int64_t k_slots, Pcg32& rng) {
        k = k_slots;
        weight = detail::kaiming_uniform<S>({c_out, c_in, k_slots}, c_in * k_slots, rng);
        bias = Tensor<S>::zeros({c_out});
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        bn.init(c_out);
    }

    std::int64_t c_in() const { return weight.dim(1); }
    std::int64_t c_out() const { return weight.dim(0); }

    void collect(std::vector<Param<S>>& params, const std::string& prefix) {
        params.push_back({prefix + ".weight", weight});
        params.push_back({prefix + ".bias", bias});
        bn.collect(params, prefix + ".bn");
    }

    void collect_buffers(std::vector<Param<S>>& bufs, const std::string& prefix) {
        bn.collect_buffers(bufs, prefix + ".bn");
    }
};

// out[n, o] = act(BN(sum_{c,j} weight[o,c,j] * x[n,j,c] + bias[o]))
template <typename S>
Tensor<S> lfc_forward(LfcLayer<S>& layer, const Tensor<S>& x) {
    if (x.rank() != 3 || x.dim(1) != layer.k || x.dim(2) != layer.c_in())
        shape_error("lfc: input " + shape_str(x.shape()) + " does not match [N x " +
                    std::to_string(layer.k) + " x " + std::to_string(layer.c_in()) + "]");
    const std::int64_t n = x.dim(0);
    // [C_out x C_in x k] -> [k x C_in x C_out] -> [k*C_in x C_out] aligns the
    // weight with the flattened (slot, channel) input layout
    auto wk = reshape(permute(layer.weight, {2, 1, 0}), {layer.k * layer.c_in(), layer.c_out()});
    auto x2 = reshape(x, {n, layer.k * layer.c_in()});
    auto y = add_rowvec(matmul(x2, wk), layer.bias);
    y = batchnorm_forward(layer.bn, y);
    return apply_activation(y, layer.activation);
}

// MLP over edge features; keeps the neighbor axis.
template <typename S>
Tensor<S> edgeconv_forward(MlpLayer<S>& layer, const Tensor<S>& x, const NeighborIndex& nbr) {
    return mlp_forward(layer, build_edge_features(x, nbr));
}

// LFC over edge features; folds the neighbor axis away.
// Inverted dropout: surviving activations are rescaled by 1/(1-rate) so the
// expected value is unchanged and eval needs no correction.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Pcg32& rng) {
    if (rate == 0) return x;
    if (rate < 0 || rate >= 1)
        throw ValueError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    const S inv = S(1) / static_cast<S>(1 - rate);
    const auto n = static_cast<std::size_t>(x.numel());
    auto mask = std::make_shared<std::vector<S>>(n);
    auto out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        (*mask)[i] = rng.uniform() < rate ? S(0) : inv;
        po[i] = px[i] * (*mask)[i];
    }
    detail::maybe_record<S>("dropout", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const S* go = out.node()->grad.data();
        S* gx = x.node()->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * (*mask)[i];
    });
    return out;
}

template <typename S>
Tensor<S> edgelfc_forward(LfcLayer<S>& layer, const Tensor<S>& x, const NeighborIndex& nbr) {
    return lfc_forward(layer, build_edge_features(x, nbr));
}

}  // namespace gbnet
