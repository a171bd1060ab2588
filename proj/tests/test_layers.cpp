#include <catch2/catch_amalgamated.hpp>

#include "gbnet/gradcheck.hpp"
#include "gbnet/layers.hpp"

using namespace gbnet;
using Catch::Approx;

namespace {

template <typename S>
Tensor<S> randn(Shape shape, Pcg32& rng) {
    auto t = Tensor<S>::uninit(shape);
    for (auto& v : t.data()) v = static_cast<S>(rng.gaussian());
    return t;
}

template <typename S>
void freeze_bn_identity(BatchNormState<S>& bn) {
    bn.mode = Mode::eval;
    std::fill(bn.running_mean.data().begin(), bn.running_mean.data().end(), S(0));
    std::fill(bn.running_var.data().begin(), bn.running_var.data().end(), S(1));
    bn.eps = S(0);
}

}  // namespace

TEST_CASE("mlp with identity weights reduces to the activation") {
    Pcg32 rng(1);
    MlpLayer<float> layer;
    layer.init(3, 3, rng);
    for (std::int64_t o = 0; o < 3; ++o)
        for (std::int64_t i = 0; i < 3; ++i) layer.weight.data()[o * 3 + i] = o == i ? 1.f : 0.f;
    freeze_bn_identity(layer.bn);

    auto x = Tensor<float>::from({-1, 0.5f, 2, 3, -4, 0}, {2, 3});
    auto y = mlp_forward(layer, x);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const float v = x.data()[i];
        REQUIRE(y.data()[i] == Approx(v > 0 ? v : 0.2f * v));
    }
    REQUIRE_THROWS_AS(mlp_forward(layer, Tensor<float>::zeros({2, 4})), ShapeError);
}

TEST_CASE("mlp zero-centers constant input in train mode") {
    Pcg32 rng(2);
    MlpLayer<float> layer;
    layer.init(4, 5, rng);
    layer.bn.mode = Mode::train;
    auto x = Tensor<float>::full({6, 4}, 3.0f);
    auto y = mlp_forward(layer, x);
    for (float v : y.data()) REQUIRE(v == Approx(0.0f).margin(1e-5));
}

TEST_CASE("mlp on a rank-3 tensor equals per-position application") {
    Pcg32 rng(3);
    MlpLayer<float> layer;
    layer.init(3, 4, rng);
    layer.bn.mode = Mode::eval;
    auto x = randn<float>({5, 2, 3}, rng);
    auto flat = mlp_forward(layer, reshape(x, {10, 3}));
    auto nested = mlp_forward(layer, x);
    REQUIRE(nested.shape() == Shape{5, 2, 4});
    REQUIRE(nested.data() == flat.data());
}

TEST_CASE("mlp gradients in both batchnorm modes") {
    Pcg32 rng(4);
    MlpLayer<double> layer;
    layer.init(4, 3, rng);
    auto x = randn<double>({8, 4}, rng);
    auto w = randn<double>({8, 3}, rng);

    for (Mode mode : {Mode::train, Mode::eval}) {
        layer.bn.mode = mode;
        auto res = grad_check<double>(
            [&] { return sum_all(mul(mlp_forward(layer, x), w)); },
            {x, layer.weight, layer.bias, layer.bn.gamma, layer.bn.beta});
        INFO((mode == Mode::train ? "train" : "eval"));
        REQUIRE(res.ok(1e-4));
    }
}

TEST_CASE("lfc averaging kernel takes the neighbor mean") {
    Pcg32 rng(5);
    LfcLayer<float> layer;
    layer.init(3, 3, 4, rng);
    for (auto& v : layer.weight.data()) v = 0;
    for (std::int64_t o = 0; o < 3; ++o)
        for (std::int64_t j = 0; j < 4; ++j) layer.weight.data()[(o * 3 + o) * 4 + j] = 0.25f;
    freeze_bn_identity(layer.bn);
    layer.activation.kind = Activation::identity;

    auto x = randn<float>({6, 4, 3}, rng);
    auto y = lfc_forward(layer, x);
    REQUIRE(y.shape() == Shape{6, 3});
    for (std::int64_t n = 0; n < 6; ++n)
        for (std::int64_t c = 0; c < 3; ++c) {
            float mean = 0;
            for (std::int64_t j = 0; j < 4; ++j) mean += x.data()[(n * 4 + j) * 3 + c];
            mean /= 4;
            REQUIRE(y.data()[n * 3 + c] == Approx(mean).margin(1e-6));
        }
}

TEST_CASE("lfc of zero input with zero bias is zero") {
    Pcg32 rng(6);
    LfcLayer<float> layer;
    layer.init(2, 3, 2, rng);
    freeze_bn_identity(layer.bn);
    auto y = lfc_forward(layer, Tensor<float>::zeros({4, 2, 2}));
    for (float v : y.data()) REQUIRE(v == 0.0f);
    REQUIRE_THROWS_AS(lfc_forward(layer, Tensor<float>::zeros({4, 3, 2})), ShapeError);
}

TEST_CASE("lfc gradients match finite differences") {
    Pcg32 rng(7);
    LfcLayer<double> layer;
    layer.init(2, 4, 3, rng);
    auto x = randn<double>({6, 3, 2}, rng);
    auto w = randn<double>({6, 4}, rng);
    for (Mode mode : {Mode::train, Mode::eval}) {
        layer.bn.mode = mode;
        auto res = grad_check<double>(
            [&] { return sum_all(mul(lfc_forward(layer, x), w)); },
            {x, layer.weight, layer.bias, layer.bn.gamma, layer.bn.beta});
        REQUIRE(res.ok(1e-4));
    }
}

TEST_CASE("edgeconv shape contract") {
    Pcg32 rng(8);
    MlpLayer<float> layer;
    layer.init(28, 64, rng);
    layer.bn.mode = Mode::eval;
    auto x = randn<float>({16, 14}, rng);
    auto nbr = knn_search(x, 20 > 15 ? 15 : 20);
    // N=16 allows at most k=15; the paper-scale contract N=16, k=20 is checked
    // at the model level where N > k holds
    auto y = edgeconv_forward(layer, x, nbr);
    REQUIRE(y.shape() == Shape{16, 15, 64});
}

TEST_CASE("edgeconv with center-copy weights repeats x_i in every slot") {
    Pcg32 rng(9);
    MlpLayer<float> layer;
    layer.init(6, 3, rng);
    for (auto& v : layer.weight.data()) v = 0;
    for (std::int64_t o = 0; o < 3; ++o) layer.weight.data()[o * 6 + o] = 1.0f;
    freeze_bn_identity(layer.bn);
    layer.activation.kind = Activation::identity;

    auto x = randn<float>({10, 3}, rng);
    auto nbr = knn_search(x, 4);
    auto y = edgeconv_forward(layer, x, nbr);
    REQUIRE(y.shape() == Shape{10, 4, 3});
    for (std::int64_t i = 0; i < 10; ++i)
        for (std::int64_t j = 0; j < 4; ++j)
            for (std::int64_t c = 0; c < 3; ++c)
                REQUIRE(y.data()[(i * 4 + j) * 3 + c] == x.data()[i * 3 + c]);
}

TEST_CASE("edgeconv is permutation equivariant") {
    Pcg32 rng(10);
    MlpLayer<float> layer;
    layer.init(6, 5, rng);
    layer.bn.mode = Mode::eval;
    auto x = randn<float>({12, 3}, rng);
    auto y = edgeconv_forward(layer, x, knn_search(x, 3));

    std::vector<std::int64_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_indices(perm.begin(), perm.end(), rng);
    auto xp = Tensor<float>::uninit({12, 3});
    for (std::int64_t i = 0; i < 12; ++i)
        for (int c = 0; c < 3; ++c)
            xp.data()[i * 3 + c] = x.data()[perm[static_cast<std::size_t>(i)] * 3 + c];
    auto yp = edgeconv_forward(layer, xp, knn_search(xp, 3));

    for (std::int64_t i = 0; i < 12; ++i) {
        const std::int64_t src = perm[static_cast<std::size_t>(i)];
        for (std::int64_t jc = 0; jc < 3 * 5; ++jc)
            REQUIRE(yp.data()[i * 15 + jc] == Approx(y.data()[src * 15 + jc]).margin(1e-6));
    }
}

TEST_CASE("max over edgeconv neighbors ignores slot order; edgelfc does not") {
    Pcg32 rng(11);
    MlpLayer<float> mlp;
    mlp.init(4, 3, rng);
    mlp.bn.mode = Mode::eval;
    LfcLayer<float> lfc;
    lfc.init(4, 3, 3, rng);
    lfc.bn.mode = Mode::eval;

    auto x = randn<float>({8, 2}, rng);
    auto nbr = knn_search(x, 3);
    NeighborIndex swapped = nbr;
    for (std::int64_t i = 0; i < 8; ++i)
        std::swap(swapped.indices[static_cast<std::size_t>(i * 3)],
                  swapped.indices[static_cast<std::size_t>(i * 3 + 2)]);

    auto pooled = reduce_max(edgeconv_forward(mlp, x, nbr), 1);
    auto pooled_swapped = reduce_max(edgeconv_forward(mlp, x, swapped), 1);
    REQUIRE(pooled.data() == pooled_swapped.data());

    auto folded = lfc_forward(lfc, build_edge_features(x, nbr));
    auto folded_swapped = lfc_forward(lfc, build_edge_features(x, swapped));
    bool any_diff = false;
    for (std::size_t i = 0; i < folded.data().size(); ++i)
        any_diff = any_diff || folded.data()[i] != folded_swapped.data()[i];
    REQUIRE(any_diff);
}

TEST_CASE("edgeconv and edgelfc gradients through the gather") {
    Pcg32 rng(12);
    auto x = randn<double>({8, 3}, rng);
    auto nbr = knn_search(x, 2);

    MlpLayer<double> mlp;
    mlp.init(6, 4, rng);
    auto wm = randn<double>({8, 2, 4}, rng);
    for (Mode mode : {Mode::train, Mode::eval}) {
        mlp.bn.mode = mode;
        auto res = grad_check<double>(
            [&] { return sum_all(mul(edgeconv_forward(mlp, x, nbr), wm)); },
            {x, mlp.weight, mlp.bias, mlp.bn.gamma, mlp.bn.beta});
        REQUIRE(res.ok(1e-4));
    }

    LfcLayer<double> lfc;
    lfc.init(6, 4, 2, rng);
    lfc.bn.mode = Mode::eval;
    auto wl = randn<double>({8, 4}, rng);
    auto res = grad_check<double>(
        [&] { return sum_all(mul(edgelfc_forward(lfc, x, nbr), wl)); },
        {x, lfc.weight, lfc.bias, lfc.bn.gamma, lfc.bn.beta});
    REQUIRE(res.ok(1e-4));
}

TEST_CASE("edgelfc on an all-identical cloud sees only center channels") {
    Pcg32 rng(13);
    LfcLayer<float> lfc;
    lfc.init(4, 3, 2, rng);
    freeze_bn_identity(lfc.bn);
    lfc.activation.kind = Activation::identity;

    auto x = Tensor<float>::full({5, 2}, 1.5f);
    auto nbr = knn_search(x, 2);
    auto y = edgelfc_forward(lfc, x, nbr);

    // zero the edge-offset weight slice: output must be unchanged
    LfcLayer<float> center_only = lfc;
    center_only.weight = Tensor<float>::from(lfc.weight.data(), lfc.weight.shape());
    center_only.weight.set_requires_grad(false);
    for (std::int64_t o = 0; o < 3; ++o)
        for (std::int64_t c = 2; c < 4; ++c)
            for (std::int64_t j = 0; j < 2; ++j)
                center_only.weight.data()[(o * 4 + c) * 2 + j] = 0;
    auto y2 = edgelfc_forward(center_only, x, nbr);
    REQUIRE(y.data() == y2.data());
}

TEST_CASE("train-mode batchnorm output is standardized before the affine") {
    Pcg32 rng(14);
    BatchNormState<float> bn;
    bn.init(3);
    bn.mode = Mode::train;
    auto x = randn<float>({64, 3}, rng);
    for (auto& v : x.data()) v = v * 3 + 1;
    auto y = batchnorm_forward(bn, x);
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t r = 0; r < 64; ++r) mean += y.data()[r * 3 + c];
        mean /= 64;
        for (std::int64_t r = 0; r < 64; ++r) {
            const double d = y.data()[r * 3 + c] - mean;
            var += d * d;
        }
        var /= 64;
        REQUIRE(std::abs(mean) < 1e-5);
        REQUIRE(var == Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("single-row train batch falls back to running statistics") {
    BatchNormState<float> bn;
    bn.init(2);
    bn.mode = Mode::train;
    bn.running_mean.data() = {1, 2};
    bn.running_var.data() = {4, 9};
    auto x = Tensor<float>::from({3, 5}, {1, 2});
    auto y = batchnorm_forward(bn, x);
    REQUIRE(y.data()[0] == Approx((3 - 1) / 2.0f).margin(1e-4));
    REQUIRE(y.data()[1] == Approx((5 - 2) / 3.0f).margin(1e-4));
    // running stats untouched by the fallback
    REQUIRE(bn.running_mean.data() == std::vector<float>{1, 2});
}
