#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gbnet/checkpoint.hpp"
#include "gbnet/gradcheck.hpp"

using namespace gbnet;
using Catch::Approx;

namespace {

template <typename S>
PointCloud<S> random_unit_cloud(std::int64_t n, std::int64_t label, Pcg32& rng) {
    auto t = Tensor<S>::uninit({n, 3});
    for (auto& v : t.data()) v = static_cast<S>(rng.gaussian());
    return {normalize_to_unit_sphere(t), label};
}

ModelConfig reduced_config() {
    ModelConfig cfg;
    cfg.classes = 3;
    cfg.points = 12;
    cfg.k = 3;
    cfg.ratio = 4;
    cfg.descriptor_form = 6;
    cfg.scales = {4, 4, 8, 16};
    cfg.dropout = 0.0;
    return cfg;
}

template <typename S>
std::vector<std::vector<S>> snapshot(GbnetModel<S>& model) {
    std::vector<Param<S>> params;
    model.collect(params);
    std::vector<std::vector<S>> out;
    for (auto& p : params) out.push_back(p.tensor.data());
    return out;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("full-width forward meets the shape contract and calibrated start") {
    ModelConfig cfg;  // defaults: 6 classes, N=256, k=20, scales 64/64/128/256
    GbnetModel<float> model;
    model.init(cfg, 3);
    REQUIRE(model.fuse_width() == 1024);

    std::vector<Param<float>> params;
    model.collect(params);
    for (const auto& p : params)
        if (p.name.size() >= 5 && p.name.substr(p.name.size() - 5) == "alpha")
            for (float v : p.tensor.data()) REQUIRE(v == 0.0f);

    auto test_set = make_synthetic_dataset("test", 2, 256, 0.02f, 5);
    std::vector<PointCloud<float>> batch = {test_set.clouds[0], test_set.clouds[3]};

    model.set_mode(Mode::eval);
    auto logits = gbnet_forward(model, batch);
    REQUIRE(logits.shape() == Shape{2, 6});

    model.set_mode(Mode::train);
    std::vector<std::int64_t> random_labels;
    Pcg32 label_rng(7);
    std::vector<PointCloud<float>> wide(test_set.clouds.begin(), test_set.clouds.end());
    for (std::size_t i = 0; i < wide.size(); ++i)
        random_labels.push_back(static_cast<std::int64_t>(label_rng.uniform() * 6));
    auto train_logits = gbnet_forward(model, wide);
    auto loss = cross_entropy_mean(train_logits, random_labels);
    REQUIRE(loss.item() == Approx(std::log(6.0)).epsilon(0.10));
}

TEST_CASE("eval logits ignore point order") {
    ModelConfig cfg;
    cfg.classes = 6;
    cfg.points = 32;
    cfg.k = 4;
    cfg.scales = {8, 8, 16, 16};
    cfg.dropout = 0.0;
    GbnetModel<float> model;
    model.init(cfg, 11);
    model.set_mode(Mode::eval);

    auto data = make_synthetic_dataset("test", 1, 32, 0.02f, 13);
    auto cloud = data.clouds[4];
    auto base = gbnet_forward(model, {cloud});

    Pcg32 prng(17);
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<std::int64_t> perm(32);
        std::iota(perm.begin(), perm.end(), 0);
        shuffle_indices(perm.begin(), perm.end(), prng);
        auto shuffled = Tensor<float>::uninit({32, 3});
        for (std::int64_t i = 0; i < 32; ++i)
            for (int c = 0; c < 3; ++c)
                shuffled.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * 3 +
                                                         c)] =
                    cloud.points.data()[static_cast<std::size_t>(i * 3 + c)];
        auto out = gbnet_forward(model, {{shuffled, cloud.label}});
        for (int j = 0; j < 6; ++j)
            REQUIRE(out.data()[static_cast<std::size_t>(j)] ==
                    Approx(base.data()[static_cast<std::size_t>(j)]).margin(1e-5));
    }
}

TEST_CASE("eval mode rejects unnormalized clouds, train mode accepts them") {
    GbnetModel<float> model;
    model.init(reduced_config(), 19);
    Pcg32 rng(23);
    auto cloud = random_unit_cloud<float>(12, 0, rng);
    for (auto& v : cloud.points.data()) v *= 3.0f;

    model.set_mode(Mode::eval);
    REQUIRE_THROWS_AS(gbnet_forward(model, {cloud}), ValueError);

    model.set_mode(Mode::train);
    auto another = cloud;
    auto logits = gbnet_forward(model, {cloud, another});
    REQUIRE(logits.shape() == Shape{2, 3});
}

TEST_CASE("every ablation switch yields a runnable model") {
    struct Row {
        int form;
        bool prom, fine;
    };
    const Row rows[] = {{1, false, false}, {1, true, false}, {1, false, true},
                        {1, true, true},   {6, false, false}, {6, true, true}};
    Pcg32 rng(29);
    std::vector<PointCloud<float>> batch = {random_unit_cloud<float>(12, 0, rng),
                                            random_unit_cloud<float>(12, 1, rng)};
    for (const auto& row : rows) {
        auto cfg = reduced_config();
        cfg.descriptor_form = row.form;
        cfg.use_prominent = row.prom;
        cfg.use_fine_grained = row.fine;
        GbnetModel<float> model;
        model.init(cfg, 31);
        model.set_mode(Mode::eval);
        auto logits = gbnet_forward(model, batch);
        REQUIRE(logits.shape() == Shape{2, 3});
        for (float v : logits.data()) REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("end-to-end gradients match finite differences at reduced widths") {
    auto mode = GENERATE(Mode::train, Mode::eval);
    GbnetModel<double> model;
    model.init(reduced_config(), 37);
    model.set_mode(mode);
    for (auto& b : model.blocks) {
        b.attn_prom.alpha.data()[0] = 0.2;
        b.attn_fine.alpha.data()[0] = -0.1;
    }
    model.fuse_attn.alpha.data()[0] = 0.15;

    Pcg32 rng(41);
    std::vector<PointCloud<double>> batch = {random_unit_cloud<double>(12, 0, rng),
                                             random_unit_cloud<double>(12, 2, rng)};
    const std::vector<std::int64_t> labels = {0, 2};

    // representative parameter tensors across the depth of the network
    std::vector<Tensor<double>> inputs = {
        model.blocks[0].edge_mlp.weight,  model.blocks[0].back_proj.weight,
        model.blocks[1].attn_prom.alpha,  model.blocks[3].attn_fine.alpha,
        model.blocks[3].edge_mlp.bias,    model.fuse.bias,
        model.fuse_attn.mlp_q.bn.gamma,   model.fc_out.weight,
        model.fc_out.bias,
    };
    // wider step than the layer checks: through a deep network a tiny h
    // drowns in cancellation noise
    auto res = grad_check<double>(
        [&]() { return cross_entropy_mean(gbnet_forward(model, batch), labels); }, inputs, 1e-4);
    INFO("mode " << (mode == Mode::train ? "train" : "eval") << " max rel err "
                 << res.max_rel_err << " checked " << res.checked << " skipped " << res.skipped);
    REQUIRE(res.ok(1e-3));
}

TEST_CASE("cosine schedule and momentum step match the closed forms") {
    REQUIRE(cosine_lr(0.1, 0.001, 0, 300) == Approx(0.1));
    REQUIRE(cosine_lr(0.1, 0.001, 300, 300) == Approx(0.001));
    REQUIRE(cosine_lr(0.1, 0.001, 150, 300) == Approx(0.0505));
    REQUIRE_THROWS_AS(cosine_lr(0.1, 0.001, 0, 0), ValueError);

    auto w = Tensor<float>::from({1.0f}, {1});
    w.set_requires_grad(true);
    w.zero_grad();
    w.node()->grad[0] = 0.5f;
    std::vector<Param<float>> params = {{"w", w}};
    SgdMomentum<float> opt;
    opt.init(params, 0.9);
    opt.step(params, 0.1);
    REQUIRE(opt.velocity[0][0] == Approx(0.5f));
    REQUIRE(w.data()[0] == Approx(0.95f));

    // velocity carries into the next step
    w.node()->grad[0] = 0.0f;
    opt.step(params, 0.1);
    REQUIRE(opt.velocity[0][0] == Approx(0.45f));
    REQUIRE(w.data()[0] == Approx(0.905f));

    auto w2 = Tensor<float>::from({1.0f}, {1});
    w2.set_requires_grad(true);
    w2.zero_grad();
    w2.node()->grad[0] = 0.5f;
    std::vector<Param<float>> params2 = {{"w", w2}};
    SgdMomentum<float> plain;
    plain.init(params2, 0.0);
    plain.step(params2, 0.1);
    plain.step(params2, 0.1);  // same grad left in place
    REQUIRE(w2.data()[0] == Approx(1.0f - 2 * 0.1f * 0.5f));
}

TEST_CASE("training is deterministic given the seed") {
    auto data = make_synthetic_dataset("train", 2, 32, 0.02f, 43);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.lr_max = 0.05;
    tc.seed = 47;

    ModelConfig cfg;
    cfg.classes = 6;
    cfg.points = 32;
    cfg.k = 4;
    cfg.scales = {4, 4, 8, 8};
    cfg.dropout = 0.5;

    auto run = [&]() {
        GbnetModel<float> model;
        model.init(cfg, tc.seed);
        std::vector<Param<float>> params;
        model.collect(params);
        SgdMomentum<float> opt;
        opt.init(params, tc.momentum);
        EpochMetrics last{};
        for (std::int64_t e = 0; e < tc.epochs; ++e) last = train_epoch(model, data, tc, opt, e);
        auto snap = snapshot(model);
        return std::make_pair(snap, last);
    };

    auto [snap_a, metrics_a] = run();
    auto [snap_b, metrics_b] = run();
    REQUIRE(snap_a == snap_b);
    REQUIRE(metrics_a.loss == metrics_b.loss);
    REQUIRE(metrics_a.accuracy == metrics_b.accuracy);
    REQUIRE(metrics_a.lr == Approx(cosine_lr(tc.lr_max, tc.lr_min, 1, tc.epochs)));
}

TEST_CASE("toy two-class training strictly reduces the loss") {
    Dataset<float> data;
    data.class_names = {"sphere", "plane"};
    data.split = "train";
    Pcg32 root(53, rng_stream::kData);
    for (int i = 0; i < 8; ++i) {
        Pcg32 s = root.split(static_cast<std::uint64_t>(i));
        auto c = generate_synthetic(SynthClass::sphere, 32, 0.01f, s);
        c.label = 0;
        data.clouds.push_back(c);
        Pcg32 p = root.split(static_cast<std::uint64_t>(100 + i));
        auto d = generate_synthetic(SynthClass::plane, 32, 0.01f, p);
        d.label = 1;
        data.clouds.push_back(d);
    }

    ModelConfig cfg;
    cfg.classes = 2;
    cfg.points = 32;
    cfg.k = 4;
    cfg.scales = {4, 4, 8, 8};
    cfg.dropout = 0.0;
    GbnetModel<float> model;
    model.init(cfg, 59);

    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 16;  // full batch keeps the descent smooth
    tc.lr_max = 0.01;
    tc.lr_min = 0.001;
    tc.momentum = 0.5;
    tc.seed = 61;
    tc.augment = false;

    std::vector<Param<float>> params;
    model.collect(params);
    SgdMomentum<float> opt;
    opt.init(params, tc.momentum);

    double prev = 1e30;
    for (std::int64_t e = 0; e < tc.epochs; ++e) {
        const auto m = train_epoch(model, data, tc, opt, e);
        INFO("epoch " << e << " loss " << m.loss << " acc " << m.accuracy);
        REQUIRE(m.loss < prev);
        prev = m.loss;
    }

    REQUIRE_THROWS_AS(train_epoch(model, Dataset<float>{}, tc, opt, 0), ValueError);
}

TEST_CASE("evaluation statistics match hand-built confusion matrices") {
    auto perfect = eval_from_confusion({5, 0, 0, 0, 4, 0, 0, 0, 6}, 3);
    REQUIRE(perfect.overall == Approx(1.0));
    REQUIRE(perfect.avg_class == Approx(1.0));
    REQUIRE(perfect.macro_f1 == Approx(1.0));
    REQUIRE(perfect.at(2, 2) == 6);

    auto constant = eval_from_confusion({3, 0, 3, 0}, 2);
    REQUIRE(constant.overall == Approx(0.5));
    REQUIRE(constant.avg_class == Approx(0.5));
    REQUIRE(constant.f1[0] == Approx(2 * 0.5 * 1.0 / 1.5));  // precision 1/2, recall 1
    REQUIRE(constant.f1[1] == 0.0);                          // never predicted

    auto mixed = eval_from_confusion({5, 0, 0, 2, 2, 0, 0, 0, 6}, 3);
    REQUIRE(mixed.overall == Approx(13.0 / 15.0));
    REQUIRE(mixed.per_class[0] == Approx(1.0));
    REQUIRE(mixed.per_class[1] == Approx(0.5));
    REQUIRE(mixed.avg_class == Approx((1.0 + 0.5 + 1.0) / 3.0));
    REQUIRE(mixed.f1[0] == Approx(2 * (5.0 / 7.0) * 1.0 / (5.0 / 7.0 + 1.0)));
    REQUIRE(mixed.f1[1] == Approx(2 * 1.0 * 0.5 / 1.5));
    REQUIRE(mixed.f1[2] == Approx(1.0));
    REQUIRE(mixed.macro_f1 == Approx((mixed.f1[0] + mixed.f1[1] + mixed.f1[2]) / 3.0));

    REQUIRE_THROWS_AS(eval_from_confusion({0, 0, 0, 0}, 2), ValueError);
}

TEST_CASE("evaluate runs the model over a labeled set") {
    ModelConfig cfg;
    cfg.classes = 6;
    cfg.points = 32;
    cfg.k = 4;
    cfg.scales = {4, 4, 8, 8};
    GbnetModel<float> model;
    model.init(cfg, 67);

    auto data = make_synthetic_dataset("test", 2, 32, 0.02f, 71);
    auto r = evaluate(model, data, 5);
    REQUIRE(r.classes == 6);
    std::int64_t total = 0;
    for (auto v : r.confusion) total += v;
    REQUIRE(total == data.size());
    REQUIRE(r.overall >= 0.0);
    REQUIRE(r.overall <= 1.0);

    REQUIRE_THROWS_AS(evaluate(model, Dataset<float>{}, 4), ValueError);
}

TEST_CASE("checkpoint round-trips the full training state") {
    ModelConfig cfg;
    cfg.classes = 3;
    cfg.points = 16;
    cfg.k = 3;
    cfg.scales = {4, 8};
    cfg.dropout = 0.5;

    auto data = make_synthetic_dataset("train", 1, 16, 0.02f, 73);
    for (auto& c : data.clouds) c.label %= 3;

    GbnetModel<float> model;
    model.init(cfg, 79);
    std::vector<Param<float>> params;
    model.collect(params);
    SgdMomentum<float> opt;
    opt.init(params, 0.9);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 3;
    tc.seed = 83;
    train_epoch(model, data, tc, opt, 0);

    const auto path = temp_path("gbnet_ckpt.gbnc");
    checkpoint_save(model, path, &opt);

    auto peeked = checkpoint_peek_config(path);
    REQUIRE(peeked.classes == 3);
    REQUIRE(peeked.scales == cfg.scales);
    REQUIRE(peeked.dropout == 0.5);

    GbnetModel<float> loaded;
    loaded.init(cfg, 997);  // different seed: every parameter starts different
    SgdMomentum<float> opt2;
    checkpoint_load(loaded, path, &opt2);

    REQUIRE(snapshot(model) == snapshot(loaded));
    REQUIRE(opt2.momentum == opt.momentum);
    REQUIRE(opt2.velocity == opt.velocity);
    REQUIRE(loaded.dropout_rng.state() == model.dropout_rng.state());
    REQUIRE(loaded.dropout_rng.inc() == model.dropout_rng.inc());

    model.set_mode(Mode::eval);
    loaded.set_mode(Mode::eval);
    std::vector<PointCloud<float>> batch = {data.clouds[0], data.clouds[5]};
    auto a = gbnet_forward(model, batch);
    auto b = gbnet_forward(loaded, batch);
    REQUIRE(a.data() == b.data());
}

TEST_CASE("checkpoint loading rejects mismatches without touching the model") {
    ModelConfig cfg;
    cfg.classes = 3;
    cfg.points = 16;
    cfg.k = 3;
    cfg.scales = {4, 8};
    GbnetModel<float> model;
    model.init(cfg, 89);
    const auto path = temp_path("gbnet_ckpt2.gbnc");
    checkpoint_save(model, path);

    auto wrong_classes = cfg;
    wrong_classes.classes = 4;
    GbnetModel<float> other;
    other.init(wrong_classes, 89);
    REQUIRE_THROWS_WITH(checkpoint_load(other, path),
                        Catch::Matchers::ContainsSubstring("classes"));

    auto wrong_scales = cfg;
    wrong_scales.scales = {8, 8};
    GbnetModel<float> other2;
    other2.init(wrong_scales, 89);
    REQUIRE_THROWS_WITH(checkpoint_load(other2, path),
                        Catch::Matchers::ContainsSubstring("configuration"));

    GbnetModel<float> victim;
    victim.init(cfg, 91);
    const auto before = snapshot(victim);
    const auto truncated = temp_path("gbnet_ckpt_trunc.gbnc");
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes(std::istreambuf_iterator<char>(in), {});
        std::ofstream out(truncated, std::ios::binary);
        out << bytes.substr(0, bytes.size() - 9);
    }
    REQUIRE_THROWS_AS(checkpoint_load(victim, truncated), IoError);
    REQUIRE(snapshot(victim) == before);

    const auto bad = temp_path("gbnet_ckpt_bad.gbnc");
    {
        std::ofstream out(bad, std::ios::binary);
        out << "NOPE";
    }
    REQUIRE_THROWS_WITH(checkpoint_load(victim, bad), Catch::Matchers::ContainsSubstring("GBNC"));
}
