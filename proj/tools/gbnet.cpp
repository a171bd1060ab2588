#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "gbnet/checkpoint.hpp"
#include "gbnet/config.hpp"
#include "gbnet/gradcheck.hpp"

namespace {

using namespace gbnet;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

RunSettings resolve(const CommonArgs& c) {
    RunSettings s;
    if (!c.config_path.empty()) config_load_file(s, c.config_path);
    for (const auto& o : c.overrides) config_apply_override(s, o);
    return s;
}

void echo(const RunSettings& s) {
    std::cout << "# resolved config\n";
    for (const auto& [k, v] : config_items(s)) std::cout << k << " = " << v << "\n";
    std::cout << std::flush;
}

Dataset<float> load_split(const RunSettings& s, const std::string& split) {
    if (s.dataset == "synthetic6") {
        const auto per = split == "train" ? s.train_per_class : s.test_per_class;
        return make_synthetic_dataset(split, per, s.model.points,
                                      static_cast<float>(s.jitter), s.train.seed);
    }
    if (s.dataset == "pack") {
        const auto& path = split == "train" ? s.train_pack : s.eval_pack;
        if (path.empty())
            throw ConfigError("dataset=pack requires " +
                              std::string(split == "train" ? "train_pack" : "eval_pack"));
        auto ds = pack_read(path);
        ds.split = split;
        return ds;
    }
    throw ConfigError("unknown dataset '" + s.dataset + "' (expected synthetic6 or pack)");
}

std::string class_name(const Dataset<float>& ds, std::int64_t i) {
    if (i >= 0 && i < static_cast<std::int64_t>(ds.class_names.size()))
        return ds.class_names[static_cast<std::size_t>(i)];
    return "class" + std::to_string(i);
}

void print_confusion(std::ostream& out, const EvalResult& r, const Dataset<float>& ds) {
    out << "confusion matrix (rows = true class, cols = predicted):\n";
    for (std::int64_t t = 0; t < r.classes; ++t) {
        out << std::setw(10) << class_name(ds, t) << " |";
        for (std::int64_t p = 0; p < r.classes; ++p) out << std::setw(7) << r.at(t, p);
        out << "\n";
    }
}

PointCloud<float> bench_cloud(std::int64_t n) {
    Pcg32 rng(1234);
    auto t = Tensor<float>::uninit({n, 3});
    for (auto& v : t.data()) v = static_cast<float>(rng.gaussian());
    return {normalize_to_unit_sphere(t), 0};
}

int cmd_train(const CommonArgs& common) {
    auto s = resolve(common);
    echo(s);
    std::filesystem::create_directories(s.out_dir);

    auto train_set = load_split(s, "train");
    const bool has_eval = s.dataset != "pack" || !s.eval_pack.empty();
    Dataset<float> eval_set;
    if (has_eval) eval_set = load_split(s, "test");

    GbnetModel<float> model;
    model.init(s.model, s.train.seed);
    std::vector<Param<float>> params;
    model.collect(params);
    std::int64_t n_params = 0;
    for (const auto& p : params) n_params += p.tensor.numel();
    std::cout << "parameters: " << n_params << "\n";

    SgdMomentum<float> opt;
    opt.init(params, s.train.momentum);

    const auto log_path = s.out_dir + "/metrics.txt";
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot write " + log_path);

    double best = -1.0;
    EvalResult last_eval;
    for (std::int64_t e = 0; e < s.train.epochs; ++e) {
        const auto m = train_epoch(model, train_set, s.train, opt, e);
        std::ostringstream line;
        line << "epoch=" << e << " lr=" << m.lr << " train_loss=" << m.loss
             << " train_acc=" << m.accuracy;
        if (has_eval) {
            last_eval = evaluate(model, eval_set, s.train.batch_size);
            line << " eval_overall=" << last_eval.overall
                 << " eval_avg_class=" << last_eval.avg_class;
            if (last_eval.overall > best) {
                best = last_eval.overall;
                checkpoint_save(model, s.out_dir + "/best.gbnc", &opt);
                line << " best=1";
            }
        }
        log << line.str() << "\n";
        std::cout << line.str() << std::endl;
    }
    checkpoint_save(model, s.out_dir + "/final.gbnc", &opt);
    if (has_eval) {
        print_confusion(std::cout, last_eval, eval_set);
        std::ofstream conf(s.out_dir + "/confusion.txt");
        print_confusion(conf, last_eval, eval_set);
    }
    std::cout << "artifacts written to " << s.out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& ckpt) {
    auto s = resolve(common);
    echo(s);
    const auto cfg = checkpoint_peek_config(ckpt);
    GbnetModel<float> model;
    model.init(cfg, 1);
    checkpoint_load(model, ckpt);

    s.model = cfg;  // the checkpoint dictates the model; config picks the data
    auto data = load_split(s, "test");
    const auto r = evaluate(model, data, s.train.batch_size);

    std::cout << std::fixed << std::setprecision(4);
    std::cout << "overall accuracy:   " << r.overall << "\n";
    std::cout << "avg class accuracy: " << r.avg_class << "\n";
    std::cout << "macro F1:           " << r.macro_f1 << "\n";
    for (std::int64_t c = 0; c < r.classes; ++c)
        std::cout << std::setw(10) << class_name(data, c)
                  << "  acc=" << r.per_class[static_cast<std::size_t>(c)]
                  << "  F1=" << r.f1[static_cast<std::size_t>(c)] << "\n";
    std::cout.unsetf(std::ios::fixed);
    print_confusion(std::cout, r, data);
    return 0;
}

template <typename S>
Tensor<S> random_tensor(Shape shape, Pcg32& rng, bool requires_grad) {
    auto t = Tensor<S>::uninit(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(rng.gaussian());
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

// Test hook: an identity whose backward is off by 1%, to prove the checker
// actually fails when a gradient is wrong.
Tensor<double> skewed_identity(const Tensor<double>& x) {
    auto out = Tensor<double>::from(x.data(), x.shape());
    gbnet::detail::maybe_record<double>("skewed_identity", out, tracing(x), [=]() {
        if (!x.requires_grad()) return;
        const auto& go = out.node()->grad;
        auto& gx = x.node()->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 1.01 * go[i];
    });
    return out;
}

int cmd_gradcheck(const CommonArgs& common, const std::string& target, bool inject_fault) {
    auto s = resolve(common);
    echo(s);

    struct CheckSpec {
        std::string name;
        double tol;
        std::function<GradCheckResult<double>(bool)> run;
    };

    auto loss_of = [](Tensor<double> y, bool fault) {
        auto l = sum_all(mul(y, y));
        return fault ? skewed_identity(l) : l;
    };

    std::vector<CheckSpec> specs;

    specs.push_back({"mlp", 1e-4, [&](bool fault) {
        Pcg32 rng(1);
        MlpLayer<double> layer;
        layer.init(5, 7, rng);
        auto x = random_tensor<double>({6, 5}, rng, true);
        std::vector<Param<double>> ps;
        layer.collect(ps, "l");
        std::vector<Tensor<double>> inputs = {x};
        for (auto& p : ps) inputs.push_back(p.tensor);
        return grad_check<double>([&]() { return loss_of(mlp_forward(layer, x), fault); },
                                  inputs);
    }});

    specs.push_back({"lfc", 1e-4, [&](bool fault) {
        Pcg32 rng(2);
        LfcLayer<double> layer;
        layer.init(4, 3, 3, rng);
        auto x = random_tensor<double>({5, 3, 4}, rng, true);
        std::vector<Param<double>> ps;
        layer.collect(ps, "l");
        std::vector<Tensor<double>> inputs = {x};
        for (auto& p : ps) inputs.push_back(p.tensor);
        return grad_check<double>([&]() { return loss_of(lfc_forward(layer, x), fault); },
                                  inputs);
    }});

    specs.push_back({"bn", 1e-4, [&](bool fault) {
        Pcg32 rng(3);
        BatchNormState<double> bn;
        bn.init(4);
        auto x = random_tensor<double>({6, 4}, rng, true);
        std::vector<Tensor<double>> inputs = {x, bn.gamma, bn.beta};
        return grad_check<double>([&]() { return loss_of(batchnorm_forward(bn, x), fault); },
                                  inputs);
    }});

    specs.push_back({"edge", 1e-4, [&](bool fault) {
        Pcg32 rng(4);
        MlpLayer<double> layer;
        layer.init(6, 4, rng);
        auto cloud = random_tensor<double>({7, 3}, rng, true);
        const auto nbr = knn_search(cloud, 2);
        std::vector<Param<double>> ps;
        layer.collect(ps, "l");
        std::vector<Tensor<double>> inputs = {cloud};
        for (auto& p : ps) inputs.push_back(p.tensor);
        return grad_check<double>(
            [&]() { return loss_of(edgeconv_forward(layer, cloud, nbr), fault); }, inputs);
    }});

    specs.push_back({"caa", 1e-4, [&](bool fault) {
        Pcg32 rng(5);
        CaaLayer<double> layer;
        layer.init(6, 2, rng);
        layer.set_mode(Mode::train);
        layer.alpha.data()[0] = 0.3;
        auto f = random_tensor<double>({6, 4}, rng, true);
        std::vector<Param<double>> ps;
        layer.collect(ps, "l");
        std::vector<Tensor<double>> inputs = {f};
        for (auto& p : ps) inputs.push_back(p.tensor);
        return grad_check<double>([&]() { return loss_of(caa_forward(layer, f), fault); },
                                  inputs);
    }});

    specs.push_back({"abem", 1e-4, [&](bool fault) {
        Pcg32 rng(6);
        AbemLayer<double> layer;
        layer.init(3, 4, 2, 8, 2, true, true, rng);
        layer.set_mode(Mode::train);
        layer.attn_prom.alpha.data()[0] = 0.3;
        layer.attn_fine.alpha.data()[0] = -0.2;
        auto cloud = random_tensor<double>({8, 3}, rng, true);
        const auto nbr = knn_search(cloud, 2);
        std::vector<Param<double>> ps;
        layer.collect(ps, "l");
        std::vector<Tensor<double>> inputs = {cloud};
        for (auto& p : ps) inputs.push_back(p.tensor);
        return grad_check<double>(
            [&]() { return loss_of(abem_forward(layer, cloud, nbr).out, fault); }, inputs);
    }});

    specs.push_back({"model", 1e-3, [&](bool fault) {
        ModelConfig cfg;
        cfg.classes = 3;
        cfg.points = 12;
        cfg.k = 3;
        cfg.scales = {4, 4, 8, 16};
        cfg.dropout = 0.0;
        GbnetModel<double> model;
        model.init(cfg, 37);
        model.set_mode(Mode::train);
        Pcg32 rng(41);
        std::vector<PointCloud<double>> batch;
        for (int i = 0; i < 2; ++i) {
            auto t = Tensor<double>::uninit({12, 3});
            for (auto& v : t.data()) v = rng.gaussian();
            batch.push_back({normalize_to_unit_sphere(t), i});
        }
        const std::vector<std::int64_t> labels = {0, 2};
        // representative tensors across the depth, not the full parameter set
        std::vector<Tensor<double>> inputs = {
            model.blocks[0].edge_mlp.weight, model.blocks[1].back_proj.weight,
            model.blocks[2].attn_prom.alpha, model.blocks[3].attn_fine.alpha,
            model.fuse.bias,                 model.fc_out.bias,
        };
        // wider step: the network is deep, so a tiny h drowns in cancellation
        return grad_check<double>(
            [&]() {
                auto l = cross_entropy_mean(gbnet_forward(model, batch), labels);
                return fault ? skewed_identity(l) : l;
            },
            inputs, 1e-4);
    }});

    bool all_ok = true;
    bool any_ran = false;
    for (const auto& spec : specs) {
        if (!target.empty() && spec.name.find(target) == std::string::npos) continue;
        any_ran = true;
        const auto res = spec.run(inject_fault);
        const bool ok = res.ok(spec.tol);
        all_ok = all_ok && ok;
        std::cout << "target=" << spec.name << " max_rel_err=" << std::scientific
                  << std::setprecision(3) << res.max_rel_err << std::defaultfloat
                  << " checked=" << res.checked << " skipped=" << res.skipped
                  << " tol=" << spec.tol << " status=" << (ok ? "PASS" : "FAIL") << std::endl;
    }
    if (!any_ran) throw ConfigError("gradcheck: no target matches '" + target + "'");
    return all_ok ? 0 : 3;
}

void write_csv(const std::string& output, const std::string& body) {
    if (output.empty() || output == "-") {
        std::cout << body;
        return;
    }
    std::ofstream out(output);
    if (!out) throw IoError("cannot write " + output);
    out << body;
}

int cmd_describe(const CommonArgs& common, const std::string& input, int form,
                 std::int64_t index, const std::string& output) {
    auto s = resolve(common);
    echo(s);
    if (form == 0) form = s.model.descriptor_form;

    const auto ds = pack_read(input);
    if (index < 0 || index >= ds.size())
        throw ValueError("describe: cloud index " + std::to_string(index) + " outside [0, " +
                         std::to_string(ds.size()) + ")");
    const auto& cloud = ds.clouds[static_cast<std::size_t>(index)];
    const auto desc = geometric_descriptor(cloud.points, form);
    const auto names = descriptor_column_names(form);

    std::ostringstream csv;
    csv << std::setprecision(9);
    csv << "index";
    for (const auto& n : names) csv << "," << n;
    csv << "\n";
    const std::int64_t m = desc.dim(1);
    for (std::int64_t i = 0; i < desc.dim(0); ++i) {
        csv << i;
        for (std::int64_t j = 0; j < m; ++j)
            csv << "," << desc.data()[static_cast<std::size_t>(i * m + j)];
        csv << "\n";
    }
    write_csv(output, csv.str());
    return 0;
}

int cmd_features(const CommonArgs& common, const std::string& ckpt, const std::string& input,
                 std::int64_t index, const std::string& output) {
    auto s = resolve(common);
    echo(s);
    const auto cfg = checkpoint_peek_config(ckpt);
    GbnetModel<float> model;
    model.init(cfg, 1);
    checkpoint_load(model, ckpt);
    model.set_mode(Mode::eval);

    const auto ds = pack_read(input);
    if (index < 0 || index >= ds.size())
        throw ValueError("features: cloud index " + std::to_string(index) + " outside [0, " +
                         std::to_string(ds.size()) + ")");

    ForwardTrace<float> trace;
    gbnet_forward(model, {ds.clouds[static_cast<std::size_t>(index)]}, &trace);

    std::ostringstream csv;
    csv << std::setprecision(9);
    csv << "layer,branch,norm\n";
    auto emit = [&](const std::string& layer, const std::string& branch, const Tensor<float>& t) {
        const std::int64_t rows = t.dim(0), cols = t.dim(1);
        for (std::int64_t i = 0; i < rows; ++i) {
            double sq = 0;
            for (std::int64_t j = 0; j < cols; ++j) {
                const double v = t.data()[static_cast<std::size_t>(i * cols + j)];
                sq += v * v;
            }
            csv << layer << "," << branch << "," << std::sqrt(sq) << "\n";
        }
    };
    for (std::size_t i = 0; i < trace.blocks.size(); ++i) {
        const auto layer = "block" + std::to_string(i + 1);
        emit(layer, "prominent", trace.blocks[i].prominent);
        if (trace.blocks[i].fine.valid()) emit(layer, "fine", trace.blocks[i].fine);
    }
    emit("fuse", "pre_caa", trace.fused_pre);
    emit("fuse", "post_caa", trace.fused_post);
    write_csv(output, csv.str());
    return 0;
}

int cmd_pack(const CommonArgs& common, const std::vector<std::string>& off_paths,
             const std::string& split, const std::string& out_path) {
    auto s = resolve(common);
    echo(s);
    Dataset<float> ds;
    if (!off_paths.empty()) {
        ds.split = "off";
        Pcg32 rng(s.train.seed, rng_stream::kData);
        for (const auto& path : off_paths) {
            const auto mesh = load_off(path);
            auto cloud = sample_mesh_surface(mesh, s.model.points, rng);
            cloud.points = normalize_to_unit_sphere(cloud.points);
            ds.clouds.push_back(std::move(cloud));
        }
    } else {
        ds = load_split(s, split);
    }
    pack_write(ds, out_path);
    std::cout << "wrote " << ds.size() << " clouds to " << out_path << "\n";
    return 0;
}

int cmd_bench(const CommonArgs& common, const std::string& ckpt, int repeats) {
    auto s = resolve(common);
    echo(s);
    const auto cfg = checkpoint_peek_config(ckpt);
    GbnetModel<float> model;
    model.init(cfg, 1);
    checkpoint_load(model, ckpt);
    model.set_mode(Mode::eval);

    std::vector<Param<float>> params;
    model.collect(params);
    std::int64_t n_params = 0;
    for (const auto& p : params) n_params += p.tensor.numel();

    std::vector<PointCloud<float>> one = {bench_cloud(cfg.points)};
    for (int i = 0; i < 2; ++i) gbnet_forward(model, one);  // warmup

    std::vector<double> ms(static_cast<std::size_t>(repeats), 0.0);
    for (auto& t : ms) {
        const auto start = std::chrono::steady_clock::now();
        gbnet_forward(model, one);
        const auto stop = std::chrono::steady_clock::now();
        t = std::chrono::duration<double, std::milli>(stop - start).count();
    }
    std::sort(ms.begin(), ms.end());
    double mean = 0;
    for (double t : ms) mean += t;
    mean /= static_cast<double>(ms.size());
    const double median = ms.size() % 2 ? ms[ms.size() / 2]
                                        : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);

    std::cout << "parameters: " << n_params << "\n";
    std::cout << "checkpoint bytes: " << std::filesystem::file_size(ckpt) << "\n";
    std::cout << "single-cloud forward over " << repeats << " repeats: mean " << std::fixed
              << std::setprecision(3) << mean << " ms, median " << median << " ms\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geometric back-projection network toolkit"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string ckpt, input, output, target;
    std::int64_t index = 0;
    int form = 0;
    int repeats = 20;
    bool inject_fault = false;
    int rc = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_path, "key=value config file");
        cmd->add_option("--set", common.overrides, "override, e.g. --set epochs=1");
    };

    auto* train = app.add_subcommand("train", "train on the configured dataset");
    add_common(train);
    train->callback([&]() { rc = cmd_train(common); });

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    eval->callback([&]() { rc = cmd_eval(common, ckpt); });

    auto* gradcheck = app.add_subcommand("gradcheck", "compare gradients to finite differences");
    add_common(gradcheck);
    gradcheck->add_option("--target", target, "only run targets whose name contains this");
    gradcheck->add_flag("--inject-fault", inject_fault,
                        "corrupt a backward on purpose (harness sanity check)");
    gradcheck->callback([&]() { rc = cmd_gradcheck(common, target, inject_fault); });

    auto* describe = app.add_subcommand("describe", "dump per-point descriptors as CSV");
    add_common(describe);
    describe->add_option("--input", input, "GBPC pack file")->required();
    describe->add_option("--form", form, "descriptor form 1..8 (default: from config)");
    describe->add_option("--index", index, "cloud index inside the pack");
    describe->add_option("--output", output, "CSV path (default: stdout)");
    describe->callback([&]() { rc = cmd_describe(common, input, form, index, output); });

    auto* features = app.add_subcommand("features", "dump per-point branch feature norms as CSV");
    add_common(features);
    features->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    features->add_option("--input", input, "GBPC pack file")->required();
    features->add_option("--index", index, "cloud index inside the pack");
    features->add_option("--output", output, "CSV path (default: stdout)");
    features->callback([&]() { rc = cmd_features(common, ckpt, input, index, output); });

    std::vector<std::string> off_paths;
    std::string pack_split = "test";
    auto* pack = app.add_subcommand("pack", "sample meshes or synthetic shapes into a GBPC pack");
    add_common(pack);
    pack->add_option("--off", off_paths, "OFF mesh files (sampled and normalized)");
    pack->add_option("--split", pack_split, "synthetic split when no meshes given");
    pack->add_option("--output", output, "pack path")->required();
    pack->callback([&]() { rc = cmd_pack(common, off_paths, pack_split, output); });

    auto* bench = app.add_subcommand("bench", "parameter count and inference latency");
    add_common(bench);
    bench->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    bench->add_option("--repeats", repeats, "timed repeats after warmup");
    bench->callback([&]() { rc = cmd_bench(common, ckpt, repeats); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
