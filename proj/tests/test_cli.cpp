#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gbnet/checkpoint.hpp"

using namespace gbnet;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code;
    std::string out;

    bool contains(const std::string& needle) const { return out.find(needle) != std::string::npos; }
};

fs::path work_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("gbnet_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

CmdResult run_cli(const std::string& args, const fs::path& dir) {
    const auto capture = dir / "cmd_out.txt";
    const std::string cmd = "cd " + dir.string() + " && " + GBNET_CLI_PATH + " " + args + " > " +
                            capture.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CmdResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream in(capture);
    std::stringstream buf;
    buf << in.rdbuf();
    r.out = buf.str();
    return r;
}

const std::string kTiny =
    "--set points=32 --set k=4 --set scales=4,4,8,8 --set train_per_class=4 "
    "--set test_per_class=2 --set batch_size=8 ";

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.classes = 6;
    cfg.points = 16;
    cfg.k = 3;
    cfg.scales = {4, 8};
    return cfg;
}

void write_fresh_checkpoint(const fs::path& path, const ModelConfig& cfg) {
    GbnetModel<float> model;
    model.init(cfg, 21);
    checkpoint_save(model, path.string());
}

void write_single_cloud_pack(const fs::path& path, std::int64_t n_points) {
    Dataset<float> ds;
    Pcg32 rng(33);
    auto t = Tensor<float>::uninit({n_points, 3});
    for (auto& v : t.data()) v = static_cast<float>(rng.gaussian());
    ds.clouds.push_back({normalize_to_unit_sphere(t), 0});
    pack_write(ds, path.string());
}

}  // namespace

TEST_CASE("usage and config mistakes exit with code 1") {
    auto dir = work_dir("usage");
    REQUIRE(run_cli("", dir).exit_code == 1);
    REQUIRE(run_cli("no_such_command", dir).exit_code == 1);

    auto bad_key = run_cli("train --set nope=1", dir);
    REQUIRE(bad_key.exit_code == 1);
    REQUIRE(bad_key.contains("unknown config key 'nope'"));

    auto bad_value = run_cli("train --set epochs=soon", dir);
    REQUIRE(bad_value.exit_code == 1);
    REQUIRE(bad_value.contains("epochs"));

    REQUIRE(run_cli("eval", dir).exit_code == 1);  // --checkpoint is required
}

TEST_CASE("config file, overrides, and echo resolve in order") {
    auto dir = work_dir("config");
    {
        std::ofstream cfg(dir / "run.cfg");
        cfg << "# comment line\n";
        cfg << "epochs = 3\n";
        cfg << "k = 5   # trailing comment\n";
    }
    auto r = run_cli("gradcheck --target mlp --config run.cfg --set epochs=1", dir);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.contains("# resolved config"));
    REQUIRE(r.contains("epochs = 1"));  // override beats the file
    REQUIRE(r.contains("k = 5"));       // file beats the default

    auto bad = run_cli("gradcheck --config missing.cfg", dir);
    REQUIRE(bad.exit_code == 1);

    {
        std::ofstream cfg(dir / "broken.cfg");
        cfg << "epochs\n";
    }
    auto broken = run_cli("gradcheck --config broken.cfg", dir);
    REQUIRE(broken.exit_code == 1);
    REQUIRE(broken.contains("broken.cfg:1"));
}

TEST_CASE("gradcheck passes, filters targets, and fails on an injected fault") {
    auto dir = work_dir("gradcheck");
    auto all = run_cli("gradcheck", dir);
    REQUIRE(all.exit_code == 0);
    int targets = 0;
    for (const auto& line : lines_of(all.out))
        if (line.rfind("target=", 0) == 0) {
            ++targets;
            REQUIRE(line.find("status=PASS") != std::string::npos);
        }
    REQUIRE(targets == 7);

    auto only_caa = run_cli("gradcheck --target caa", dir);
    REQUIRE(only_caa.exit_code == 0);
    int caa_lines = 0;
    for (const auto& line : lines_of(only_caa.out))
        if (line.rfind("target=", 0) == 0) ++caa_lines;
    REQUIRE(caa_lines == 1);
    REQUIRE(only_caa.contains("target=caa"));

    auto fault = run_cli("gradcheck --target mlp --inject-fault", dir);
    REQUIRE(fault.exit_code == 3);
    REQUIRE(fault.contains("status=FAIL"));

    REQUIRE(run_cli("gradcheck --target zzz", dir).exit_code == 1);
}

TEST_CASE("describe emits the named descriptor columns") {
    auto dir = work_dir("describe");
    {
        Dataset<float> ds;
        ds.clouds.push_back(
            {Tensor<float>::from({0, 0, 0, 1, 0, 0, 0, 1, 0}, {3, 3}), -1});
        pack_write(ds, (dir / "tri.gbpc").string());
    }

    auto r6 = run_cli("describe --input tri.gbpc --form 6 --output tri6.csv", dir);
    REQUIRE(r6.exit_code == 0);
    const auto csv = lines_of(read_file(dir / "tri6.csv"));
    REQUIRE(csv.size() == 4);
    REQUIRE(csv[0] == "index,x,y,z,nx,ny,nz,e1x,e1y,e1z,e2x,e2y,e2z,len1,len2");
    // origin corner of the right triangle: unit edges along x and y, normal +z
    REQUIRE(csv[1] == "0,0,0,0,0,0,1,1,0,0,0,1,0,1,1");

    auto r1 = run_cli("describe --input tri.gbpc --form 1 --output tri1.csv", dir);
    REQUIRE(r1.exit_code == 0);
    REQUIRE(lines_of(read_file(dir / "tri1.csv"))[0] == "index,x,y,z");

    {
        Dataset<float> two;
        two.clouds.push_back({Tensor<float>::from({0, 0, 0, 1, 0, 0}, {2, 3}), -1});
        pack_write(two, (dir / "two.gbpc").string());
    }
    auto too_small = run_cli("describe --input two.gbpc --output nope.csv", dir);
    REQUIRE(too_small.exit_code == 2);
    REQUIRE(too_small.contains("at least 3 points"));
    REQUIRE_FALSE(fs::exists(dir / "nope.csv"));

    {
        std::ofstream bad(dir / "bad.gbpc", std::ios::binary);
        bad << "not a pack at all";
    }
    auto malformed = run_cli("describe --input bad.gbpc --output nope.csv", dir);
    REQUIRE(malformed.exit_code == 2);
    REQUIRE_FALSE(fs::exists(dir / "nope.csv"));
}

TEST_CASE("train writes metrics and checkpoints deterministically") {
    auto dir = work_dir("train");
    const std::string invocation = "train " + kTiny + "--set epochs=2 --set out_dir=";

    auto a = run_cli(invocation + "run_a", dir);
    REQUIRE(a.exit_code == 0);
    REQUIRE(a.contains("epochs = 2"));
    REQUIRE(fs::exists(dir / "run_a/metrics.txt"));
    REQUIRE(fs::exists(dir / "run_a/best.gbnc"));
    REQUIRE(fs::exists(dir / "run_a/final.gbnc"));
    REQUIRE(fs::exists(dir / "run_a/confusion.txt"));

    const auto metrics = lines_of(read_file(dir / "run_a/metrics.txt"));
    REQUIRE(metrics.size() == 2);
    REQUIRE(metrics[0].rfind("epoch=0 ", 0) == 0);
    REQUIRE(metrics[0].find("train_loss=") != std::string::npos);
    REQUIRE(metrics[0].find("eval_overall=") != std::string::npos);

    auto b = run_cli(invocation + "run_b", dir);
    REQUIRE(b.exit_code == 0);
    REQUIRE(read_file(dir / "run_a/metrics.txt") == read_file(dir / "run_b/metrics.txt"));
}

TEST_CASE("eval prints accuracy, F1, and the confusion matrix") {
    auto dir = work_dir("eval");
    REQUIRE(run_cli("train " + kTiny + "--set epochs=1 --set out_dir=run", dir).exit_code == 0);

    auto r = run_cli("eval --checkpoint run/final.gbnc " + kTiny, dir);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.contains("overall accuracy:"));
    REQUIRE(r.contains("avg class accuracy:"));
    REQUIRE(r.contains("macro F1:"));
    REQUIRE(r.contains("F1="));
    REQUIRE(r.contains("confusion matrix"));
    REQUIRE(r.contains("sphere"));

    auto missing = run_cli("eval --checkpoint nowhere.gbnc", dir);
    REQUIRE(missing.exit_code == 2);
}

TEST_CASE("features shows identical norms through a zero attention gate") {
    auto dir = work_dir("features");
    const auto cfg = tiny_model_config();
    write_fresh_checkpoint(dir / "fresh.gbnc", cfg);
    write_single_cloud_pack(dir / "one.gbpc", cfg.points);

    auto r = run_cli("features --checkpoint fresh.gbnc --input one.gbpc --output f.csv", dir);
    REQUIRE(r.exit_code == 0);
    const auto csv = lines_of(read_file(dir / "f.csv"));
    REQUIRE(csv[0] == "layer,branch,norm");
    // 2 blocks x 2 branches + fuse pre/post, one row per point
    REQUIRE(csv.size() == 1 + 6 * static_cast<std::size_t>(cfg.points));

    std::vector<std::string> pre, post;
    for (const auto& line : csv)
        if (line.rfind("fuse,pre_caa,", 0) == 0)
            pre.push_back(line.substr(line.rfind(',') + 1));
        else if (line.rfind("fuse,post_caa,", 0) == 0)
            post.push_back(line.substr(line.rfind(',') + 1));
    REQUIRE(pre.size() == static_cast<std::size_t>(cfg.points));
    REQUIRE(pre == post);  // alpha starts at zero, the attention is an identity

    for (const auto& line : csv)
        if (line.rfind("block", 0) == 0) {
            const double v = std::stod(line.substr(line.rfind(',') + 1));
            REQUIRE(v >= 0.0);
            REQUIRE(std::isfinite(v));
        }
}

TEST_CASE("bench reports the exact parameter count") {
    auto dir = work_dir("bench");
    const auto cfg = tiny_model_config();
    write_fresh_checkpoint(dir / "fresh.gbnc", cfg);

    GbnetModel<float> twin;
    twin.init(cfg, 99);
    std::vector<Param<float>> params;
    twin.collect(params);
    std::int64_t expected = 0;
    for (const auto& p : params) expected += p.tensor.numel();

    auto r = run_cli("bench --checkpoint fresh.gbnc --repeats 3", dir);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.contains("parameters: " + std::to_string(expected)));
    REQUIRE(r.contains("checkpoint bytes: " +
                       std::to_string(fs::file_size(dir / "fresh.gbnc"))));
    REQUIRE(r.contains("median"));
}

TEST_CASE("pack samples meshes into normalized clouds") {
    auto dir = work_dir("pack");
    {
        std::ofstream off(dir / "tetra.off");
        off << "OFF\n4 4 0\n";
        off << "0 0 0\n2 0 0\n0 2 0\n0 0 2\n";
        off << "3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
    }
    auto r = run_cli("pack --off tetra.off --set points=32 --output mesh.gbpc", dir);
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.contains("wrote 1 clouds"));

    const auto ds = pack_read((dir / "mesh.gbpc").string());
    REQUIRE(ds.size() == 1);
    REQUIRE(ds.clouds[0].points.shape() == Shape{32, 3});
    double max_norm = 0;
    const auto& d = ds.clouds[0].points.data();
    for (std::int64_t i = 0; i < 32; ++i) {
        double sq = 0;
        for (int c = 0; c < 3; ++c) sq += double(d[i * 3 + c]) * d[i * 3 + c];
        max_norm = std::max(max_norm, std::sqrt(sq));
    }
    REQUIRE(max_norm == Catch::Approx(1.0).margin(1e-5));

    auto synth = run_cli("pack --set points=32 --set test_per_class=1 --output s.gbpc", dir);
    REQUIRE(synth.exit_code == 0);
    REQUIRE(pack_read((dir / "s.gbpc").string()).size() == 6);
}
