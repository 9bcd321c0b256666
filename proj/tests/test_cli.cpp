#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "particleformer/cli.hpp"
#include "particleformer/config.hpp"
#include "particleformer/trajectory_io.hpp"

using namespace pf;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"particleformer"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main((int)argv.size(), argv.data());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_test_tmp") / name) {
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all("cli_test_tmp", ec);
    }
    std::string operator/(const std::string& p) const { return (path / p).string(); }
};

void write_tiny_config(const std::string& path) {
    std::ofstream f(path);
    f << "# desk-scale test configuration\n"
         "model.token_dim = 16\n"
         "model.enc_layers = 2\n"
         "model.dec_layers = 2\n"
         "model.enc_heads = 2\n"
         "model.dec_heads = 2\n"
         "model.enc_rotary = 6\n"
         "model.dec_rotary = 6\n"
         "model.ffn_hidden = 24\n"
         "model.lattice_res = 3\n"
         "model.branch_s = 6\n"
         "model.branch_t = 6\n"
         "model.branch_b = 6\n"
         "model.head_hidden = 12\n"
         "model.spatial_radius = 0.3\n"
         "train.window = 2\n"
         "train.epochs = 2\n"
         "train.lr = 0.001\n"
         "train.warmup_steps = 2\n"
         "train.seed = 5\n";
}

}  // namespace

TEST_CASE("cli: generate -> train -> rollout -> eval pipeline") {
    TempDir dir("pipeline");
    std::string data = dir / "data";
    REQUIRE(run_cli({"generate", "--scenario", "ballistic", "--out", data, "--seed", "3", "--count", "6",
                     "--particles", "8", "--frames", "8"}) == 0);
    REQUIRE(fs::exists(data + "/manifest.txt"));

    std::string cfg = dir / "model.cfg";
    write_tiny_config(cfg);
    std::string ckpt = dir / "model.ckpt";
    std::string csv = dir / "curve.csv";
    REQUIRE(run_cli({"train", "--data", data, "--config", cfg, "--out", ckpt, "--csv", csv}) == 0);
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(ckpt + ".config"));
    REQUIRE(fs::exists(csv));

    std::string init = data + "/ballistic_5.wpt";  // the test-split sequence
    std::string pred = dir / "pred.wpt";
    REQUIRE(run_cli({"rollout", "--ckpt", ckpt, "--init", init, "--steps", "4", "--out", pred}) == 0);
    Trajectory out = load_trajectory(pred);
    CHECK(out.frame_count() == 4);

    std::string report = dir / "report.txt";
    REQUIRE(run_cli({"eval", "--pred", pred, "--ref", init, "--ref-offset", "1", "--out", report}) == 0);
    KeyValueConfig rep = KeyValueConfig::parse_file(report);
    CHECK(rep.get_double("position_mse", -1) >= 0.0);
    CHECK(rep.get_double("velocity_mse", -1) >= 0.0);
}

TEST_CASE("cli: eval of a trajectory against itself reports zeros") {
    TempDir dir("selfeval");
    std::string data = dir / "data";
    REQUIRE(run_cli({"generate", "--scenario", "floor", "--out", data, "--seed", "4", "--count", "1",
                     "--particles", "6", "--frames", "5"}) == 0);
    std::string traj = data + "/floor_0.wpt";
    std::string report = dir / "report.txt";
    REQUIRE(run_cli({"eval", "--pred", traj, "--ref", traj, "--out", report}) == 0);
    KeyValueConfig rep = KeyValueConfig::parse_file(report);
    CHECK(rep.get_double("position_mse", -1) == 0.0);
    CHECK(rep.get_double("velocity_mse", -1) == 0.0);
}

TEST_CASE("cli: rollout with a fixed seed is byte-identical across runs and thread counts") {
    TempDir dir("determinism");
    std::string data = dir / "data";
    REQUIRE(run_cli({"generate", "--scenario", "floor", "--out", data, "--seed", "9", "--count", "3",
                     "--particles", "10", "--frames", "8"}) == 0);
    std::string cfg = dir / "model.cfg";
    write_tiny_config(cfg);
    std::string ckpt = dir / "model.ckpt";
    REQUIRE(run_cli({"train", "--data", data, "--config", cfg, "--out", ckpt}) == 0);

    std::string init = data + "/floor_0.wpt";
    auto bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    std::string p1 = dir / "p1.wpt", p2 = dir / "p2.wpt";
    REQUIRE(run_cli({"--threads", "1", "rollout", "--ckpt", ckpt, "--init", init, "--steps", "5", "--out",
                     p1}) == 0);
    REQUIRE(run_cli({"--threads", "8", "rollout", "--ckpt", ckpt, "--init", init, "--steps", "5", "--out",
                     p2}) == 0);
    CHECK(bytes(p1) == bytes(p2));
}

TEST_CASE("cli: config dump round-trips") {
    TempDir dir("dump");
    std::string cfg = dir / "model.cfg";
    write_tiny_config(cfg);
    KeyValueConfig parsed = KeyValueConfig::parse_file(cfg);
    KeyValueConfig reparsed = KeyValueConfig::parse_string(parsed.dump());
    CHECK(parsed == reparsed);
}

TEST_CASE("cli: exit codes") {
    SUBCASE("usage error is 2") {
        CHECK(run_cli({"rollout", "--nonsense"}) == 2);
        CHECK(run_cli({"generate", "--scenario", "warp", "--out", "x"}) == 2);
    }
    SUBCASE("validation failure is 4") {
        CHECK(run_cli({"eval", "--pred", "missing_a.wpt", "--ref", "missing_b.wpt"}) == 4);
    }
    SUBCASE("count-params --paper-head succeeds") {
        CHECK(run_cli({"count-params", "--paper-head"}) == 0);
    }
}
