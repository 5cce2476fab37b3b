#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace {

struct Outcome {
    int code = -1;
    std::string out;
};

Outcome run(const std::string& args) {
    const std::string cmd = std::string(BATTN_CLI) + " " + args + " 2>/dev/null";
    Outcome o;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return o;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) o.out += buf.data();
    const int status = pclose(pipe);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
}

std::string cfg(const std::string& name) { return std::string(BATTN_CONFIG_DIR) + "/" + name; }

std::filesystem::path scratch(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("battn_cli_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::filesystem::path write_small_config(const std::filesystem::path& dir, double alpha) {
    const auto path = dir / "small.json";
    std::ofstream(path) << R"({"n": 8, "T": 4, "d": 60, "mu_norm": 10, "sigma_eps": 1.0, "eta": 0.2, "rho": 0.1,)"
                        << R"( "n_weak_same": 1, "alpha": )" << alpha << R"(, "steps": 20, "log_every": 5, "test_size": 20})";
    return path;
}

}  // namespace

TEST(Cli, ClassifyFigureConfigs) {
    Outcome a = run("classify --config " + cfg("harmful.json"));
    EXPECT_EQ(a.code, 0);
    EXPECT_EQ(a.out, "harmful\n");
    Outcome c = run("classify --config " + cfg("not_overfitting.json"));
    EXPECT_EQ(c.code, 0);
    EXPECT_EQ(c.out, "not-overfitting\n");
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
    const auto dir = scratch("bad");
    std::ofstream(dir / "bad.json") << R"({"n": 8, "T": 4, "d": 60, "eta": 0.9, "alpha": 0.1, "steps": 5})";
    EXPECT_EQ(run("run --config " + (dir / "bad.json").string()).code, 2);
    EXPECT_EQ(run("run --config " + (dir / "missing.json").string()).code, 2);
    EXPECT_EQ(run("check --suite '' --config " + write_small_config(dir, 0.1).string()).code, 2);
    EXPECT_EQ(run("check --suite nope --config " + write_small_config(dir, 0.1).string()).code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("run").code, 2);
}

TEST(Cli, GradientSuitePasses) {
    const auto dir = scratch("grad");
    const Outcome o = run("check --suite gradients --config " + write_small_config(dir, 0.1).string());
    EXPECT_EQ(o.code, 0);
    EXPECT_NE(o.out.find("gradients"), std::string::npos);
}

TEST(Cli, RunWritesArtifactsAndIsReproducible) {
    const auto dir = scratch("run");
    const auto config = write_small_config(dir, 0.1).string();
    ASSERT_EQ(run("run --config " + config + " --out-dir " + (dir / "a").string()).code, 0);
    ASSERT_EQ(run("run --config " + config + " --threads 3 --out-dir " + (dir / "b").string()).code, 0);
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    EXPECT_FALSE(slurp(dir / "a" / "trace.csv").empty());
    EXPECT_EQ(slurp(dir / "a" / "trace.csv"), slurp(dir / "b" / "trace.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "a" / "summary.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "a" / "config.json"));
}

TEST(Cli, DivergenceExitsThree) {
    const auto dir = scratch("div");
    EXPECT_EQ(run("run --config " + write_small_config(dir, 1e300).string() + " --out-dir " + dir.string()).code, 3);
}
