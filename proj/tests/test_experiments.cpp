#include "benign_attention/experiments.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace battn;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.data.n = 10;
    c.data.T = 4;
    c.data.d = 120;
    c.data.mu_norm = 12.0;
    c.train.steps = 40;
    c.train.log_every = 10;
    c.train.test_size = 30;
    c.seed = 5;
    return c;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST(ExperimentConfig, RoundTripsThroughJson) {
    const ExperimentConfig a = load_config(std::string(BATTN_CONFIG_DIR) + "/benign.json");
    const Json j = a.to_json();
    const ExperimentConfig b = ExperimentConfig::from_json(j);
    EXPECT_EQ(b.to_json(), j);
    EXPECT_EQ(b.data, a.data);
    EXPECT_EQ(b.train, a.train);
    EXPECT_EQ(a.data.d, 2000);
}

TEST(ExperimentConfig, ErrorsNameTheField) {
    Json j = small_config().to_json();
    j["bogus"] = 1;
    try {
        (void)ExperimentConfig::from_json(j);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("$.bogus"), std::string::npos) << e.what();
    }
    j = small_config().to_json();
    j["eta"] = 0.7;
    try {
        (void)ExperimentConfig::from_json(j);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("$.eta", 0), 0U) << e.what();
    }
    j = small_config().to_json();
    j["steps"] = "many";
    EXPECT_THROW((void)ExperimentConfig::from_json(j), ConfigError);
    EXPECT_THROW((void)load_config("/nonexistent/config.json"), ConfigError);
}

TEST(ExperimentConfig, DefaultInitScaleIsReference) {
    const ExperimentConfig c = small_config();
    EXPECT_DOUBLE_EQ(c.init_sigma_w(), std::sqrt(reference_init_variance(c.data, c.delta)));
    ExperimentConfig e = c;
    e.sigma_w = 0.3;
    EXPECT_DOUBLE_EQ(e.init_sigma_w(), 0.3);
}

TEST(Run, DeterministicAcrossThreadCounts) {
    const ExperimentConfig c = small_config();
    const RunResult a = run_experiment(c, 1);
    const RunResult b = run_experiment(c, 4);
    EXPECT_EQ(trace_csv(a.trace, a.tracked), trace_csv(b.trace, b.tracked));
    EXPECT_EQ(summary_json(a).dump(), summary_json(b).dump());
}

TEST(Run, TraceCsvLayout) {
    const ExperimentConfig c = small_config();
    const RunResult r = run_experiment(c);
    const auto rows = lines(trace_csv(r.trace, r.tracked));
    ASSERT_EQ(rows.size(), 1U + 5U);
    std::string header = "step,train_loss,train_acc,train_acc_true,test_acc,lambda_plus,lambda_minus";
    for (int i : r.tracked) {
        for (int t = 1; t <= c.data.T; ++t) header += ",x" + std::to_string(i) + "_s" + std::to_string(t);
    }
    EXPECT_EQ(rows[0], header);
    EXPECT_EQ(rows[1].substr(0, 2), "0,");
    EXPECT_EQ(rows.back().substr(0, 3), "40,");
}

TEST(Run, ZeroStepsGivesOneRow) {
    ExperimentConfig c = small_config();
    c.train.steps = 0;
    const RunResult r = run_experiment(c);
    EXPECT_EQ(lines(trace_csv(r.trace, r.tracked)).size(), 2U);
}

TEST(Run, SummaryFields) {
    const RunResult r = run_experiment(small_config());
    const Json s = summary_json(r);
    for (const char* key : {"config", "config_hash", "seed", "final", "noisy_final", "tau_fit", "tau_gen", "regime", "snr",
                            "init_sigma_w", "init_sigma_p", "assumptions", "theory_digest", "diverged"}) {
        EXPECT_TRUE(s.contains(key)) << key;
    }
    EXPECT_TRUE(s["diverged"].is_null());
    EXPECT_EQ(s["noisy_final"].size(), r.trace.noisy_idx.size());
    EXPECT_EQ(s["config_hash"], config_hash(r.config.to_json()));
}

TEST(Run, DivergenceIsRecorded) {
    ExperimentConfig c = small_config();
    c.train.alpha = 1e300;
    const RunResult r = run_experiment(c);
    ASSERT_TRUE(r.diverged_at.has_value());
    EXPECT_FALSE(r.trace.empty());
    EXPECT_FALSE(summary_json(r)["diverged"].is_null());
}

TEST(Run, WritesArtifacts) {
    const auto dir = std::filesystem::temp_directory_path() / "battn_run_artifacts";
    std::filesystem::remove_all(dir);
    const RunResult r = run_experiment(small_config());
    const RunArtifacts a = write_run(r, dir);
    EXPECT_TRUE(std::filesystem::exists(a.trace_path));
    const ExperimentConfig echo = load_config(a.config_echo.string());
    EXPECT_EQ(echo.to_json(), r.config.to_json());
    std::filesystem::remove_all(dir);
}

TEST(Sweep, RowCountAndMeans) {
    SweepSpec spec;
    spec.base = small_config();
    spec.d_values = {60, 90};
    spec.mu_values = {5.0, 20.0, 40.0};
    spec.seeds = {1, 2};
    const std::vector<SweepCell> cells = run_sweep(spec);
    ASSERT_EQ(cells.size(), 12U);
    const auto rows = lines(heatmap_csv(cells));
    EXPECT_EQ(rows.size(), 1U + 12U + 6U);
    EXPECT_EQ(rows[0], "d,mu_norm,seed,train_loss,test_loss,train_acc,test_acc,status");
    EXPECT_NE(rows.back().find(",mean,"), std::string::npos);
    EXPECT_NE(rows.back().find("ok 2/2"), std::string::npos);
    const double m = mean_test_loss(cells, 90, 40.0);
    EXPECT_NEAR(m, 0.5 * (cells[10].test_loss + cells[11].test_loss), 1e-15);
}

TEST(Sweep, SingleCellMatchesRun) {
    SweepSpec spec;
    spec.base = small_config();
    spec.d_values = {spec.base.data.d};
    spec.mu_values = {spec.base.data.mu_norm};
    spec.seeds = {7};
    const std::vector<SweepCell> cells = run_sweep(spec);
    ASSERT_EQ(cells.size(), 1U);
    ExperimentConfig c = spec.base;
    c.seed = cell_seed(7, 0, 0, 0);
    const RunResult r = run_experiment(c);
    EXPECT_EQ(cells[0].cell_seed, c.seed);
    EXPECT_EQ(cells[0].test_loss, r.trace.final().test_loss);
    EXPECT_EQ(cells[0].train_acc, r.trace.final().train_acc);
}

TEST(Sweep, ThreadsDoNotChangeOutput) {
    SweepSpec spec;
    spec.base = small_config();
    spec.d_values = {60, 90};
    spec.mu_values = {5.0, 20.0};
    spec.seeds = {1, 2};
    EXPECT_EQ(heatmap_csv(run_sweep(spec, 1)), heatmap_csv(run_sweep(spec, 3)));
}

TEST(Sweep, SpecValidation) {
    const Json good = read_json_file(std::string(BATTN_CONFIG_DIR) + "/heatmap_sweep.json");
    const SweepSpec s = SweepSpec::from_json(good);
    EXPECT_EQ(SweepSpec::from_json(s.to_json()).to_json(), s.to_json());
    Json bad = good;
    bad["d_values"] = Json::array();
    EXPECT_THROW((void)SweepSpec::from_json(bad), ConfigError);
    bad = good;
    bad["base"]["rho"] = 2.0;
    EXPECT_THROW((void)SweepSpec::from_json(bad), ConfigError);
}

TEST(Checks, UnknownSuiteIsAConfigError) {
    EXPECT_THROW((void)run_checks(small_config(), {"nope"}), ConfigError);
}

TEST(Checks, FastSuitesPass) {
    ExperimentConfig c = small_config();
    c.etf_samples = 20000;
    const TheoryReport rep = run_checks(c, {"gradients", "identities", "etf"});
    ASSERT_EQ(rep.checks.size(), 3U);
    for (const auto& chk : rep.checks) EXPECT_TRUE(chk.pass) << chk.name << " " << chk.measured.dump();
}

TEST(Checks, GLinearityNeedsEnoughPoints) {
    ExperimentConfig c = small_config();
    c.train.log_every = 20;
    const RunResult r = run_experiment(c);
    const auto res = glinearity_checks(r.trace, c.data.rho, c.seed, "h");
    ASSERT_FALSE(res.empty());
    EXPECT_FALSE(res[0].pass);
    EXPECT_TRUE(res[0].measured.contains("error"));
}
