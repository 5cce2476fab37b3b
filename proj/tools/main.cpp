// battn: runs, sweeps, theory checks and regime classification from JSON configs.

#include "benign_attention/benign_attention.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

using namespace battn;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::optional<long> steps;
    std::optional<long> log_every;
    unsigned threads = 1;
    std::string format = "csv";
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "JSON config file")->required();
    cmd->add_option("--seed", o.seed, "overrides the config seed");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--steps", o.steps, "overrides steps");
    cmd->add_option("--log-every", o.log_every, "overrides log_every");
    cmd->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--format", o.format, "output format")->check(CLI::IsMember({"csv", "json"}));
}

void apply(const Overrides& o, ExperimentConfig& c) {
    if (o.seed) c.seed = *o.seed;
    if (o.steps) c.train.steps = *o.steps;
    if (o.log_every) c.train.log_every = *o.log_every;
    c.train.validate();
}

Json trace_json(const TrainTrace& trace, const std::vector<int>& tracked) {
    Json rows = Json::array();
    for (const TracePoint& pt : trace.points) {
        Json r = {{"step", pt.step},
                  {"train_loss", pt.train_loss},
                  {"train_acc", pt.train_acc},
                  {"train_acc_true", pt.train_acc_true},
                  {"test_acc", pt.test_acc},
                  {"lambda_plus", pt.lambda_plus},
                  {"lambda_minus", pt.lambda_minus}};
        for (int i : tracked) {
            for (long t = 0; t < trace.T; ++t) r["x" + std::to_string(i) + "_s" + std::to_string(t + 1)] = pt.probs(i, t);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

int cmd_run(const Overrides& o) {
    ExperimentConfig cfg = load_config(o.config);
    apply(o, cfg);
    const RunResult r = run_experiment(cfg, o.threads);
    const std::filesystem::path dir(o.out_dir);
    std::filesystem::create_directories(dir);
    if (o.format == "csv") {
        write_run(r, dir);
    } else {
        write_text(dir / "trace.json", trace_json(r.trace, r.tracked).dump(2) + "\n");
        write_text(dir / "summary.json", summary_json(r).dump(2) + "\n");
        write_text(dir / "config.json", r.config.to_json().dump(2) + "\n");
    }
    if (r.diverged_at) {
        std::cerr << "diverged at step " << *r.diverged_at << ": " << r.divergence_message << "\n";
        return kDiverged;
    }
    const TracePoint& f = r.trace.final();
    std::printf("step %ld  train_acc %.4f  test_acc %.4f  train_loss %.6g  regime %s  (%.1fs)\n", f.step, f.train_acc,
                f.test_acc, f.train_loss, to_string(r.regime).c_str(), r.seconds);
    return kOk;
}

int cmd_sweep(const Overrides& o) {
    SweepSpec spec = SweepSpec::from_json(read_json_file(o.config));
    apply(o, spec.base);
    if (o.seed) spec.seeds = {static_cast<long>(*o.seed)};
    const std::vector<SweepCell> cells = run_sweep(spec, o.threads);
    const std::filesystem::path dir(o.out_dir);
    std::filesystem::create_directories(dir);
    if (o.format == "csv") {
        write_text(dir / "heatmap.csv", heatmap_csv(cells));
    } else {
        Json rows = Json::array();
        for (const SweepCell& c : cells) {
            rows.push_back({{"d", c.d}, {"mu_norm", c.mu_norm}, {"seed", c.seed}, {"train_loss", c.train_loss},
                            {"test_loss", c.test_loss}, {"train_acc", c.train_acc}, {"test_acc", c.test_acc},
                            {"status", c.status}});
        }
        write_text(dir / "heatmap.json", rows.dump(2) + "\n");
    }
    long failed = 0;
    for (const SweepCell& c : cells) failed += c.status == "ok" ? 0 : 1;
    std::printf("%zu cells, %ld not ok\n", cells.size(), failed);
    return kOk;
}

std::vector<std::string> parse_suites(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "all") return check_suite_names();
        out.push_back(item);
    }
    return out;
}

int cmd_check(const Overrides& o, const std::string& suite_text) {
    const std::vector<std::string> suites = parse_suites(suite_text);
    if (suites.empty()) {
        std::cerr << "usage error: --suite selects no checks (choose from gradients, identities, softmax, goodrun, init, etf, "
                     "glinearity, tokens, all)\n";
        return kUsage;
    }
    ExperimentConfig cfg = load_config(o.config);
    apply(o, cfg);
    const TheoryReport rep = run_checks(cfg, suites, o.threads);
    if (o.format == "json") {
        std::cout << rep.to_json().dump(2) << "\n";
    } else {
        std::cout << "name,pass,config_hash,seed\n";
        for (const auto& c : rep.checks) std::cout << c.name << ',' << (c.pass ? "true" : "false") << ',' << c.config_hash << ',' << c.seed << "\n";
    }
    if (o.out_dir != ".") {
        std::filesystem::create_directories(o.out_dir);
        write_text(std::filesystem::path(o.out_dir) / "report.json", rep.to_json().dump(2) + "\n");
    }
    bool ok = true;
    for (const auto& c : rep.checks) {
        if (!c.pass) {
            std::cerr << "FAILED " << c.name << "\n";
            ok = false;
        }
    }
    return ok ? kOk : kCheckFailed;
}

int cmd_classify(const std::string& path) {
    const ExperimentConfig cfg = load_config(path);
    std::cout << to_string(classify_regime(cfg.data, cfg.theta_benign, cfg.theta_harmful)) << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Benign overfitting in one-layer attention: simulation and checks"};
    app.require_subcommand(1);
    Overrides run_o;
    Overrides sweep_o;
    Overrides check_o;
    std::string suite = "all";
    std::string classify_path;
    auto* run = app.add_subcommand("run", "train one configuration and write trace.csv, summary.json, config.json");
    add_common(run, run_o);
    auto* sweep = app.add_subcommand("sweep", "run a (d, mu_norm, seed) grid and write heatmap.csv");
    add_common(sweep, sweep_o);
    auto* check = app.add_subcommand("check", "run theory checks and print a report");
    add_common(check, check_o);
    check->add_option("--suite", suite, "comma-separated suites or \"all\"");
    auto* classify = app.add_subcommand("classify", "print the predicted regime");
    classify->add_option("--config", classify_path, "JSON config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    try {
        if (*run) return cmd_run(run_o);
        if (*sweep) return cmd_sweep(sweep_o);
        if (*check) return cmd_check(check_o, suite);
        if (*classify) return cmd_classify(classify_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged at step " << e.step() << ": " << e.what() << "\n";
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
