#pragma once

// Config-driven runs, (d, ||mu||) sweeps and the theory-check suites, with
// CSV and JSON writers for their results.

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "json_io.hpp"
#include "multiclass.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "reduced_gd.hpp"
#include "theory.hpp"
#include "trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace battn {

struct ExperimentConfig {
    DataConfig data;
    TrainConfig train;
    std::optional<double> sigma_w;  // absent: reference init scale
    std::optional<double> sigma_p;
    HeadSpec head;
    SignalMode signal_mode = SignalMode::RandomOrthogonal;
    std::optional<std::vector<int>> tracked_samples;  // 0-based; absent: first clean and first noisy
    std::uint64_t seed = 1;
    double delta = 0.01;
    double C = 1.0;
    double a8_slack = 10.0;
    double theta_benign = 1.0;
    double theta_harmful = 1.0;
    long etf_K = 3;
    long etf_dim = 64;
    long etf_samples = 100000;

    [[nodiscard]] double init_sigma_w() const { return sigma_w.value_or(std::sqrt(reference_init_variance(data, delta))); }
    [[nodiscard]] double init_sigma_p() const { return sigma_p.value_or(std::sqrt(reference_init_variance(data, delta))); }

    static ExperimentConfig from_json(const Json& j) {
        StrictObject obj(j, "$");
        ExperimentConfig c;
        c.data = DataConfig::read(obj);
        c.train = TrainConfig::read(obj);
        c.sigma_w = obj.get_optional<double>("sigma_w");
        c.sigma_p = obj.get_optional<double>("sigma_p");
        if (c.sigma_w && !(*c.sigma_w >= 0.0)) throw ConfigError("$.sigma_w: must be non-negative");
        if (c.sigma_p && !(*c.sigma_p >= 0.0)) throw ConfigError("$.sigma_p: must be non-negative");
        c.head.rule = parse_head_rule(obj.get_or<std::string>("head_rule", "inverse_mu"), "$.head_rule");
        const auto scale = obj.get_optional<double>("head_scale");
        if (c.head.rule == HeadRule::Custom && !scale) throw ConfigError("$.head_scale: required when head_rule is \"custom\"");
        if (scale && c.head.rule != HeadRule::Custom) throw ConfigError("$.head_scale: only allowed with head_rule \"custom\"");
        if (scale) c.head.scale = *scale;
        c.signal_mode = parse_signal_mode(obj.get_or<std::string>("signal_mode", "random_orthogonal"), "$.signal_mode");
        c.tracked_samples = obj.get_optional<std::vector<int>>("tracked_samples");
        if (c.tracked_samples) {
            for (std::size_t k = 0; k < c.tracked_samples->size(); ++k) {
                const int idx = (*c.tracked_samples)[k];
                if (idx < 0 || idx >= c.data.n) {
                    throw ConfigError("$.tracked_samples[" + std::to_string(k) + "]: index outside [0, n)");
                }
            }
        }
        c.seed = obj.get_or<std::uint64_t>("seed", 1);
        c.delta = obj.get_or<double>("delta", 0.01);
        if (!(c.delta > 0.0 && c.delta < 1.0)) throw ConfigError("$.delta: must lie in (0, 1)");
        c.C = obj.get_or<double>("C", 1.0);
        if (!(c.C > 0.0)) throw ConfigError("$.C: must be positive");
        c.a8_slack = obj.get_or<double>("a8_slack", 10.0);
        if (!(c.a8_slack >= 1.0)) throw ConfigError("$.a8_slack: must be at least 1");
        c.theta_benign = obj.get_or<double>("theta_benign", 1.0);
        c.theta_harmful = obj.get_or<double>("theta_harmful", 1.0);
        if (!(c.theta_benign > 0.0)) throw ConfigError("$.theta_benign: must be positive");
        if (!(c.theta_harmful > 0.0)) throw ConfigError("$.theta_harmful: must be positive");
        c.etf_K = obj.get_or<long>("etf_K", 3);
        c.etf_dim = obj.get_or<long>("etf_dim", 64);
        c.etf_samples = obj.get_or<long>("etf_samples", 100000);
        if (c.etf_K < 2) throw ConfigError("$.etf_K: must be at least 2");
        if (c.etf_dim < c.etf_K) throw ConfigError("$.etf_dim: must be at least etf_K");
        if (c.etf_samples < 1) throw ConfigError("$.etf_samples: must be positive");
        obj.finish();
        return c;
    }

    [[nodiscard]] Json to_json() const {
        Json j = Json::object();
        data.write(j);
        train.write(j);
        if (sigma_w) j["sigma_w"] = *sigma_w;
        if (sigma_p) j["sigma_p"] = *sigma_p;
        j["head_rule"] = to_string(head.rule);
        if (head.rule == HeadRule::Custom) j["head_scale"] = head.scale;
        j["signal_mode"] = to_string(signal_mode);
        if (tracked_samples) j["tracked_samples"] = *tracked_samples;
        j["seed"] = seed;
        j["delta"] = delta;
        j["C"] = C;
        j["a8_slack"] = a8_slack;
        j["theta_benign"] = theta_benign;
        j["theta_harmful"] = theta_harmful;
        j["etf_K"] = etf_K;
        j["etf_dim"] = etf_dim;
        j["etf_samples"] = etf_samples;
        return j;
    }
};

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("$: cannot open " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("$: invalid JSON in ") + path + ": " + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path) { return ExperimentConfig::from_json(read_json_file(path)); }

// ------------------------------------------------------------------- runs

/// Everything a run draws, generated from the config seed.
struct RunSetup {
    SignalBasis signals;
    Dataset dataset;
    Vector nu;
};

inline RunSetup prepare_run(const ExperimentConfig& cfg) {
    const RandomStream root(cfg.seed, "experiment");
    RunSetup s;
    s.signals = make_signals(cfg.data.d, cfg.data.mu_norm, cfg.signal_mode, root.split("signals"));
    s.dataset = generate_dataset(cfg.data, s.signals, root.split("data"));
    s.nu = make_head(s.signals, cfg.head);
    return s;
}

inline ReducedGD make_engine(const ExperimentConfig& cfg, const RunSetup& s) {
    const RandomStream root(cfg.seed, "experiment");
    return ReducedGD(s.dataset, s.nu, cfg.init_sigma_w(), cfg.init_sigma_p(), root.split("init"));
}

inline TestSet make_run_test_set(const ExperimentConfig& cfg, const RunSetup& s, const ReducedGD& engine, unsigned threads) {
    const RandomStream root(cfg.seed, "experiment");
    return make_test_set(engine, cfg.data, s.signals, cfg.train.test_size, root.split("test"), threads);
}

struct RunResult {
    ExperimentConfig config;
    TrainTrace trace;
    std::vector<int> tracked;
    GrokkingTimes grokking;
    Regime regime = Regime::BenignOverfitting;
    AssumptionReport assumptions;
    SoftmaxBoundReport softmax;
    LossRatioReport loss_ratio;
    std::optional<long> diverged_at;
    std::string divergence_message;
    double seconds = 0.0;
};

inline std::vector<int> default_tracked(const Dataset& ds) {
    std::vector<int> out;
    if (!ds.clean_idx.empty()) out.push_back(ds.clean_idx.front());
    if (!ds.noisy_idx.empty()) out.push_back(ds.noisy_idx.front());
    return out;
}

/// Data, init, training with diagnostics. Divergence is recorded, not thrown.
inline RunResult run_experiment(const ExperimentConfig& cfg, unsigned threads = 1, const TraceHook& hook = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult r;
    r.config = cfg;
    const RunSetup setup = prepare_run(cfg);
    r.tracked = cfg.tracked_samples.value_or(default_tracked(setup.dataset));
    r.regime = cfg.data.sigma_eps > 0.0 ? classify_regime(cfg.data, cfg.theta_benign, cfg.theta_harmful)
                                        : Regime::NotOverfitting;
    r.assumptions = check_assumptions(cfg.data, {cfg.init_sigma_w(), cfg.init_sigma_p(), cfg.train.alpha}, cfg.C, cfg.delta,
                                      cfg.a8_slack);
    ReducedGD engine = make_engine(cfg, setup);
    const TestSet test = make_run_test_set(cfg, setup, engine, threads);
    try {
        r.trace = train(engine, setup.dataset, setup.signals, cfg.train, &test, hook);
    } catch (const TrainingDiverged& e) {
        r.trace = e.trace();
        r.diverged_at = e.step();
        r.divergence_message = e.what();
    }
    if (!r.trace.empty()) {
        r.grokking = measure_grokking(r.trace, cfg.train.fit_threshold, cfg.train.gen_threshold);
        r.softmax = softmax_bound_check(r.trace);
        r.loss_ratio = loss_ratio_check(r.trace);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Columns: step, train_loss, train_acc, train_acc_true, test_acc,
/// lambda_plus, lambda_minus, then x{i}_s1..x{i}_sT per tracked sample i.
inline std::string trace_csv(const TrainTrace& trace, const std::vector<int>& tracked) {
    std::ostringstream out;
    out << "step,train_loss,train_acc,train_acc_true,test_acc,lambda_plus,lambda_minus";
    for (int i : tracked) {
        for (long t = 1; t <= trace.T; ++t) out << ",x" << i << "_s" << t;
    }
    out << '\n';
    for (const TracePoint& pt : trace.points) {
        out << pt.step << ',' << format_number(pt.train_loss) << ',' << format_number(pt.train_acc) << ','
            << format_number(pt.train_acc_true) << ',' << format_number(pt.test_acc) << ','
            << format_number(pt.lambda_plus) << ',' << format_number(pt.lambda_minus);
        for (int i : tracked) {
            for (long t = 0; t < trace.T; ++t) out << ',' << format_number(pt.probs(i, t));
        }
        out << '\n';
    }
    return out.str();
}

inline Json optional_step(const std::optional<long>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json summary_json(const RunResult& r) {
    Json j = Json::object();
    j["config"] = r.config.to_json();
    j["config_hash"] = config_hash(r.config.to_json());
    j["seed"] = r.config.seed;
    if (!r.trace.empty()) {
        const TracePoint& f = r.trace.final();
        j["final"] = {{"step", f.step},
                      {"train_loss", f.train_loss},
                      {"train_acc", f.train_acc},
                      {"train_acc_true", f.train_acc_true},
                      {"test_acc", f.test_acc},
                      {"test_loss", f.test_loss},
                      {"lambda_plus", f.lambda_plus},
                      {"lambda_minus", f.lambda_minus}};
        Json noisy = Json::array();
        for (int jdx : r.trace.noisy_idx) {
            noisy.push_back({{"sample", jdx}, {"s1", f.probs(jdx, 0)}, {"s2", f.probs(jdx, 1)}, {"fit", f.outputs(jdx) * r.trace.y_train[static_cast<std::size_t>(jdx)] > 0.0}});
        }
        j["noisy_final"] = noisy;
    }
    j["tau_fit"] = optional_step(r.grokking.tau_fit);
    j["tau_gen"] = optional_step(r.grokking.tau_gen);
    j["regime"] = to_string(r.regime);
    j["snr"] = r.config.data.sigma_eps > 0.0 ? Json(snr(r.config.data)) : Json(nullptr);
    j["init_sigma_w"] = r.config.init_sigma_w();
    j["init_sigma_p"] = r.config.init_sigma_p();
    j["assumptions"] = r.assumptions.to_json();
    j["theory_digest"] = {{"softmax_identity_max_rel_error", r.softmax.max_identity_error},
                          {"softmax_bracket_violations", r.softmax.bracket_violations},
                          {"softmax_max_prob_violations", r.softmax.max_prob_violations},
                          {"loss_ratio_max", r.loss_ratio.max_ratio},
                          {"loss_ratio_bound", r.loss_ratio.bound},
                          {"loss_ratio_pass", r.loss_ratio.pass}};
    j["diverged"] = r.diverged_at ? Json({{"step", *r.diverged_at}, {"message", r.divergence_message}}) : Json(nullptr);
    return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

struct RunArtifacts {
    std::filesystem::path trace_path;
    std::filesystem::path summary_path;
    std::filesystem::path config_echo;
};

inline RunArtifacts write_run(const RunResult& r, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    RunArtifacts a{out_dir / "trace.csv", out_dir / "summary.json", out_dir / "config.json"};
    write_text(a.trace_path, trace_csv(r.trace, r.tracked));
    write_text(a.summary_path, summary_json(r).dump(2) + "\n");
    write_text(a.config_echo, r.config.to_json().dump(2) + "\n");
    return a;
}

// ------------------------------------------------------------------ sweeps

struct SweepSpec {
    std::vector<long> d_values;
    std::vector<double> mu_values;
    std::vector<long> seeds;
    ExperimentConfig base;

    static SweepSpec from_json(const Json& j) {
        StrictObject obj(j, "$");
        SweepSpec s;
        s.d_values = obj.get<std::vector<long>>("d_values");
        s.mu_values = obj.get<std::vector<double>>("mu_values");
        s.seeds = obj.get<std::vector<long>>("seeds");
        if (s.d_values.empty()) throw ConfigError("$.d_values: must be non-empty");
        if (s.mu_values.empty()) throw ConfigError("$.mu_values: must be non-empty");
        if (s.seeds.empty()) throw ConfigError("$.seeds: must be non-empty");
        for (std::size_t k = 0; k < s.d_values.size(); ++k) {
            if (s.d_values[k] < 2) throw ConfigError("$.d_values[" + std::to_string(k) + "]: must be at least 2");
        }
        for (std::size_t k = 0; k < s.mu_values.size(); ++k) {
            if (!(s.mu_values[k] > 0.0)) throw ConfigError("$.mu_values[" + std::to_string(k) + "]: must be positive");
        }
        for (std::size_t k = 0; k < s.seeds.size(); ++k) {
            if (s.seeds[k] < 0) throw ConfigError("$.seeds[" + std::to_string(k) + "]: must be non-negative");
        }
        s.base = ExperimentConfig::from_json(obj.raw("base"));
        obj.finish();
        return s;
    }

    [[nodiscard]] Json to_json() const {
        return {{"d_values", d_values}, {"mu_values", mu_values}, {"seeds", seeds}, {"base", base.to_json()}};
    }
};

struct SweepCell {
    long d = 0;
    double mu_norm = 0.0;
    long seed = 0;
    std::uint64_t cell_seed = 0;
    double train_loss = 0.0;
    double test_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    std::string status = "ok";
};

inline std::uint64_t cell_seed(std::uint64_t base_seed, std::size_t di, std::size_t mi, std::size_t si) {
    return hash_combine(hash_combine(hash_combine(base_seed, di), mi), si);
}

/// Cells are independent and written in (d, mu, seed) grid order, so the
/// result does not depend on `threads`.
inline std::vector<SweepCell> run_sweep(const SweepSpec& spec, unsigned threads = 1) {
    std::vector<SweepCell> cells;
    for (std::size_t di = 0; di < spec.d_values.size(); ++di) {
        for (std::size_t mi = 0; mi < spec.mu_values.size(); ++mi) {
            for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
                SweepCell c;
                c.d = spec.d_values[di];
                c.mu_norm = spec.mu_values[mi];
                c.seed = spec.seeds[si];
                c.cell_seed = cell_seed(static_cast<std::uint64_t>(spec.seeds[si]), di, mi, si);
                cells.push_back(c);
            }
        }
    }
    parallel_for(cells.size(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) {
            SweepCell& c = cells[k];
            ExperimentConfig cfg = spec.base;
            cfg.data.d = c.d;
            cfg.data.mu_norm = c.mu_norm;
            cfg.seed = c.cell_seed;
            cfg.tracked_samples.reset();
            try {
                cfg.data.validate();
                const RunResult r = run_experiment(cfg, 1);
                if (!r.trace.empty()) {
                    const TracePoint& f = r.trace.final();
                    c.train_loss = f.train_loss;
                    c.test_loss = f.test_loss;
                    c.train_acc = f.train_acc;
                    c.test_acc = f.test_acc;
                }
                if (r.diverged_at) c.status = "diverged@" + std::to_string(*r.diverged_at);
            } catch (const std::exception& e) {
                c.status = std::string("error: ") + e.what();
                for (char& ch : c.status) {
                    if (ch == ',' || ch == '\n') ch = ';';
                }
            }
        }
    });
    return cells;
}

/// One row per cell, then one "mean" row per (d, mu) over cells with status ok.
inline std::string heatmap_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream out;
    out << "d,mu_norm,seed,train_loss,test_loss,train_acc,test_acc,status\n";
    for (const SweepCell& c : cells) {
        out << c.d << ',' << format_number(c.mu_norm) << ',' << c.seed << ',' << format_number(c.train_loss) << ','
            << format_number(c.test_loss) << ',' << format_number(c.train_acc) << ',' << format_number(c.test_acc) << ','
            << c.status << '\n';
    }
    std::vector<std::pair<long, double>> keys;
    for (const SweepCell& c : cells) {
        if (std::find(keys.begin(), keys.end(), std::make_pair(c.d, c.mu_norm)) == keys.end()) keys.emplace_back(c.d, c.mu_norm);
    }
    for (const auto& [d, mu] : keys) {
        double sums[4] = {0, 0, 0, 0};
        long ok = 0;
        long total = 0;
        for (const SweepCell& c : cells) {
            if (c.d != d || c.mu_norm != mu) continue;
            ++total;
            if (c.status != "ok") continue;
            ++ok;
            sums[0] += c.train_loss;
            sums[1] += c.test_loss;
            sums[2] += c.train_acc;
            sums[3] += c.test_acc;
        }
        out << d << ',' << format_number(mu) << ",mean";
        for (double s : sums) out << ',' << format_number(ok > 0 ? s / static_cast<double>(ok) : std::nan(""));
        out << ",ok " << ok << '/' << total << '\n';
    }
    return out.str();
}

/// Seed-averaged test loss of the (d, mu) cell, from cells with status ok.
inline double mean_test_loss(const std::vector<SweepCell>& cells, long d, double mu) {
    double s = 0.0;
    long k = 0;
    for (const SweepCell& c : cells) {
        if (c.d == d && c.mu_norm == mu && c.status == "ok") {
            s += c.test_loss;
            ++k;
        }
    }
    return k > 0 ? s / static_cast<double>(k) : std::nan("");
}

// ------------------------------------------------------------------ checks

inline const std::vector<std::string>& check_suite_names() {
    static const std::vector<std::string> names{"gradients", "identities", "softmax", "goodrun",
                                                "init",      "etf",        "glinearity", "tokens"};
    return names;
}

/// Random dense instance with entries of order one.
inline void random_small_instance(RandomStream rng, long n, long T, long d, Dataset& ds, ModelState& state,
                                  double rho = 0.3, double eta = 0.25) {
    DataConfig dc;
    dc.n = n;
    dc.T = T;
    dc.d = d;
    dc.mu_norm = 1.5;
    dc.sigma_eps = 0.7;
    dc.eta = eta;
    dc.rho = rho;
    dc.n_weak_same = 1;
    const SignalBasis sig = make_signals(d, dc.mu_norm, SignalMode::RandomOrthogonal, rng.split("signals"));
    ds = generate_dataset(dc, sig, rng.split("data"));
    init_params(d, 0.5, 0.5, rng.split("init"), state.W, state.p);
    RandomStream hr = rng.split("head");
    state.nu.resize(d);
    for (long k = 0; k < d; ++k) state.nu(k) = hr.normal();
}

inline CheckResult gradient_suite(std::uint64_t seed, const std::string& hash, int trials = 20) {
    CheckResult r{"gradients", false, Json::object(), {{"max_rel_error", 1e-6}}, hash, seed};
    const RandomStream root(seed, "check-gradients");
    double worst = 0.0;
    double worst_mc = 0.0;
    for (int k = 0; k < trials; ++k) {
        Dataset ds;
        ModelState st;
        random_small_instance(root.split(static_cast<std::uint64_t>(k)), 4, 3, 8, ds, st);
        const Gradients g = gradients(ds, st);
        const Gradients fd = finite_diff_grad(ds, st, 1e-5);
        worst = std::max({worst, max_relative_error(g.W, fd.W), max_relative_error(g.p, fd.p)});

        MulticlassConfig mc;
        mc.n = 4;
        mc.K = 3;
        mc.T = 3;
        mc.d = 8;
        mc.mu_norm = 1.5;
        mc.sigma_eps = 0.7;
        mc.eta = 0.25;
        mc.rho = 0.3;
        mc.n_weak = 1;
        const RandomStream mr = root.split(1000 + static_cast<std::uint64_t>(k));
        const Matrix mu = make_class_signals(8, 3, 1.5, SignalMode::RandomOrthogonal, mr.split("signals"));
        const Dataset mds = generate_multiclass(mc, mu, mr.split("data"));
        MulticlassState ms;
        init_params(8, 0.5, 0.5, mr.split("init"), ms.W, ms.p);
        RandomStream hr = mr.split("head");
        ms.WV.resize(8, 3);
        for (long i = 0; i < 8; ++i) {
            for (long c = 0; c < 3; ++c) ms.WV(i, c) = hr.normal();
        }
        const MulticlassResult mg = multiclass_loss_and_grads(mds, ms);
        const MulticlassResult fd_mc = multiclass_finite_diff(mds, ms, 1e-5);
        worst_mc = std::max({worst_mc, max_relative_error(mg.grad_W, fd_mc.grad_W), max_relative_error(mg.grad_p, fd_mc.grad_p),
                             max_relative_error(mg.grad_WV, fd_mc.grad_WV)});
    }
    r.measured = {{"max_rel_error_binary", worst}, {"max_rel_error_multiclass", worst_mc}, {"trials", trials}};
    r.pass = worst <= 1e-6 && worst_mc <= 1e-6;
    return r;
}

inline CheckResult identity_suite(std::uint64_t seed, const std::string& hash, int trials = 10) {
    CheckResult r{"identities", false, Json::object(), {{"max_rel_error", 1e-9}}, hash, seed};
    const RandomStream root(seed, "check-identities");
    double worst = 0.0;
    long entries = 0;
    for (int k = 0; k < trials; ++k) {
        const RandomStream rk = root.split(static_cast<std::uint64_t>(k));
        Dataset ds;
        ModelState st;
        random_small_instance(rk, 4, 3, 8, ds, st);
        const SignalBasis sig = make_signals(8, 1.5, SignalMode::RandomOrthogonal, rk.split("signals"));
        const IdentityReport rep = verify_update_identity(st, ds, sig, 0.1);
        worst = std::max(worst, rep.max_rel_error);
        entries += static_cast<long>(rep.entries.size());
    }
    r.measured = {{"max_rel_error", worst}, {"identities_checked", entries}};
    r.pass = worst <= 1e-9;
    return r;
}

constexpr std::size_t kMinWindowPoints = 10;

inline std::size_t points_in(const TrainTrace& tr, StepWindow w) {
    std::size_t k = 0;
    for (const TracePoint& pt : tr.points) k += (pt.step >= w.begin && pt.step <= w.end) ? 1 : 0;
    return k;
}

/// Clean: pooled g(Lambda) over the pre-saturation window. Noisy: g(Lambda)
/// before the stage boundary, g(Gamma) after it. Windows need 10 logged points.
inline std::vector<CheckResult> glinearity_checks(const TrainTrace& tr, double rho, std::uint64_t seed, const std::string& hash) {
    std::vector<CheckResult> out;
    if (tr.points.size() < 2) {
        out.push_back({"glinearity_clean", false, {{"error", "trace too short"}}, Json::object(), hash, seed});
        return out;
    }
    const StepWindow clean_w = saturation_window(tr, tr.clean_idx, 0.99);
    const std::size_t clean_pts = points_in(tr, clean_w);
    if (clean_pts < kMinWindowPoints || tr.clean_idx.empty()) {
        out.push_back({"glinearity_clean", false, {{"error", "window has too few logged points"}, {"points", clean_pts}},
                       {{"min_points", kMinWindowPoints}}, hash, seed});
    } else {
        const GLinearityResult clean = g_linearity(tr, tr.clean_idx, GapQuantity::Lambda, clean_w, rho);
        out.push_back({"glinearity_clean",
                       clean.pooled.slope > 0.0 && clean.pooled.r_squared >= 0.95,
                       {{"slope", clean.pooled.slope}, {"r_squared", clean.pooled.r_squared},
                        {"window", {clean_w.begin, clean_w.end}}, {"points", clean.logged_points}},
                       {{"slope", "> 0"}, {"r_squared", 0.95}},
                       hash,
                       seed});
    }
    if (tr.noisy_idx.empty()) return out;
    bool early_ok = true;
    bool late_ok = true;
    Json early = Json::array();
    Json late = Json::array();
    for (int j : tr.noisy_idx) {
        const long boundary = noisy_stage_boundary(tr, j);
        const StepWindow ew{tr.points[1].step, boundary};
        if (const std::size_t k = points_in(tr, ew); k < kMinWindowPoints) {
            early_ok = false;
            early.push_back({{"sample", j}, {"error", "first stage has too few logged points"}, {"points", k}, {"boundary", boundary}});
        } else {
            const GLinearityResult e = g_linearity(tr, {j}, GapQuantity::Lambda, ew, rho);
            early_ok = early_ok && e.pooled.slope < 0.0 && e.pooled.r_squared >= 0.90;
            early.push_back({{"sample", j}, {"slope", e.pooled.slope}, {"r_squared", e.pooled.r_squared}, {"window", {ew.begin, ew.end}}});
        }
        const StepWindow lw{boundary, tr.points.back().step};
        if (const std::size_t k = points_in(tr, lw); k < kMinWindowPoints) {
            late_ok = false;
            late.push_back({{"sample", j}, {"error", "second stage has too few logged points"}, {"points", k}, {"boundary", boundary}});
        } else {
            const GLinearityResult l = g_linearity(tr, {j}, GapQuantity::Gamma, lw, rho);
            late_ok = late_ok && l.pooled.slope > 0.0;
            late.push_back({{"sample", j}, {"slope", l.pooled.slope}, {"r_squared", l.pooled.r_squared}, {"window", {lw.begin, lw.end}}});
        }
    }
    out.push_back({"glinearity_noisy_early", early_ok, {{"samples", early}}, {{"slope", "< 0"}, {"r_squared", 0.90}}, hash, seed});
    out.push_back({"glinearity_noisy_late", late_ok, {{"samples", late}}, {{"slope", "> 0"}}, hash, seed});
    return out;
}

/// Runs the named suites against a config. Unknown names raise ConfigError.
inline TheoryReport run_checks(const ExperimentConfig& cfg, const std::vector<std::string>& suites, unsigned threads = 1) {
    for (const auto& s : suites) {
        if (std::find(check_suite_names().begin(), check_suite_names().end(), s) == check_suite_names().end()) {
            throw ConfigError("$.suite: unknown suite \"" + s + "\"");
        }
    }
    auto wants = [&](const char* name) { return std::find(suites.begin(), suites.end(), name) != suites.end(); };
    const std::string hash = config_hash(cfg.to_json());
    TheoryReport rep;
    if (wants("gradients")) rep.checks.push_back(gradient_suite(cfg.seed, hash));
    if (wants("identities")) rep.checks.push_back(identity_suite(cfg.seed, hash));

    const bool needs_data = wants("goodrun") || wants("init") || wants("tokens");
    std::optional<RunSetup> setup;
    if (needs_data) setup = prepare_run(cfg);
    if (wants("goodrun")) {
        GoodRunTolerances tol;
        tol.delta = cfg.delta;
        const GoodRunReport g = good_run_check(setup->dataset, setup->signals, cfg.data, tol, &setup->nu);
        Json events = Json::array();
        for (const auto& e : g.events) {
            events.push_back({{"name", e.name}, {"holds", e.holds}, {"vacuous", e.vacuous}, {"measured", e.measured}, {"threshold", e.threshold}});
        }
        rep.checks.push_back({"goodrun", g.all_hold(), {{"events", events}},
                              {{"norm_tol", tol.norm_tol}, {"inner_c", tol.inner_c}, {"signal_c", tol.signal_c}, {"delta", tol.delta}},
                              hash, cfg.seed});
    }
    if (wants("init")) {
        const ReducedGD engine = make_engine(cfg, *setup);
        const InitThresholds th;
        const InitReport ir = init_checks(engine, setup->dataset, setup->signals, cfg.train.alpha, th);
        rep.checks.push_back({"init", ir.pass(),
                              {{"prob_deviation", ir.prob_deviation}, {"max_lambda_gap", ir.max_lambda_gap},
                               {"max_gamma_gap", ir.max_gamma_gap}, {"delta_lambda_plus", ir.delta_lambda_plus},
                               {"delta_lambda_minus", ir.delta_lambda_minus}, {"max_delta_rho", ir.max_delta_rho}},
                              {{"prob_deviation", th.prob_deviation}, {"max_lambda_gap", th.max_lambda_gap},
                               {"max_gamma_gap", th.max_gamma_gap}, {"first_step_drift", th.first_step_drift}},
                              hash, cfg.seed});
    }
    if (wants("tokens")) {
        const TokenScoreReport t = token_score_check(setup->dataset, setup->nu, setup->signals, cfg.data.rho, cfg.data.sigma_eps);
        rep.checks.push_back({"tokens", t.pass,
                              {{"relevant_sign_fraction", t.relevant_sign_fraction}, {"confusing_sign_fraction", t.confusing_sign_fraction},
                               {"noisy_relevant_flip_fraction", t.noisy_relevant_flip_fraction}, {"margin", t.margin},
                               {"noise_abs_q50", t.noise_q50}, {"noise_abs_q99", t.noise_q99}},
                              {{"relevant_expected", t.expected_relevant}, {"confusing_expected", t.expected_confusing}},
                              hash, cfg.seed});
    }
    if (wants("etf")) {
        MulticlassConfig mc;
        mc.K = cfg.etf_K;
        mc.d = cfg.etf_dim;
        mc.T = cfg.data.T;
        mc.n_weak = 1 + cfg.data.n_weak_same;
        mc.mu_norm = cfg.data.mu_norm;
        mc.sigma_eps = cfg.data.sigma_eps;
        mc.eta = cfg.data.eta;
        mc.rho = cfg.data.rho;
        const RandomStream root(cfg.seed, "check-etf");
        const Matrix mu = make_class_signals(mc.d, mc.K, mc.mu_norm, cfg.signal_mode, root.split("signals"));
        const EtfReport e = etf_gradient_check(mu, mc, cfg.etf_samples, root.split("mc"));
        rep.checks.push_back({"etf", e.min_cosine >= 0.99, {{"cosines", e.cosines}, {"samples", cfg.etf_samples}},
                              {{"min_cosine", 0.99}}, hash, cfg.seed});
    }
    if (wants("softmax") || wants("glinearity")) {
        const RunResult run = run_experiment(cfg, threads);
        if (wants("softmax")) {
            rep.checks.push_back({"softmax", run.softmax.pass(1e-12),
                                  {{"max_identity_error", run.softmax.max_identity_error},
                                   {"bracket_violations", run.softmax.bracket_violations},
                                   {"min_log_bracket_margin", run.softmax.min_bracket_margin},
                                   {"max_prob_violations", run.softmax.max_prob_violations},
                                   {"rows_checked", run.softmax.checked}},
                                  {{"identity_rel_error", 1e-12}}, hash, cfg.seed});
        }
        if (wants("glinearity")) {
            for (auto& c : glinearity_checks(run.trace, cfg.data.rho, cfg.seed, hash)) rep.checks.push_back(std::move(c));
        }
        if (run.diverged_at) throw DivergenceError(run.divergence_message, *run.diverged_at);
    }
    return rep;
}

}  // namespace battn
