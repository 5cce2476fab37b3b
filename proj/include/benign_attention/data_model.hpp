#pragma once

// Synthetic sequence data: one relevant token carrying the class signal, one
// confusing token carrying a scaled copy of the opposite signal, some weak
// same-class tokens, and pure-noise tokens; labels flipped with probability eta.

#include "errors.hpp"
#include "json_io.hpp"
#include "linalg.hpp"
#include "random.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace battn {

struct SignalBasis {
    Vector mu_plus;
    Vector mu_minus;
    double norm = 0.0;

    [[nodiscard]] const Vector& signal(int label) const { return label > 0 ? mu_plus : mu_minus; }
    [[nodiscard]] Eigen::Index dim() const { return mu_plus.size(); }
};

enum class SignalMode { AxisAligned, RandomOrthogonal };

inline SignalMode parse_signal_mode(const std::string& s, const std::string& path) {
    if (s == "axis_aligned") return SignalMode::AxisAligned;
    if (s == "random_orthogonal") return SignalMode::RandomOrthogonal;
    throw ConfigError(path + ": expected \"axis_aligned\" or \"random_orthogonal\", got \"" + s + "\"");
}

inline std::string to_string(SignalMode m) {
    return m == SignalMode::AxisAligned ? "axis_aligned" : "random_orthogonal";
}

struct DataConfig {
    long n = 20;
    long T = 8;
    long d = 2000;
    double mu_norm = 20.0;
    double sigma_eps = 1.0;
    double eta = 0.2;
    double rho = 0.1;
    long n_weak_same = 1;

    void validate(const std::string& path = "$") const {
        if (n < 1) throw ConfigError(path + ".n: must be positive");
        if (d < 2) throw ConfigError(path + ".d: must be at least 2");
        if (n_weak_same < 1) throw ConfigError(path + ".n_weak_same: must be positive");
        if (T < 2 + n_weak_same) throw ConfigError(path + ".T: must be at least 2 + n_weak_same");
        if (!(mu_norm > 0.0) || !std::isfinite(mu_norm)) throw ConfigError(path + ".mu_norm: must be positive");
        if (!(sigma_eps >= 0.0) || !std::isfinite(sigma_eps)) {
            throw ConfigError(path + ".sigma_eps: must be non-negative");
        }
        if (!(eta >= 0.0 && eta < 0.5)) throw ConfigError(path + ".eta: must lie in [0, 0.5)");
        if (!(rho > 0.0 && rho < 1.0)) throw ConfigError(path + ".rho: must lie in (0, 1)");
    }

    /// Reads the data fields from a strict object shared with other settings.
    static DataConfig read(StrictObject& obj, const std::string& path = "$") {
        DataConfig c;
        c.n = obj.get<long>("n");
        c.T = obj.get<long>("T");
        c.d = obj.get<long>("d");
        c.mu_norm = obj.get<double>("mu_norm");
        c.sigma_eps = obj.get<double>("sigma_eps");
        c.eta = obj.get<double>("eta");
        c.rho = obj.get<double>("rho");
        c.n_weak_same = obj.get_or<long>("n_weak_same", 1);
        c.validate(path);
        return c;
    }

    static DataConfig from_json(const Json& j) {
        StrictObject obj(j, "$");
        DataConfig c = read(obj);
        obj.finish();
        return c;
    }

    void write(Json& j) const {
        j["n"] = n;
        j["T"] = T;
        j["d"] = d;
        j["mu_norm"] = mu_norm;
        j["sigma_eps"] = sigma_eps;
        j["eta"] = eta;
        j["rho"] = rho;
        j["n_weak_same"] = n_weak_same;
    }

    [[nodiscard]] Json to_json() const {
        Json j = Json::object();
        write(j);
        return j;
    }

    bool operator==(const DataConfig&) const = default;
};

enum class TokenRole { Relevant, WeakSame, WeakConfusing, Irrelevant };

inline const char* to_string(TokenRole r) {
    switch (r) {
        case TokenRole::Relevant: return "relevant";
        case TokenRole::WeakSame: return "weak_same";
        case TokenRole::WeakConfusing: return "weak_confusing";
        case TokenRole::Irrelevant: return "irrelevant";
    }
    return "?";
}

/// Rows are tokens. Row 0 is the relevant token and row 1 the confusing one
/// (x_1 and x_2 in 1-based report indexing).
struct Sample {
    Matrix tokens;
    Matrix noise;
    int y_train = 1;
    int y_true = 1;
    std::vector<TokenRole> roles;

    [[nodiscard]] bool noisy() const { return y_train != y_true; }
    [[nodiscard]] Eigen::Index T() const { return tokens.rows(); }
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<int> clean_idx;
    std::vector<int> noisy_idx;
    std::vector<int> clean_pos;
    std::vector<int> clean_neg;
    std::vector<int> noisy_pos;
    std::vector<int> noisy_neg;

    [[nodiscard]] std::size_t size() const { return samples.size(); }
    [[nodiscard]] Eigen::Index T() const { return samples.empty() ? 0 : samples.front().T(); }
    [[nodiscard]] Eigen::Index dim() const { return samples.empty() ? 0 : samples.front().tokens.cols(); }

    /// All tokens as an (n*T) x d matrix, sample-major.
    [[nodiscard]] Matrix stacked_tokens() const {
        const Eigen::Index t = T();
        Matrix out(static_cast<Eigen::Index>(size()) * t, dim());
        for (std::size_t i = 0; i < size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * t, t) = samples[i].tokens;
        return out;
    }

    [[nodiscard]] Matrix stacked_noise() const {
        const Eigen::Index t = T();
        Matrix out(static_cast<Eigen::Index>(size()) * t, dim());
        for (std::size_t i = 0; i < size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * t, t) = samples[i].noise;
        return out;
    }

    static Dataset from_samples(std::vector<Sample> samples) {
        Dataset ds;
        ds.samples = std::move(samples);
        if (ds.samples.empty()) return ds;
        const Eigen::Index t = ds.samples.front().T();
        const Eigen::Index d = ds.samples.front().tokens.cols();
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            const Sample& s = ds.samples[i];
            if (s.tokens.rows() != t || s.tokens.cols() != d) {
                throw DimensionError("sample " + std::to_string(i) + " has a different shape");
            }
            const int idx = static_cast<int>(i);
            if (s.noisy()) {
                ds.noisy_idx.push_back(idx);
                (s.y_train > 0 ? ds.noisy_pos : ds.noisy_neg).push_back(idx);
            } else {
                ds.clean_idx.push_back(idx);
                (s.y_train > 0 ? ds.clean_pos : ds.clean_neg).push_back(idx);
            }
        }
        return ds;
    }
};

inline SignalBasis make_signals(long d, double mu_norm, SignalMode mode, RandomStream rng) {
    if (d < 2) throw DimensionError("make_signals: d must be at least 2");
    if (!(mu_norm > 0.0)) throw DomainError("make_signals: mu_norm must be positive");
    SignalBasis b;
    b.norm = mu_norm;
    b.mu_plus = Vector::Zero(d);
    b.mu_minus = Vector::Zero(d);
    if (mode == SignalMode::AxisAligned) {
        b.mu_plus(0) = mu_norm;
        b.mu_minus(1) = mu_norm;
        return b;
    }
    Vector g1(d);
    Vector g2(d);
    for (long k = 0; k < d; ++k) g1(k) = rng.normal();
    for (long k = 0; k < d; ++k) g2(k) = rng.normal();
    const Vector e1 = g1 / g1.norm();
    Vector r = g2 - e1.dot(g2) * e1;
    r -= e1.dot(r) * e1;
    const Vector e2 = r / r.norm();
    b.mu_plus = mu_norm * e1;
    b.mu_minus = mu_norm * e2;
    return b;
}

/// One clean draw; y_train equals y_true.
inline Sample sample_from_p_star(const DataConfig& cfg, const SignalBasis& signals, RandomStream& rng) {
    const long T = cfg.T;
    const long d = cfg.d;
    if (signals.dim() != d) throw DimensionError("sample_from_p_star: signal dimension differs from d");
    Sample s;
    s.y_true = rng.sign();
    s.y_train = s.y_true;
    s.noise.resize(T, d);
    for (long t = 0; t < T; ++t) {
        for (long k = 0; k < d; ++k) s.noise(t, k) = rng.normal(cfg.sigma_eps);
    }
    s.tokens = s.noise;
    s.roles.assign(static_cast<std::size_t>(T), TokenRole::Irrelevant);
    const Vector& own = signals.signal(s.y_true);
    const Vector& other = signals.signal(-s.y_true);
    s.tokens.row(0) += own.transpose();
    s.roles[0] = TokenRole::Relevant;
    s.tokens.row(1) += (cfg.rho * other).transpose();
    s.roles[1] = TokenRole::WeakConfusing;
    for (long u = 2; u < 2 + cfg.n_weak_same; ++u) {
        s.tokens.row(u) += (cfg.rho * own).transpose();
        s.roles[static_cast<std::size_t>(u)] = TokenRole::WeakSame;
    }
    return s;
}

inline Dataset generate_dataset(const DataConfig& cfg, const SignalBasis& signals, const RandomStream& rng) {
    cfg.validate();
    RandomStream tokens = rng.split("tokens");
    RandomStream flips = rng.split("label_noise");
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.n));
    for (long i = 0; i < cfg.n; ++i) {
        Sample s = sample_from_p_star(cfg, signals, tokens);
        if (flips.bernoulli(cfg.eta)) s.y_train = -s.y_true;
        samples.push_back(std::move(s));
    }
    return Dataset::from_samples(std::move(samples));
}

inline double snr(const DataConfig& cfg) {
    if (!(cfg.sigma_eps > 0.0)) throw DomainError("snr: sigma_eps must be positive");
    if (cfg.d < 1) throw DomainError("snr: d must be positive");
    return cfg.mu_norm / (cfg.sigma_eps * std::sqrt(static_cast<double>(cfg.d)));
}

/// log(T n / delta), the logarithmic factor shared by most conditions.
inline double log_factor(const DataConfig& cfg, double delta) {
    return std::log(static_cast<double>(cfg.T * cfg.n) / delta);
}

/// max{||mu|| sqrt(d), sigma d}, the scale in the step-size and init conditions.
inline double signal_noise_scale(const DataConfig& cfg) {
    const double d = static_cast<double>(cfg.d);
    return std::max(cfg.mu_norm * std::sqrt(d), cfg.sigma_eps * d);
}

/// Reference variance for W and p at initialization.
inline double reference_init_variance(const DataConfig& cfg, double delta) {
    const double lf = log_factor(cfg, delta);
    return 1.0 / (signal_noise_scale(cfg) * lf * lf);
}

struct ModelScales {
    double sigma_w = 0.0;
    double sigma_p = 0.0;
    double alpha = 0.0;
};

struct AssumptionCheck {
    std::string name;
    std::string statement;
    double value = 0.0;
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
    bool holds = false;
    bool asymptotic_only = false;
};

struct AssumptionReport {
    double C = 1.0;
    double delta = 0.01;
    std::vector<AssumptionCheck> checks;

    [[nodiscard]] const AssumptionCheck& at(const std::string& name) const {
        for (const auto& c : checks) {
            if (c.name == name) return c;
        }
        throw std::out_of_range("no assumption named " + name);
    }

    [[nodiscard]] Json to_json() const {
        Json arr = Json::array();
        auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
        for (const auto& c : checks) {
            arr.push_back({{"name", c.name},
                           {"statement", c.statement},
                           {"value", num(c.value)},
                           {"lower", num(c.lower)},
                           {"upper", num(c.upper)},
                           {"holds", c.holds},
                           {"asymptotic_only", c.asymptotic_only}});
        }
        return {{"C", C}, {"delta", delta}, {"checks", arr}};
    }
};

/// Evaluates each parameter condition with constant C. The init-variance
/// condition is a band [ref / slack, ref * slack] around the reference variance.
inline AssumptionReport check_assumptions(const DataConfig& cfg, const ModelScales& scales, double C = 1.0,
                                          double delta = 0.01, double a8_slack = 10.0) {
    if (!(C > 0.0) || !(delta > 0.0 && delta < 1.0) || !(a8_slack >= 1.0)) {
        throw DomainError("check_assumptions: need C > 0, delta in (0,1), slack >= 1");
    }
    AssumptionReport rep;
    rep.C = C;
    rep.delta = delta;
    const double d = static_cast<double>(cfg.d);
    const double n = static_cast<double>(cfg.n);
    const double sigma = cfg.sigma_eps;
    const double sigma_hat = std::max(sigma, 1.0 / sigma);
    const double lf = log_factor(cfg, delta);
    const double mu = cfg.mu_norm;

    auto add = [&](std::string name, std::string statement, double value, double lower, double upper) {
        AssumptionCheck c{std::move(name), std::move(statement), value, lower, upper, false, false};
        c.holds = value >= lower && value <= upper;
        rep.checks.push_back(std::move(c));
    };
    const double inf = std::numeric_limits<double>::infinity();

    add("A1", "d >= C sigma_hat n ||mu||^(4/3) log^3(Tn/delta)", d, C * sigma_hat * n * std::pow(mu, 4.0 / 3.0) * lf * lf * lf, inf);
    add("A2", "||mu|| >= C sigma d^(3/8) log(Tn/delta)", mu, C * sigma * std::pow(d, 3.0 / 8.0) * lf, inf);
    add("A3", "C sigma log(Tn/delta) / ||mu|| <= rho <= 1/C", cfg.rho, C * sigma * lf / mu, 1.0 / C);
    add("A4", "alpha <= 1 / (C max{||mu|| sqrt(d), sigma d})", scales.alpha, -inf, 1.0 / (C * signal_noise_scale(cfg)));
    add("A5", "n >= C log(d/delta)", n, C * std::log(d / delta), inf);
    add("A6", "eta <= 1/C", cfg.eta, -inf, 1.0 / C);
    AssumptionCheck a7{"A7", "T = Theta(1); reported only", static_cast<double>(cfg.T), -inf, inf, true, true};
    rep.checks.push_back(a7);
    const double ref = reference_init_variance(cfg, delta);
    const double vw = scales.sigma_w * scales.sigma_w;
    const double vp = scales.sigma_p * scales.sigma_p;
    add("A8_w", "sigma_w^2 within slack of 1 / (max{||mu|| sqrt(d), sigma d} log^2(Tn/delta))", vw, ref / a8_slack, ref * a8_slack);
    add("A8_p", "sigma_p^2 within slack of 1 / (max{||mu|| sqrt(d), sigma d} log^2(Tn/delta))", vp, ref / a8_slack, ref * a8_slack);
    return rep;
}

}  // namespace battn
