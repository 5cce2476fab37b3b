#pragma once

// Diagnostics of the token-selection dynamics and finite-scale checks of the
// identities and inequalities that drive them.

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "json_io.hpp"
#include "linalg.hpp"
#include "multiclass.hpp"
#include "random.hpp"
#include "reduced_gd.hpp"
#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace battn {

/// g(x) = 2x + 2 sinh(x - log T).
inline double g_function(double x, double T) {
    if (!(T >= 2.0)) throw DomainError("g_function: T must be at least 2");
    return 2.0 * x + 2.0 * std::sinh(x - std::log(T));
}

// ---------------------------------------------------------------- diagnostics

/// Lambda columns hold tokens 2..T, Gamma columns hold tokens 1,3..T (1-based).
struct AttentionDiagnostics {
    double lambda_plus = 0.0;
    double lambda_minus = 0.0;
    Matrix rho_attn;
    Matrix Lambda;
    Matrix Gamma;
};

/// Token index (0-based) behind column c of Lambda.
inline Eigen::Index lambda_token(Eigen::Index c) { return c + 1; }
/// Token index (0-based) behind column c of Gamma.
inline Eigen::Index gamma_token(Eigen::Index c) { return c == 0 ? 0 : c + 1; }

inline void attention_gaps(const Matrix& logits, Matrix& Lambda, Matrix& Gamma) {
    const Eigen::Index n = logits.rows();
    const Eigen::Index T = logits.cols();
    Lambda.resize(n, T - 1);
    Gamma.resize(n, T - 1);
    for (Eigen::Index c = 0; c < T - 1; ++c) {
        Lambda.col(c) = logits.col(0) - logits.col(lambda_token(c));
        Gamma.col(c) = logits.col(1) - logits.col(gamma_token(c));
    }
}

inline AttentionDiagnostics compute_diagnostics(const ModelState& state, const Dataset& ds, const SignalBasis& signals) {
    const Vector q = state.query();
    AttentionDiagnostics dg;
    dg.lambda_plus = signals.mu_plus.dot(q);
    dg.lambda_minus = signals.mu_minus.dot(q);
    const auto n = static_cast<Eigen::Index>(ds.size());
    const Eigen::Index T = ds.T();
    dg.rho_attn.resize(n, T);
    Matrix logits(n, T);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Sample& s = ds.samples[static_cast<std::size_t>(i)];
        dg.rho_attn.row(i) = (s.noise * q).transpose();
        logits.row(i) = (s.tokens * q).transpose();
    }
    attention_gaps(logits, dg.Lambda, dg.Gamma);
    return dg;
}

inline AttentionDiagnostics diagnostics_at(const TracePoint& pt) {
    AttentionDiagnostics dg;
    dg.lambda_plus = pt.lambda_plus;
    dg.lambda_minus = pt.lambda_minus;
    dg.rho_attn = pt.rho_attn;
    attention_gaps(pt.logits, dg.Lambda, dg.Gamma);
    return dg;
}

/// Logit of token t rebuilt from its role: signal attention plus noise attention.
inline double logit_from_roles(const Sample& s, Eigen::Index t, double lambda_plus, double lambda_minus, double rho_attn,
                               double rho) {
    const double own = s.y_true > 0 ? lambda_plus : lambda_minus;
    const double other = s.y_true > 0 ? lambda_minus : lambda_plus;
    switch (s.roles[static_cast<std::size_t>(t)]) {
        case TokenRole::Relevant: return own + rho_attn;
        case TokenRole::WeakSame: return rho * own + rho_attn;
        case TokenRole::WeakConfusing: return rho * other + rho_attn;
        case TokenRole::Irrelevant: return rho_attn;
    }
    return rho_attn;
}

// ---------------------------------------------------------- interaction terms

/// Weighted sums over tokens with weights c_t = s_t (gamma_t - f), evaluated
/// against any probe vector on request.
class InteractionContext {
public:
    InteractionContext(const Dataset& ds, const ModelState& state) : ds_(ds), state_(state) {
        const Vector q = state.query();
        for (const Sample& s : ds.samples) {
            const ForwardResult fr = forward_query(s.tokens, q, state.nu);
            weights_.push_back((fr.probs.array() * (fr.token_scores.array() - fr.output)).matrix());
            neg_lprime_y_.push_back(-loss_derivative(s.y_train * fr.output) * s.y_train);
        }
    }

    /// sum_t c_t <x_t, a> for every sample.
    [[nodiscard]] Vector I(const Vector& a) const {
        Vector out(static_cast<Eigen::Index>(ds_.size()));
        for (std::size_t i = 0; i < ds_.size(); ++i) out(static_cast<Eigen::Index>(i)) = weights_[i].dot(ds_.samples[i].tokens * a);
        return out;
    }

    /// sum_t c_t <W x_t, W a> for every sample.
    [[nodiscard]] Vector IW(const Vector& a) const {
        const Vector Wa = state_.W * a;
        return I(state_.W.transpose() * Wa);
    }

    /// sum_t c_t <W x_t, p> for every sample.
    [[nodiscard]] Vector Ip() const { return I(state_.W.transpose() * state_.p); }

    /// (-l'_i) Y_i for every sample.
    [[nodiscard]] Vector drive() const {
        return Eigen::Map<const Vector>(neg_lprime_y_.data(), static_cast<Eigen::Index>(neg_lprime_y_.size()));
    }

private:
    const Dataset& ds_;
    const ModelState& state_;
    std::vector<Vector> weights_;
    std::vector<double> neg_lprime_y_;
};

/// Full materialization; I_noise(i, j*T + u) holds I_{i,j,u}. Meant for small n, T.
struct InteractionTerms {
    Vector I_plus;
    Vector I_minus;
    Matrix I_noise;
    Vector Iw_plus;
    Vector Iw_minus;
    Matrix Iw_noise;
    Vector I_p;
};

inline InteractionTerms interaction_terms(const Dataset& ds, const ModelState& state, const SignalBasis& signals) {
    const InteractionContext ctx(ds, state);
    InteractionTerms it;
    it.I_plus = ctx.I(signals.mu_plus);
    it.I_minus = ctx.I(signals.mu_minus);
    it.Iw_plus = ctx.IW(signals.mu_plus);
    it.Iw_minus = ctx.IW(signals.mu_minus);
    it.I_p = ctx.Ip();
    const auto n = static_cast<Eigen::Index>(ds.size());
    const Eigen::Index T = ds.T();
    it.I_noise.resize(n, n * T);
    it.Iw_noise.resize(n, n * T);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index u = 0; u < T; ++u) {
            const Vector eps = ds.samples[static_cast<std::size_t>(j)].noise.row(u).transpose();
            it.I_noise.col(j * T + u) = ctx.I(eps);
            it.Iw_noise.col(j * T + u) = ctx.IW(eps);
        }
    }
    return it;
}

// ------------------------------------------------------- one-step identities

struct IdentityEntry {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    double rel_error = 0.0;
};

struct IdentityReport {
    std::vector<IdentityEntry> entries;
    double max_rel_error = 0.0;

    [[nodiscard]] bool pass(double tol) const { return max_rel_error <= tol; }
};

/// Takes one gradient step and compares the change of each attention and
/// norm quantity with its closed form in the interaction terms.
inline IdentityReport verify_update_identity(const ModelState& state, const Dataset& ds, const SignalBasis& signals,
                                             double alpha) {
    const InteractionContext ctx(ds, state);
    const Gradients g = gradients(ds, state);
    const ModelState next = gd_step(state, ds, alpha);
    const Vector drive = ctx.drive();
    const double n = static_cast<double>(ds.size());
    const double pp = state.p.squaredNorm();
    const Vector cross = g.W.transpose() * g.p;  // grad_{W^T} L grad_p L

    IdentityReport rep;
    auto add = [&](std::string name, double lhs, double rhs) {
        const double e = relative_error(lhs, rhs);
        rep.max_rel_error = std::max(rep.max_rel_error, e);
        rep.entries.push_back({std::move(name), lhs, rhs, e});
    };

    std::vector<Vector> probes{signals.mu_plus, signals.mu_minus};
    std::vector<std::string> names{"mu+", "mu-"};
    std::vector<Vector> I_terms{ctx.I(signals.mu_plus), ctx.I(signals.mu_minus)};
    for (std::size_t j = 0; j < ds.size(); ++j) {
        for (Eigen::Index u = 0; u < ds.T(); ++u) {
            probes.emplace_back(ds.samples[j].noise.row(u).transpose());
            names.push_back("eps[" + std::to_string(j) + "," + std::to_string(u + 1) + "]");
            I_terms.push_back(ctx.I(probes.back()));
        }
    }
    const Vector q0 = state.query();
    const Vector q1 = next.query();
    std::vector<double> attn0;
    for (const Vector& a : probes) attn0.push_back(a.dot(q0));

    // attention to signals and noise
    for (std::size_t k = 0; k < probes.size(); ++k) {
        const Vector& a = probes[k];
        const double lhs = a.dot(q1) - attn0[k];
        const double rhs = alpha / n * drive.dot(ctx.IW(a) + pp * I_terms[k]) + alpha * alpha * a.dot(cross);
        add("attention " + names[k], lhs, rhs);
    }
    // squared norm of p
    {
        const double lhs = next.p.squaredNorm() - pp;
        const double rhs = 2.0 * alpha / n * drive.dot(ctx.Ip()) + alpha * alpha * g.p.squaredNorm();
        add("norm p", lhs, rhs);
    }
    // inner products <W a, W b>, including squared norms when a == b
    std::vector<Vector> Wa0;
    std::vector<Vector> Wa1;
    std::vector<Vector> Ga;
    for (const Vector& a : probes) {
        Wa0.push_back(state.W * a);
        Wa1.push_back(next.W * a);
        Ga.push_back(g.W * a);
    }
    for (std::size_t a = 0; a < probes.size(); ++a) {
        for (std::size_t b = a; b < probes.size(); ++b) {
            const double lhs = Wa1[a].dot(Wa1[b]) - Wa0[a].dot(Wa0[b]);
            const double rhs = alpha / n * drive.dot(I_terms[b] * attn0[a] + I_terms[a] * attn0[b]) +
                               alpha * alpha * Ga[a].dot(Ga[b]);
            add("W " + names[a] + " . W " + names[b], lhs, rhs);
        }
    }
    return rep;
}

// ------------------------------------------------------------ softmax bounds

/// log(2 + 2 cosh(x)) without overflow.
inline double log_two_plus_two_cosh(double x) {
    const double a = std::abs(x);
    return a + 2.0 * std::log1p(std::exp(-a));
}

inline double log_sum_exp(const Vector& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

struct SoftmaxBoundReport {
    double max_identity_error = 0.0;  // relative
    double min_bracket_margin = std::numeric_limits<double>::infinity();  // log-space slack, > 0 means inside
    double max_log_c_prime = 0.0;
    long bracket_violations = 0;
    long max_prob_violations = 0;
    long checked = 0;

    [[nodiscard]] bool pass(double identity_tol = 1e-12) const {
        return max_identity_error <= identity_tol && bracket_violations == 0 && max_prob_violations == 0;
    }

    void merge(const SoftmaxBoundReport& o) {
        max_identity_error = std::max(max_identity_error, o.max_identity_error);
        min_bracket_margin = std::min(min_bracket_margin, o.min_bracket_margin);
        max_log_c_prime = std::max(max_log_c_prime, o.max_log_c_prime);
        bracket_violations += o.bracket_violations;
        max_prob_violations += o.max_prob_violations;
        checked += o.checked;
    }
};

/// Checks, for every sample (rows of logits/probs):
///  the exact form s_1(1 - s_1) = S / (1 + S)^2 with S = sum_t exp(-Lambda_t),
///  the cosh bracket with c = c'^3 T/(T-1), c' = max_{t,u} exp(Lambda_t - Lambda_u),
///  and s_u(1 - s_u) <= s_t(1 - s_t) for the most likely token t.
/// 1 - s is taken as the mass on the other tokens.
inline SoftmaxBoundReport softmax_bound_check(const Matrix& logits, const Matrix& probs) {
    SoftmaxBoundReport rep;
    const Eigen::Index T = logits.cols();
    const double logT = std::log(static_cast<double>(T));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector lam = (logits(i, 0) - logits.row(i).tail(T - 1).array()).matrix().transpose();
        const Vector s = probs.row(i).transpose();
        const double rest = s.tail(T - 1).sum();
        const double lhs = s(0) * rest;
        const double logS = log_sum_exp(-lam);
        const double S = std::exp(logS);
        const double exact = std::isfinite(S) ? S / ((1.0 + S) * (1.0 + S)) : 0.0;
        rep.max_identity_error = std::max(rep.max_identity_error, relative_error(lhs, exact, 1e-300));

        const double log_lhs = logS - 2.0 * (std::max(logS, 0.0) + std::log1p(std::exp(-std::abs(logS))));
        const double log_c_prime = lam.maxCoeff() - lam.minCoeff();
        const double log_c = 3.0 * log_c_prime + std::log(static_cast<double>(T) / static_cast<double>(T - 1));
        rep.max_log_c_prime = std::max(rep.max_log_c_prime, log_c_prime);
        for (Eigen::Index t = 0; t < T - 1; ++t) {
            const double base = -log_two_plus_two_cosh(lam(t) - logT);
            const double upper_slack = base + log_c - log_lhs;
            const double lower_slack = log_lhs - (base - log_c);
            const double slack = std::min(upper_slack, lower_slack);
            rep.min_bracket_margin = std::min(rep.min_bracket_margin, slack);
            if (!(slack > 0.0)) ++rep.bracket_violations;
        }

        Eigen::Index top = 0;
        s.maxCoeff(&top);
        // other-mass summed directly; 1 - s_top cancels when a row saturates
        auto others = [&](Eigen::Index skip) {
            double m = 0.0;
            for (Eigen::Index v = 0; v < T; ++v) m += v == skip ? 0.0 : s(v);
            return m;
        };
        const double st = s(top) * others(top);
        for (Eigen::Index u = 0; u < T; ++u) {
            if (u == top) continue;
            const double su = s(u) * others(u);
            if (su > st * (1.0 + 1e-12)) ++rep.max_prob_violations;
        }
        ++rep.checked;
    }
    return rep;
}

inline SoftmaxBoundReport softmax_bound_check(const TrainTrace& trace) {
    SoftmaxBoundReport rep;
    for (const TracePoint& pt : trace.points) rep.merge(softmax_bound_check(pt.logits, pt.probs));
    return rep;
}

// ------------------------------------------------------------------ good run

struct GoodRunTolerances {
    double norm_tol = 0.10;     // relative band on noise norms
    double inner_c = 5.0;       // cap constant for <eps, eps'>
    double signal_c = 5.0;      // cap constant for <mu, eps> and <nu, eps>
    double delta = 0.01;
};

struct EventResult {
    std::string name;
    bool holds = false;
    bool vacuous = false;
    double measured = 0.0;   // worst observed ratio or count
    double threshold = 0.0;  // limit it is compared against
};

struct GoodRunReport {
    std::vector<EventResult> events;

    [[nodiscard]] const EventResult& at(const std::string& name) const {
        for (const auto& e : events) {
            if (e.name == name) return e;
        }
        throw std::out_of_range("no event named " + name);
    }
    [[nodiscard]] bool all_hold() const {
        return std::all_of(events.begin(), events.end(), [](const EventResult& e) { return e.holds; });
    }
};

/// Data events: noise norms, pairwise noise inner products, signal/head against
/// noise, and class-count bounds. With an initial state also the W(0), p(0) norms.
inline GoodRunReport good_run_check(const Dataset& ds, const SignalBasis& signals, const DataConfig& cfg,
                                    const GoodRunTolerances& tol = {}, const Vector* nu = nullptr,
                                    const ModelState* init = nullptr, double sigma_w = 0.0, double sigma_p = 0.0) {
    GoodRunReport rep;
    const double d = static_cast<double>(ds.dim());
    const double sigma = cfg.sigma_eps;
    const double lf = log_factor(cfg, tol.delta);
    const Matrix E = ds.stacked_noise();
    const bool vacuous = !(sigma > 0.0);

    {
        EventResult e{"noise_norm", false, vacuous, 0.0, tol.norm_tol};
        if (!vacuous) {
            const Vector norms = E.rowwise().norm() / (sigma * std::sqrt(d));
            e.measured = (norms.array() - 1.0).abs().maxCoeff();
        }
        e.holds = vacuous || e.measured <= tol.norm_tol;
        rep.events.push_back(e);
    }
    {
        EventResult e{"noise_inner", false, vacuous, 0.0, tol.inner_c};
        if (!vacuous && E.rows() > 1) {
            Matrix gram = E * E.transpose();
            gram.diagonal().setZero();
            e.measured = gram.cwiseAbs().maxCoeff() / (sigma * sigma * std::sqrt(d) * lf);
        }
        e.holds = vacuous || e.measured <= tol.inner_c;
        rep.events.push_back(e);
    }
    {
        EventResult e{"signal_noise_inner", false, vacuous, 0.0, tol.signal_c};
        if (!vacuous) {
            const double scale = sigma * signals.norm * std::sqrt(lf);
            e.measured = std::max((E * signals.mu_plus).cwiseAbs().maxCoeff(), (E * signals.mu_minus).cwiseAbs().maxCoeff()) / scale;
        }
        e.holds = vacuous || e.measured <= tol.signal_c;
        rep.events.push_back(e);
    }
    if (nu != nullptr) {
        EventResult e{"head_noise_inner", false, vacuous, 0.0, tol.signal_c};
        if (!vacuous && nu->norm() > 0.0) e.measured = (E * *nu).cwiseAbs().maxCoeff() / (sigma * nu->norm() * std::sqrt(lf));
        e.holds = vacuous || e.measured <= tol.signal_c;
        rep.events.push_back(e);
    }
    const double n = static_cast<double>(ds.size());
    const double eta = cfg.eta;
    auto count_event = [&](const std::string& name, std::size_t count, double lo, double hi) {
        EventResult e{name, false, false, static_cast<double>(count), hi};
        e.holds = static_cast<double>(count) >= lo && static_cast<double>(count) <= hi;
        rep.events.push_back(e);
    };
    count_event("count_clean_pos", ds.clean_pos.size(), (2.0 - 3.0 * eta) * n / 4.0, (2.0 - eta) * n / 4.0);
    count_event("count_clean_neg", ds.clean_neg.size(), (2.0 - 3.0 * eta) * n / 4.0, (2.0 - eta) * n / 4.0);
    count_event("count_noisy_pos", ds.noisy_pos.size(), eta * n / 4.0, 3.0 * eta * n / 4.0);
    count_event("count_noisy_neg", ds.noisy_neg.size(), eta * n / 4.0, 3.0 * eta * n / 4.0);

    if (init != nullptr && sigma_w > 0.0 && sigma_p > 0.0) {
        auto band = [&](const std::string& name, double ratio) {
            EventResult e{name, false, false, std::abs(ratio - 1.0), tol.norm_tol};
            e.holds = e.measured <= tol.norm_tol;
            rep.events.push_back(e);
        };
        band("init_W_mu_plus_norm", (init->W * signals.mu_plus).norm() / (sigma_w * signals.norm * std::sqrt(d)));
        band("init_W_mu_minus_norm", (init->W * signals.mu_minus).norm() / (sigma_w * signals.norm * std::sqrt(d)));
        band("init_p_norm", init->p.norm() / (sigma_p * std::sqrt(d)));
        if (!vacuous) {
            const Vector wn = (init->W * E.transpose()).colwise().norm().transpose() / (sigma_w * sigma * d);
            band("init_W_eps_norm", 1.0 + (wn.array() - 1.0).abs().maxCoeff());
        }
    }
    return rep;
}

// -------------------------------------------------------------- token scores

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

struct TokenScoreReport {
    double relevant_sign_fraction = 0.0;    // clean: Y gamma_1 > 0
    double confusing_sign_fraction = 0.0;   // clean: Y gamma_2 < 0
    double noisy_relevant_flip_fraction = 0.0;  // noisy: Y gamma_1 < 0
    double expected_relevant = 1.0;
    double expected_confusing = 1.0;
    double margin = 0.0;                    // rho ||nu|| ||mu|| / sqrt(2)
    double noise_q50 = 0.0;                 // quantiles of |nu^T eps|
    double noise_q99 = 0.0;
    double band_fraction = 0.0;             // clean: Y gamma_1 within (1 +- band) ||nu|| ||mu|| / sqrt(2)
    bool pass = false;
};

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(v.size() - 1, lo + 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Sign pattern of the token scores by role. Passes when each observed
/// fraction is at least its Gaussian expectation minus three binomial
/// standard deviations.
inline TokenScoreReport token_score_check(const Dataset& ds, const Vector& nu, const SignalBasis& signals, double rho,
                                          double sigma_eps, double band = 0.2) {
    TokenScoreReport rep;
    const double nn = nu.norm();
    rep.margin = rho * nn * signals.norm / std::sqrt(2.0);
    std::vector<double> abs_noise;
    long clean = 0;
    long rel_ok = 0;
    long conf_ok = 0;
    long in_band = 0;
    long noisy = 0;
    long flip_ok = 0;
    double exp_rel = 0.0;
    double exp_conf = 0.0;
    const double ref = nn * signals.norm / std::sqrt(2.0);
    for (const Sample& s : ds.samples) {
        const Vector gamma = s.tokens * nu;
        for (Eigen::Index t = 0; t < s.T(); ++t) abs_noise.push_back(std::abs(s.noise.row(t).dot(nu)));
        const double y = s.y_train;
        if (s.noisy()) {
            ++noisy;
            flip_ok += y * gamma(0) < 0.0 ? 1 : 0;
            continue;
        }
        ++clean;
        rel_ok += y * gamma(0) > 0.0 ? 1 : 0;
        conf_ok += y * gamma(1) < 0.0 ? 1 : 0;
        const double yg = y * gamma(0);
        in_band += (yg >= (1.0 - band) * ref && yg <= (1.0 + band) * ref) ? 1 : 0;
        const double a_own = s.y_true * nu.dot(signals.signal(s.y_true));
        const double a_other = -s.y_true * nu.dot(signals.signal(-s.y_true));
        const double spread = sigma_eps * nn;
        exp_rel += spread > 0.0 ? normal_cdf(a_own / spread) : (a_own > 0.0 ? 1.0 : 0.0);
        exp_conf += spread > 0.0 ? normal_cdf(rho * a_other / spread) : (a_other > 0.0 ? 1.0 : 0.0);
    }
    rep.noise_q50 = quantile(abs_noise, 0.5);
    rep.noise_q99 = quantile(abs_noise, 0.99);
    if (clean > 0) {
        const double c = static_cast<double>(clean);
        rep.relevant_sign_fraction = static_cast<double>(rel_ok) / c;
        rep.confusing_sign_fraction = static_cast<double>(conf_ok) / c;
        rep.band_fraction = static_cast<double>(in_band) / c;
        rep.expected_relevant = exp_rel / c;
        rep.expected_confusing = exp_conf / c;
    }
    if (noisy > 0) rep.noisy_relevant_flip_fraction = static_cast<double>(flip_ok) / static_cast<double>(noisy);
    auto slack = [&](double p) { return clean > 0 ? 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(clean)) : 0.0; };
    rep.pass = rep.relevant_sign_fraction >= rep.expected_relevant - slack(rep.expected_relevant) - 1e-12 &&
               rep.confusing_sign_fraction >= rep.expected_confusing - slack(rep.expected_confusing) - 1e-12;
    return rep;
}

// ---------------------------------------------------------------- g linearity

enum class GapQuantity { Lambda, Gamma, GammaRelevantShifted };

struct StepWindow {
    long begin = 0;  // inclusive
    long end = 0;    // inclusive
};

struct SeriesFit {
    int sample = 0;  // 0-based
    int token = 0;   // 1-based
    LinearFit fit;
};

struct GLinearityResult {
    std::vector<SeriesFit> series;
    LinearFit pooled;
    StepWindow window;
    std::size_t logged_points = 0;
};

/// Least squares of g(gap) against the step over the window, one fit per
/// (sample, token) series and one over all series stacked together.
/// GammaRelevantShifted uses g(Gamma_{j,1} - log(1/rho)).
inline GLinearityResult g_linearity(const TrainTrace& trace, const std::vector<int>& samples, GapQuantity quantity,
                                    StepWindow window, double rho = 0.1) {
    GLinearityResult res;
    res.window = window;
    const double T = static_cast<double>(trace.T);
    std::vector<const TracePoint*> pts;
    for (const TracePoint& pt : trace.points) {
        if (pt.step >= window.begin && pt.step <= window.end) pts.push_back(&pt);
    }
    res.logged_points = pts.size();
    if (pts.size() < 2) throw DomainError("g_linearity: fewer than 2 logged points in the window");
    std::vector<std::vector<double>> gaps_by_point;
    std::vector<double> steps;
    for (const TracePoint* pt : pts) steps.push_back(static_cast<double>(pt->step));

    std::vector<Eigen::Index> cols;
    if (quantity == GapQuantity::GammaRelevantShifted) {
        cols.push_back(0);
    } else {
        for (Eigen::Index c = 0; c < trace.T - 1; ++c) cols.push_back(c);
    }
    std::vector<double> all_x;
    std::vector<double> all_y;
    for (int i : samples) {
        for (Eigen::Index c : cols) {
            std::vector<double> ys;
            for (const TracePoint* pt : pts) {
                double gap = 0.0;
                if (quantity == GapQuantity::Lambda) {
                    gap = pt->logits(i, 0) - pt->logits(i, lambda_token(c));
                } else {
                    gap = pt->logits(i, 1) - pt->logits(i, gamma_token(c));
                    if (quantity == GapQuantity::GammaRelevantShifted) gap -= std::log(1.0 / rho);
                }
                ys.push_back(g_function(gap, T));
            }
            const int token = static_cast<int>(quantity == GapQuantity::Lambda ? lambda_token(c) : gamma_token(c)) + 1;
            res.series.push_back({i, token, fit_line(steps, ys)});
            all_x.insert(all_x.end(), steps.begin(), steps.end());
            all_y.insert(all_y.end(), ys.begin(), ys.end());
        }
    }
    res.pooled = fit_line(all_x, all_y);
    return res;
}

/// From the first logged step after 0 to the first step where some sample in
/// `samples` puts more than `level` on token 1 (or the last step).
inline StepWindow saturation_window(const TrainTrace& trace, const std::vector<int>& samples, double level = 0.99) {
    StepWindow w;
    if (trace.points.size() < 2) throw DomainError("saturation_window: trace too short");
    w.begin = trace.points[1].step;
    w.end = trace.points.back().step;
    for (const TracePoint& pt : trace.points) {
        bool hit = false;
        for (int i : samples) hit = hit || pt.probs(i, 0) > level;
        if (hit) {
            w.end = std::max(pt.step, w.begin);
            break;
        }
    }
    return w;
}

/// First step of the final run over which s_2 of sample j never decreases:
/// the end of the first noisy stage.
inline long noisy_stage_boundary(const TrainTrace& trace, int j) {
    if (trace.points.empty()) throw DomainError("noisy_stage_boundary: empty trace");
    std::size_t k = trace.points.size() - 1;
    while (k > 0 && trace.points[k - 1].probs(j, 1) <= trace.points[k].probs(j, 1)) --k;
    return trace.points[k].step;
}

// -------------------------------------------------------------- signal growth

struct SignalGrowthReport {
    double lambda_plus_start = 0.0;
    double lambda_plus_end = 0.0;
    double lambda_minus_start = 0.0;
    double lambda_minus_end = 0.0;
    double lambda_plus_range = 0.0;
    double max_drawdown = 0.0;  // largest drop after burn-in, as a fraction of the range
    LinearFit log_fit_plus;     // lambda_+ against log(step)
    LinearFit log_fit_minus;
    double n_snr2 = 0.0;
    bool increasing = false;
};

/// Whether lambda_+ and lambda_- rise after the first `burn_in` fraction of the run.
inline SignalGrowthReport signal_growth_check(const TrainTrace& trace, const DataConfig& cfg, double burn_in = 0.1,
                                              double drawdown_tol = 0.05) {
    SignalGrowthReport rep;
    if (trace.points.size() < 2) throw DomainError("signal_growth_check: trace too short");
    const long last = trace.points.back().step;
    const auto start_step = static_cast<long>(std::ceil(burn_in * static_cast<double>(last)));
    std::vector<const TracePoint*> tail;
    for (const TracePoint& pt : trace.points) {
        if (pt.step >= start_step) tail.push_back(&pt);
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const TracePoint& pt : trace.points) {
        lo = std::min(lo, pt.lambda_plus);
        hi = std::max(hi, pt.lambda_plus);
    }
    rep.lambda_plus_range = hi - lo;
    rep.lambda_plus_start = trace.points.front().lambda_plus;
    rep.lambda_minus_start = trace.points.front().lambda_minus;
    rep.lambda_plus_end = trace.points.back().lambda_plus;
    rep.lambda_minus_end = trace.points.back().lambda_minus;
    double range_minus_lo = std::numeric_limits<double>::infinity();
    double range_minus_hi = -range_minus_lo;
    for (const TracePoint& pt : trace.points) {
        range_minus_lo = std::min(range_minus_lo, pt.lambda_minus);
        range_minus_hi = std::max(range_minus_hi, pt.lambda_minus);
    }
    auto drawdown = [&](auto get, double range) {
        double peak = -std::numeric_limits<double>::infinity();
        double worst = 0.0;
        for (const TracePoint* pt : tail) {
            peak = std::max(peak, get(*pt));
            worst = std::max(worst, peak - get(*pt));
        }
        return range > 0.0 ? worst / range : 0.0;
    };
    rep.max_drawdown = std::max(drawdown([](const TracePoint& p) { return p.lambda_plus; }, rep.lambda_plus_range),
                                drawdown([](const TracePoint& p) { return p.lambda_minus; }, range_minus_hi - range_minus_lo));
    std::vector<double> lx;
    std::vector<double> yp;
    std::vector<double> ym;
    for (const TracePoint* pt : tail) {
        if (pt->step <= 0) continue;
        lx.push_back(std::log(static_cast<double>(pt->step)));
        yp.push_back(pt->lambda_plus);
        ym.push_back(pt->lambda_minus);
    }
    rep.log_fit_plus = fit_line(lx, yp);
    rep.log_fit_minus = fit_line(lx, ym);
    rep.n_snr2 = cfg.sigma_eps > 0.0 ? static_cast<double>(cfg.n) * snr(cfg) * snr(cfg) : std::numeric_limits<double>::infinity();
    const bool rises = !tail.empty() && tail.back()->lambda_plus > tail.front()->lambda_plus &&
                       tail.back()->lambda_minus > tail.front()->lambda_minus;
    rep.increasing = rises && rep.max_drawdown <= drawdown_tol;
    return rep;
}

// ---------------------------------------------------------------- regimes

enum class Regime { NotOverfitting, BenignOverfitting, HarmfulOverfitting };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::NotOverfitting: return "not-overfitting";
        case Regime::BenignOverfitting: return "benign";
        case Regime::HarmfulOverfitting: return "harmful";
    }
    return "?";
}

/// Harmful if SNR^2 sqrt(d) < theta_harmful, else not-overfitting if
/// n SNR^2 > theta_benign, else benign.
inline Regime classify_regime(const DataConfig& cfg, double theta_benign = 1.0, double theta_harmful = 1.0) {
    const double s2 = snr(cfg) * snr(cfg);
    if (s2 * std::sqrt(static_cast<double>(cfg.d)) < theta_harmful) return Regime::HarmfulOverfitting;
    if (static_cast<double>(cfg.n) * s2 > theta_benign) return Regime::NotOverfitting;
    return Regime::BenignOverfitting;
}

// ---------------------------------------------------------------- grokking

struct GrokkingTimes {
    std::optional<long> tau_fit;
    std::optional<long> tau_gen;
};

inline GrokkingTimes measure_grokking(const std::vector<long>& steps, const std::vector<double>& train_acc,
                                      const std::vector<double>& test_acc, double fit_threshold, double gen_threshold) {
    if (!(fit_threshold > 0.0 && fit_threshold <= 1.0) || !(gen_threshold > 0.0 && gen_threshold <= 1.0)) {
        throw DomainError("measure_grokking: thresholds must lie in (0, 1]");
    }
    GrokkingTimes g;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        if (!g.tau_fit && train_acc[k] >= fit_threshold) g.tau_fit = steps[k];
        if (!g.tau_gen && test_acc[k] >= gen_threshold) g.tau_gen = steps[k];
    }
    return g;
}

inline GrokkingTimes measure_grokking(const TrainTrace& trace, double fit_threshold, double gen_threshold) {
    std::vector<long> steps;
    std::vector<double> tr;
    std::vector<double> te;
    for (const TracePoint& pt : trace.points) {
        steps.push_back(pt.step);
        tr.push_back(pt.train_acc);
        te.push_back(pt.test_acc);
    }
    return measure_grokking(steps, tr, te, fit_threshold, gen_threshold);
}

// ---------------------------------------------------------------- ETF head

struct EtfReport {
    std::vector<double> cosines;
    Matrix neg_grad;  // d x K, Monte Carlo estimate of -grad_{nu_k}
    double min_cosine = 0.0;
};

/// Monte Carlo estimate of -grad_{W_V} of the expected loss at W = p = W_V = 0,
/// compared column by column with mu_k - mean(mu).
inline EtfReport etf_gradient_check(const Matrix& mu, MulticlassConfig cfg, long mc_samples, const RandomStream& rng,
                                    long batch = 2000) {
    if (mc_samples < 1) throw DomainError("etf_gradient_check: need at least one sample");
    cfg.K = mu.cols();
    cfg.d = mu.rows();
    cfg.validate();
    MulticlassState zero{Matrix::Zero(cfg.d, cfg.d), Vector::Zero(cfg.d), Matrix::Zero(cfg.d, cfg.K)};
    Matrix total = Matrix::Zero(cfg.d, cfg.K);
    long done = 0;
    long b = 0;
    while (done < mc_samples) {
        const long size = std::min(batch, mc_samples - done);
        MulticlassConfig part = cfg;
        part.n = size;
        const Dataset ds = generate_multiclass(part, mu, rng.split(static_cast<std::uint64_t>(b)));
        total -= static_cast<double>(size) * multiclass_loss_and_grads(ds, zero).grad_WV;
        done += size;
        ++b;
    }
    EtfReport rep;
    rep.neg_grad = total / static_cast<double>(mc_samples);
    const Vector mean = mu.rowwise().mean();
    rep.min_cosine = 1.0;
    for (Eigen::Index k = 0; k < cfg.K; ++k) {
        const Vector target = mu.col(k) - mean;
        const Vector est = rep.neg_grad.col(k);
        const double c = est.dot(target) / (est.norm() * target.norm());
        rep.cosines.push_back(c);
        rep.min_cosine = std::min(rep.min_cosine, c);
    }
    return rep;
}

// ---------------------------------------------------------- initialization

struct InitThresholds {
    double prob_deviation = 0.25;  // max_t |s_t - 1/T| * T
    double max_lambda_gap = 0.5;
    double max_gamma_gap = 0.5;
    double first_step_drift = 0.1;
};

struct InitReport {
    double prob_deviation = 0.0;
    double max_lambda_gap = 0.0;
    double max_gamma_gap = 0.0;
    double delta_lambda_plus = 0.0;
    double delta_lambda_minus = 0.0;
    double max_delta_rho = 0.0;
    bool pass_probs = false;
    bool pass_gaps = false;
    bool pass_drift = false;

    [[nodiscard]] bool pass() const { return pass_probs && pass_gaps && pass_drift; }
};

/// Softmax uniformity and attention gaps at step 0, and the drift of the
/// signal and noise attention over one step. The engine is not modified.
inline InitReport init_checks(const ReducedGD& engine, const Dataset& ds, const SignalBasis& signals, double alpha,
                              const InitThresholds& th = {}) {
    InitReport rep;
    const Matrix logits = engine.train_scores();
    const double T = static_cast<double>(logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector s = softmax(logits.row(i).transpose());
        rep.prob_deviation = std::max(rep.prob_deviation, (s.array() - 1.0 / T).abs().maxCoeff() * T);
    }
    Matrix Lambda;
    Matrix Gamma;
    attention_gaps(logits, Lambda, Gamma);
    rep.max_lambda_gap = Lambda.cwiseAbs().maxCoeff();
    rep.max_gamma_gap = Gamma.cwiseAbs().maxCoeff();

    Matrix sig(2, ds.dim());
    sig.row(0) = signals.mu_plus.transpose();
    sig.row(1) = signals.mu_minus.transpose();
    const Projection sp = engine.project(sig);
    const Projection np = engine.project(ds.stacked_noise());
    const Vector lam0 = engine.scores(sp);
    const Vector rho0 = engine.scores(np);
    ReducedGD next = engine;
    next.step(alpha);
    const Vector lam1 = next.scores(sp);
    const Vector rho1 = next.scores(np);
    rep.delta_lambda_plus = std::abs(lam1(0) - lam0(0));
    rep.delta_lambda_minus = std::abs(lam1(1) - lam0(1));
    rep.max_delta_rho = (rho1 - rho0).cwiseAbs().maxCoeff();
    rep.pass_probs = rep.prob_deviation <= th.prob_deviation;
    rep.pass_gaps = rep.max_lambda_gap <= th.max_lambda_gap && rep.max_gamma_gap <= th.max_gamma_gap;
    rep.pass_drift = std::max({rep.delta_lambda_plus, rep.delta_lambda_minus, rep.max_delta_rho}) <= th.first_step_drift;
    return rep;
}

// ------------------------------------------------------ loss-derivative ratio

struct LossRatioReport {
    double max_ratio = 1.0;   // max over logged steps of max_i |l'_i| / min_j |l'_j|
    double max_output = 0.0;  // c = max |f| over the run
    double bound = 1.0;       // (1 + e^c) / (1 + e^-c)
    bool pass = false;
};

inline LossRatioReport loss_ratio_check(const TrainTrace& trace) {
    LossRatioReport rep;
    for (const TracePoint& pt : trace.points) rep.max_output = std::max(rep.max_output, pt.outputs.cwiseAbs().maxCoeff());
    for (const TracePoint& pt : trace.points) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = 0.0;
        for (Eigen::Index i = 0; i < pt.outputs.size(); ++i) {
            const double a = std::abs(loss_derivative(trace.y_train[static_cast<std::size_t>(i)] * pt.outputs(i)));
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
        rep.max_ratio = std::max(rep.max_ratio, hi / lo);
    }
    const double c = rep.max_output;
    rep.bound = (1.0 + std::exp(c)) / (1.0 + std::exp(-c));
    rep.pass = rep.max_ratio <= rep.bound * (1.0 + 1e-12);
    return rep;
}

// ---------------------------------------------------------------- reports

struct CheckResult {
    std::string name;
    bool pass = false;
    Json measured;
    Json threshold;
    std::string config_hash;
    std::uint64_t seed = 0;
};

struct TheoryReport {
    std::vector<CheckResult> checks;

    [[nodiscard]] bool all_pass() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
    }

    [[nodiscard]] Json to_json() const {
        Json arr = Json::array();
        for (const auto& c : checks) {
            arr.push_back({{"name", c.name},
                           {"pass", c.pass},
                           {"measured", c.measured},
                           {"threshold", c.threshold},
                           {"config_hash", c.config_hash},
                           {"seed", c.seed}});
        }
        return arr;
    }
};

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string config_hash(const Json& config) { return hash_hex(fnv1a64(config.dump())); }

}  // namespace battn
