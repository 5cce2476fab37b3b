#pragma once

// One-layer attention classifier f(X) = nu^T X^T softmax(X W^T p).

#include "data_model.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "random.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace battn {

struct ModelState {
    Matrix W;
    Vector p;
    Vector nu;

    [[nodiscard]] Vector query() const { return W.transpose() * p; }
    [[nodiscard]] Eigen::Index dim() const { return p.size(); }
};

struct ForwardResult {
    Vector attn_scores;
    Vector probs;
    Vector token_scores;
    double output = 0.0;
};

/// W_ij ~ N(0, sigma_w^2) filled row by row from the "W" substream, p from "p".
inline void init_params(long d, double sigma_w, double sigma_p, const RandomStream& rng, Matrix& W, Vector& p) {
    if (d < 1) throw DimensionError("init_params: d must be positive");
    if (!(sigma_w >= 0.0) || !(sigma_p >= 0.0)) throw DomainError("init_params: negative standard deviation");
    RandomStream wr = rng.split("W");
    RandomStream pr = rng.split("p");
    W.resize(d, d);
    for (long i = 0; i < d; ++i) {
        for (long j = 0; j < d; ++j) W(i, j) = wr.normal(sigma_w);
    }
    p.resize(d);
    for (long i = 0; i < d; ++i) p(i) = pr.normal(sigma_p);
}

enum class HeadRule { InverseMu, Unit, Custom };

struct HeadSpec {
    HeadRule rule = HeadRule::InverseMu;
    double scale = 1.0;  // used by Custom only
};

inline HeadRule parse_head_rule(const std::string& s, const std::string& path) {
    if (s == "inverse_mu") return HeadRule::InverseMu;
    if (s == "unit") return HeadRule::Unit;
    if (s == "custom") return HeadRule::Custom;
    throw ConfigError(path + ": expected \"inverse_mu\", \"unit\" or \"custom\", got \"" + s + "\"");
}

inline std::string to_string(HeadRule r) {
    switch (r) {
        case HeadRule::InverseMu: return "inverse_mu";
        case HeadRule::Unit: return "unit";
        case HeadRule::Custom: return "custom";
    }
    return "?";
}

/// nu along mu_+ - mu_-, with norm 1/||mu||, 1, or a given scale.
inline Vector make_head(const SignalBasis& signals, HeadSpec spec = {}) {
    const Vector diff = signals.mu_plus - signals.mu_minus;
    const double len = diff.norm();
    if (!(len > 0.0)) throw DomainError("make_head: signals coincide");
    double c = 1.0;
    switch (spec.rule) {
        case HeadRule::InverseMu: c = 1.0 / signals.norm; break;
        case HeadRule::Unit: c = 1.0; break;
        case HeadRule::Custom: c = spec.scale; break;
    }
    return (c / len) * diff;
}

/// Max-subtracted softmax.
template <typename V>
Vector softmax(const Eigen::MatrixBase<V>& v) {
    if (!all_finite(v)) throw DomainError("softmax: non-finite input");
    const double m = v.maxCoeff();
    Vector e = (v.array() - m).exp().matrix();
    return e / e.sum();
}

inline ForwardResult forward_query(const Matrix& X, const Vector& q, const Vector& nu) {
    if (X.cols() != q.size() || X.cols() != nu.size()) throw DimensionError("forward: token width differs from model dimension");
    ForwardResult r;
    r.attn_scores = X * q;
    r.probs = softmax(r.attn_scores);
    r.token_scores = X * nu;
    r.output = r.probs.dot(r.token_scores);
    return r;
}

inline ForwardResult forward(const Matrix& X, const ModelState& state) {
    if (state.W.rows() != state.p.size() || state.W.cols() != state.p.size()) {
        throw DimensionError("forward: W must be d x d with d = dim(p)");
    }
    return forward_query(X, state.query(), state.nu);
}

/// Zero maps to -1 and is always scored as wrong by evaluate.
inline int predict(double output) { return output > 0.0 ? 1 : -1; }

inline bool correct(double output, int label) { return output != 0.0 && predict(output) == label; }

/// log(1 + exp(-z)) without overflow.
inline double logistic_loss(double z) { return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

/// l'(z) = -1 / (1 + exp(z)).
inline double loss_derivative(double z) {
    if (z > 0.0) {
        const double e = std::exp(-z);
        return -e / (1.0 + e);
    }
    return -1.0 / (1.0 + std::exp(z));
}

struct Evaluation {
    double acc_train = 0.0;  // against y_train
    double acc_true = 0.0;   // against y_true
    double loss = 0.0;       // mean logistic loss against y_train
    std::vector<double> outputs;
    std::vector<bool> fit;   // per-sample correctness against y_train
};

inline Evaluation evaluate_outputs(const std::vector<double>& outputs, const std::vector<int>& y_train,
                                   const std::vector<int>& y_true) {
    if (outputs.empty()) throw DomainError("evaluate: empty set");
    Evaluation e;
    e.outputs = outputs;
    e.fit.resize(outputs.size());
    long hit_train = 0;
    long hit_true = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const bool ok = correct(outputs[i], y_train[i]);
        e.fit[i] = ok;
        hit_train += ok ? 1 : 0;
        hit_true += correct(outputs[i], y_true[i]) ? 1 : 0;
        e.loss += logistic_loss(y_train[i] * outputs[i]);
    }
    const auto n = static_cast<double>(outputs.size());
    e.acc_train = static_cast<double>(hit_train) / n;
    e.acc_true = static_cast<double>(hit_true) / n;
    e.loss /= n;
    return e;
}

inline Evaluation evaluate(const Dataset& ds, const ModelState& state) {
    if (ds.size() == 0) throw DomainError("evaluate: empty set");
    const Vector q = state.query();
    std::vector<double> out;
    std::vector<int> yt;
    std::vector<int> ys;
    for (const Sample& s : ds.samples) {
        out.push_back(forward_query(s.tokens, q, state.nu).output);
        yt.push_back(s.y_train);
        ys.push_back(s.y_true);
    }
    return evaluate_outputs(out, yt, ys);
}

}  // namespace battn
