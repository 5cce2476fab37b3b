#pragma once

// K-class version of the model: a head matrix W_V = (nu_1 ... nu_K), softmax
// cross-entropy on the K outputs, and a data model whose weak tokens each align
// with a uniformly drawn class. Labels here are class indices 0..K-1.

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "random.hpp"

#include <cmath>
#include <vector>

namespace battn {

struct MulticlassConfig {
    long n = 20;
    long K = 3;
    long T = 8;
    long d = 64;
    double mu_norm = 1.0;
    double sigma_eps = 0.1;
    double eta = 0.1;
    double rho = 0.1;
    long n_weak = 2;

    void validate() const {
        if (K < 2) throw DomainError("multiclass: K must be at least 2");
        if (n < 1 || T < 1 + n_weak || n_weak < 0) throw DomainError("multiclass: need n >= 1 and T >= 1 + n_weak");
        if (d < K) throw DimensionError("multiclass: d must be at least K for orthogonal signals");
        if (!(mu_norm > 0.0) || !(sigma_eps >= 0.0)) throw DomainError("multiclass: bad signal or noise scale");
        if (!(eta >= 0.0 && eta < 1.0) || !(rho >= 0.0 && rho < 1.0)) throw DomainError("multiclass: eta or rho out of range");
    }
};

/// Columns are K orthogonal signals of equal norm.
inline Matrix make_class_signals(long d, long K, double mu_norm, SignalMode mode, RandomStream rng) {
    if (d < K || K < 2) throw DimensionError("make_class_signals: need 2 <= K <= d");
    Matrix mu = Matrix::Zero(d, K);
    if (mode == SignalMode::AxisAligned) {
        for (long k = 0; k < K; ++k) mu(k, k) = mu_norm;
        return mu;
    }
    Matrix g(d, K);
    for (long k = 0; k < K; ++k) {
        for (long i = 0; i < d; ++i) g(i, k) = rng.normal();
    }
    Eigen::HouseholderQR<Matrix> qr(g);
    return mu_norm * (qr.householderQ() * Matrix::Identity(d, K));
}

inline Sample sample_multiclass(const MulticlassConfig& cfg, const Matrix& mu, RandomStream& rng) {
    Sample s;
    s.y_true = static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.K)));
    s.y_train = s.y_true;
    s.noise.resize(cfg.T, cfg.d);
    for (long t = 0; t < cfg.T; ++t) {
        for (long k = 0; k < cfg.d; ++k) s.noise(t, k) = rng.normal(cfg.sigma_eps);
    }
    s.tokens = s.noise;
    s.roles.assign(static_cast<std::size_t>(cfg.T), TokenRole::Irrelevant);
    s.tokens.row(0) += mu.col(s.y_true).transpose();
    s.roles[0] = TokenRole::Relevant;
    for (long u = 1; u <= cfg.n_weak; ++u) {
        const auto k = static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.K)));
        s.tokens.row(u) += (cfg.rho * mu.col(k)).transpose();
        s.roles[static_cast<std::size_t>(u)] = k == s.y_true ? TokenRole::WeakSame : TokenRole::WeakConfusing;
    }
    if (rng.bernoulli(cfg.eta)) {
        const auto shift = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.K - 1)));
        s.y_train = (s.y_true + shift) % static_cast<int>(cfg.K);
    }
    return s;
}

inline Dataset generate_multiclass(const MulticlassConfig& cfg, const Matrix& mu, const RandomStream& rng) {
    cfg.validate();
    RandomStream r = rng.split("multiclass");
    std::vector<Sample> samples;
    for (long i = 0; i < cfg.n; ++i) samples.push_back(sample_multiclass(cfg, mu, r));
    return Dataset::from_samples(std::move(samples));
}

struct MulticlassState {
    Matrix W;
    Vector p;
    Matrix WV;  // d x K, column k is nu_k
};

struct MulticlassResult {
    double loss = 0.0;
    Matrix grad_W;
    Vector grad_p;
    Matrix grad_WV;
};

inline MulticlassResult multiclass_loss_and_grads(const Dataset& ds, const MulticlassState& st) {
    const Eigen::Index K = st.WV.cols();
    if (K < 2) throw DomainError("multiclass_loss_and_grads: K must be at least 2");
    if (ds.size() == 0) throw DomainError("multiclass_loss_and_grads: empty dataset");
    const Eigen::Index d = st.p.size();
    if (st.W.rows() != d || st.W.cols() != d || st.WV.rows() != d || ds.dim() != d) {
        throw DimensionError("multiclass_loss_and_grads: inconsistent shapes");
    }
    const Vector q = st.W.transpose() * st.p;
    MulticlassResult r;
    Vector v = Vector::Zero(d);
    r.grad_WV = Matrix::Zero(d, K);
    for (const Sample& s : ds.samples) {
        if (s.y_train < 0 || s.y_train >= K) throw DomainError("multiclass_loss_and_grads: label out of range");
        const Vector sm = softmax(s.tokens * q);
        const Matrix gamma = s.tokens * st.WV;              // T x K
        const Vector logits = gamma.transpose() * sm;       // K
        const double top = logits.maxCoeff();
        const Vector e = (logits.array() - top).exp().matrix();
        const double z = e.sum();
        r.loss += std::log(z) + top - logits(s.y_train);
        Vector weight = e / z;
        weight(s.y_train) -= 1.0;
        const Vector eff = gamma * weight;                  // effective token scores
        const double f = sm.dot(eff);
        v.noalias() += s.tokens.transpose() * (sm.array() * (eff.array() - f)).matrix();
        r.grad_WV.noalias() += (s.tokens.transpose() * sm) * weight.transpose();
    }
    const double inv_n = 1.0 / static_cast<double>(ds.size());
    r.loss *= inv_n;
    v *= inv_n;
    r.grad_WV *= inv_n;
    r.grad_W = st.p * v.transpose();
    r.grad_p = st.W * v;
    return r;
}

inline double multiclass_loss(const Dataset& ds, const MulticlassState& st) { return multiclass_loss_and_grads(ds, st).loss; }

inline long double multiclass_loss_extended(const Dataset& ds, const MatrixL& W, const VectorL& p, const MatrixL& WV) {
    const VectorL q = W.transpose() * p;
    long double total = 0.0L;
    for (const Sample& s : ds.samples) {
        const MatrixL X = s.tokens.cast<long double>();
        const VectorL z = X * q;
        const VectorL e = (z.array() - z.maxCoeff()).exp().matrix();
        const VectorL logits = (X * WV).transpose() * (e / e.sum());
        const long double top = logits.maxCoeff();
        total += std::log((logits.array() - top).exp().sum()) + top - logits(s.y_train);
    }
    return total / static_cast<long double>(ds.size());
}

/// Central differences of the K-class loss in W, p and W_V, evaluated in long double.
inline MulticlassResult multiclass_finite_diff(const Dataset& ds, const MulticlassState& st, double h = 1e-5) {
    if (!(h > 0.0)) throw DomainError("multiclass_finite_diff: h must be positive");
    MatrixL W = st.W.cast<long double>();
    VectorL p = st.p.cast<long double>();
    MatrixL WV = st.WV.cast<long double>();
    const long double hh = h;
    auto loss = [&] { return multiclass_loss_extended(ds, W, p, WV); };
    auto diff = [&](long double& x) {
        const long double keep = x;
        x = keep + hh;
        const long double up = loss();
        x = keep - hh;
        const long double down = loss();
        x = keep;
        return static_cast<double>((up - down) / (2.0L * hh));
    };
    MulticlassResult r;
    r.loss = static_cast<double>(loss());
    r.grad_W.resize(W.rows(), W.cols());
    r.grad_p.resize(p.size());
    r.grad_WV.resize(WV.rows(), WV.cols());
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        for (Eigen::Index j = 0; j < W.cols(); ++j) r.grad_W(i, j) = diff(W(i, j));
    }
    for (Eigen::Index i = 0; i < p.size(); ++i) r.grad_p(i) = diff(p(i));
    for (Eigen::Index i = 0; i < WV.rows(); ++i) {
        for (Eigen::Index j = 0; j < WV.cols(); ++j) r.grad_WV(i, j) = diff(WV(i, j));
    }
    return r;
}

}  // namespace battn
