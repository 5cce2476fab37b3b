#pragma once

// Gradient descent on (W, p) carried out in the span of the training tokens.
//
// Every gradient of W has the form p v^T with v in span(X), so with Q an
// orthonormal basis of the training tokens W(t) = W(0) + D(t) Q^T. The engine
// keeps
//   M = W Q,  p,  r = W(0)^T p,  G = W(0)^T M
// and the query W^T p = r + Q (M^T p - Q^T r). r and G stay inside the column
// span of R0 = [r(0) | G(0)], so they are stored as coordinates in R0.
// Nothing of size d x d is ever formed.

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "random.hpp"

#include <optional>
#include <string>
#include <vector>

namespace battn {

/// Vectors projected onto the engine's two bases; scores against the current
/// query come out without touching dimension d again.
struct Projection {
    Matrix on_r;  // rows x (m + 1)
    Matrix on_q;  // rows x m
};

class ReducedGD {
public:
    /// Starts from explicit parameters; W0 is kept so W can be materialized.
    ReducedGD(const Dataset& ds, const Vector& nu, const Matrix& W0, const Vector& p0) {
        setup_data(ds, nu);
        if (W0.rows() != d_ || W0.cols() != d_ || p0.size() != d_) {
            throw DimensionError("ReducedGD: initial parameters do not match data dimension");
        }
        M_ = W0 * Q_;
        p_ = p0;
        Matrix R0(d_, m_ + 1);
        R0.col(0) = W0.transpose() * p0;
        R0.rightCols(m_) = W0.transpose() * M_;
        finish_setup(std::move(R0));
        W0_ = W0;
    }

    /// Draws W0 and p0 exactly as init_params does, one block of rows at a time.
    ReducedGD(const Dataset& ds, const Vector& nu, double sigma_w, double sigma_p, const RandomStream& rng) {
        setup_data(ds, nu);
        if (!(sigma_w >= 0.0) || !(sigma_p >= 0.0)) throw DomainError("ReducedGD: negative standard deviation");
        RandomStream wr = rng.split("W");
        RandomStream pr = rng.split("p");
        p_.resize(d_);
        for (Eigen::Index i = 0; i < d_; ++i) p_(i) = pr.normal(sigma_p);
        M_.resize(d_, m_);
        Matrix R0 = Matrix::Zero(d_, m_ + 1);
        constexpr Eigen::Index block = 128;
        Matrix rows;
        for (Eigen::Index start = 0; start < d_; start += block) {
            const Eigen::Index len = std::min(block, d_ - start);
            rows.resize(len, d_);
            for (Eigen::Index i = 0; i < len; ++i) {
                for (Eigen::Index j = 0; j < d_; ++j) rows(i, j) = wr.normal(sigma_w);
            }
            M_.middleRows(start, len).noalias() = rows * Q_;
            R0.col(0).noalias() += rows.transpose() * p_.segment(start, len);
            R0.rightCols(m_).noalias() += rows.transpose() * M_.middleRows(start, len);
        }
        finish_setup(std::move(R0));
    }

    [[nodiscard]] Eigen::Index dim() const { return d_; }
    [[nodiscard]] Eigen::Index basis_size() const { return m_; }
    [[nodiscard]] long step_count() const { return steps_; }
    [[nodiscard]] const Vector& p() const { return p_; }
    [[nodiscard]] const Vector& nu() const { return nu_; }

    /// W^T p.
    [[nodiscard]] Vector query() const {
        const Vector u = M_.transpose() * p_;
        return R0_ * coord_r_ + Q_ * (u - QtR0_ * coord_r_);
    }

    /// Only available when constructed from explicit parameters.
    [[nodiscard]] Matrix materialize_W() const {
        if (!W0_) throw std::logic_error("materialize_W: initial W was not retained");
        return *W0_ + (M_ - *W0_ * Q_) * Q_.transpose();
    }

    [[nodiscard]] Projection project(const Matrix& rows) const {
        if (rows.cols() != d_) throw DimensionError("project: width differs from model dimension");
        return {rows * R0_, rows * Q_};
    }

    /// Attention logits x^T W^T p for each projected row.
    [[nodiscard]] Vector scores(const Projection& proj) const {
        const Vector u = M_.transpose() * p_;
        return proj.on_r * coord_r_ + proj.on_q * (u - QtR0_ * coord_r_);
    }

    /// Logits of the training tokens, n x T.
    [[nodiscard]] Matrix train_scores() const {
        const Vector u = M_.transpose() * p_;
        const Vector flat = A_ * u;
        return Eigen::Map<const Matrix>(flat.data(), T_, n_).transpose();
    }

    [[nodiscard]] const Matrix& token_scores() const { return gamma_; }

    /// One simultaneous step on (W, p) with step size alpha.
    void step(double alpha) {
        const Vector u = M_.transpose() * p_;
        if (!all_finite(u)) throw DivergenceError("non-finite attention logits", steps_);
        const Vector flat = A_ * u;
        Vector coef(n_ * T_);
        const double inv_n = 1.0 / static_cast<double>(n_);
        for (Eigen::Index i = 0; i < n_; ++i) {
            const Vector s = softmax(flat.segment(i * T_, T_));
            const Vector g = gamma_.row(i).transpose();
            const double f = s.dot(g);
            const double w = loss_derivative(y_[i] * f) * y_[i] * inv_n;
            coef.segment(i * T_, T_) = w * (s.array() * (g.array() - f)).matrix();
        }
        const Vector c = A_.transpose() * coef;
        if (!all_finite(c)) throw DivergenceError("non-finite gradient", steps_);
        const Vector p_old = p_;
        p_.noalias() -= alpha * (M_ * c);
        M_.noalias() -= alpha * p_old * c.transpose();
        const Vector r_old = coord_r_;
        coord_r_.noalias() -= alpha * (coord_G_ * c);
        coord_G_.noalias() -= alpha * r_old * c.transpose();
        ++steps_;
        if (!all_finite(p_)) throw DivergenceError("non-finite parameters", steps_);
    }

private:
    void setup_data(const Dataset& ds, const Vector& nu) {
        if (ds.size() == 0) throw DomainError("ReducedGD: empty dataset");
        n_ = static_cast<Eigen::Index>(ds.size());
        T_ = ds.T();
        d_ = ds.dim();
        if (nu.size() != d_) throw DimensionError("ReducedGD: head dimension differs from data");
        nu_ = nu;
        const Matrix X = ds.stacked_tokens();
        Eigen::HouseholderQR<Matrix> qr(X.transpose());
        m_ = std::min(d_, n_ * T_);
        Q_ = qr.householderQ() * Matrix::Identity(d_, m_);
        A_ = X * Q_;
        const Vector g = X * nu;
        gamma_ = Eigen::Map<const Matrix>(g.data(), T_, n_).transpose();
        y_.clear();
        for (const Sample& s : ds.samples) y_.push_back(s.y_train);
    }

    void finish_setup(Matrix R0) {
        R0_ = std::move(R0);
        QtR0_ = Q_.transpose() * R0_;
        coord_r_ = Vector::Zero(m_ + 1);
        coord_r_(0) = 1.0;
        coord_G_ = Matrix::Zero(m_ + 1, m_);
        coord_G_.bottomRows(m_) = Matrix::Identity(m_, m_);
    }

    Eigen::Index n_ = 0;
    Eigen::Index T_ = 0;
    Eigen::Index d_ = 0;
    Eigen::Index m_ = 0;
    long steps_ = 0;
    Vector nu_;
    Matrix Q_;
    Matrix A_;
    Matrix gamma_;
    std::vector<int> y_;
    Matrix M_;
    Vector p_;
    Matrix R0_;
    Matrix QtR0_;
    Vector coord_r_;
    Matrix coord_G_;
    std::optional<Matrix> W0_;
};

/// Fresh clean draws kept only as projections and token scores.
struct TestSet {
    Projection tokens;
    Vector gamma;
    std::vector<int> labels;
    Eigen::Index T = 0;

    [[nodiscard]] std::size_t size() const { return labels.size(); }
};

/// Sample i uses substream i of rng, so the set does not depend on `threads`.
inline TestSet make_test_set(const ReducedGD& engine, const DataConfig& cfg, const SignalBasis& signals, long size,
                             const RandomStream& rng, unsigned threads = 1) {
    if (size < 1) throw DomainError("make_test_set: size must be positive");
    TestSet ts;
    ts.T = cfg.T;
    const Eigen::Index rows = size * cfg.T;
    ts.tokens.on_r.resize(rows, engine.basis_size() + 1);
    ts.tokens.on_q.resize(rows, engine.basis_size());
    ts.gamma.resize(rows);
    ts.labels.assign(static_cast<std::size_t>(size), 0);
    constexpr std::size_t chunk = 32;
    const std::size_t nchunks = (static_cast<std::size_t>(size) + chunk - 1) / chunk;
    parallel_for(nchunks, threads, [&](std::size_t cb, std::size_t ce) {
        Matrix buf;
        for (std::size_t c = cb; c < ce; ++c) {
            const std::size_t first = c * chunk;
            const std::size_t last = std::min(static_cast<std::size_t>(size), first + chunk);
            buf.resize(static_cast<Eigen::Index>(last - first) * cfg.T, cfg.d);
            for (std::size_t i = first; i < last; ++i) {
                RandomStream r = rng.split(static_cast<std::uint64_t>(i));
                Sample s = sample_from_p_star(cfg, signals, r);
                ts.labels[i] = s.y_true;
                buf.middleRows(static_cast<Eigen::Index>(i - first) * cfg.T, cfg.T) = s.tokens;
            }
            const Projection pr = engine.project(buf);
            const Eigen::Index off = static_cast<Eigen::Index>(first) * cfg.T;
            ts.tokens.on_r.middleRows(off, buf.rows()) = pr.on_r;
            ts.tokens.on_q.middleRows(off, buf.rows()) = pr.on_q;
            ts.gamma.segment(off, buf.rows()) = buf * engine.nu();
        }
    });
    return ts;
}

/// Outputs f(X) for every test sequence under the engine's current state.
inline std::vector<double> test_outputs(const ReducedGD& engine, const TestSet& ts) {
    const Vector sc = engine.scores(ts.tokens);
    std::vector<double> out(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Eigen::Index off = static_cast<Eigen::Index>(i) * ts.T;
        const Vector s = softmax(sc.segment(off, ts.T));
        out[i] = s.dot(ts.gamma.segment(off, ts.T));
    }
    return out;
}

}  // namespace battn
