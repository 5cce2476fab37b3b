#pragma once

// Full-batch gradient descent on (W, p): closed-form gradients on the dense
// state, a central-difference oracle, and the instrumented training loop.

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "json_io.hpp"
#include "linalg.hpp"
#include "reduced_gd.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace battn {

inline double empirical_loss(const Dataset& ds, const ModelState& state) {
    if (ds.size() == 0) throw DomainError("empirical_loss: empty dataset");
    const Vector q = state.query();
    double total = 0.0;
    for (const Sample& s : ds.samples) total += logistic_loss(s.y_train * forward_query(s.tokens, q, state.nu).output);
    return total / static_cast<double>(ds.size());
}

/// Gradient of the loss with respect to the query W^T p. Both parameter
/// gradients factor through it.
inline Vector query_gradient(const Dataset& ds, const ModelState& state) {
    if (ds.size() == 0) throw DomainError("query_gradient: empty dataset");
    if (ds.dim() != state.dim()) throw DimensionError("query_gradient: data and model dimensions differ");
    const Vector q = state.query();
    Vector v = Vector::Zero(state.dim());
    for (const Sample& s : ds.samples) {
        const ForwardResult fr = forward_query(s.tokens, q, state.nu);
        const double w = loss_derivative(s.y_train * fr.output) * s.y_train;
        const Vector coef = (fr.probs.array() * (fr.token_scores.array() - fr.output)).matrix();
        v.noalias() += w * (s.tokens.transpose() * coef);
    }
    return v / static_cast<double>(ds.size());
}

struct Gradients {
    Matrix W;
    Vector p;
};

inline Gradients gradients(const Dataset& ds, const ModelState& state) {
    const Vector v = query_gradient(ds, state);
    return {state.p * v.transpose(), state.W * v};
}

inline Matrix grad_w(const Dataset& ds, const ModelState& state) { return gradients(ds, state).W; }
inline Vector grad_p(const Dataset& ds, const ModelState& state) { return gradients(ds, state).p; }

/// W and p both move using gradients taken at the incoming state.
inline ModelState gd_step(const ModelState& state, const Dataset& ds, double alpha, long step = 0) {
    const Gradients g = gradients(ds, state);
    if (!all_finite(g.W) || !all_finite(g.p)) throw DivergenceError("non-finite gradient", step);
    ModelState next = state;
    next.W -= alpha * g.W;
    next.p -= alpha * g.p;
    return next;
}

template <typename F>
double central_difference(F&& f, double x, double h) {
    if (!(h > 0.0)) throw DomainError("central_difference: h must be positive");
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// empirical_loss evaluated in long double, for finite-difference oracles.
inline long double empirical_loss_extended(const Dataset& ds, const MatrixL& W, const VectorL& p, const VectorL& nu) {
    const VectorL q = W.transpose() * p;
    long double total = 0.0L;
    for (const Sample& s : ds.samples) {
        const MatrixL X = s.tokens.cast<long double>();
        const VectorL z = X * q;
        const VectorL e = (z.array() - z.maxCoeff()).exp().matrix();
        const long double f = e.dot(X * nu) / e.sum();
        const long double m = -s.y_train * f;
        total += m > 0.0L ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    }
    return total / static_cast<long double>(ds.size());
}

/// Central differences of the empirical loss in every coordinate of W and p.
/// The loss is evaluated in long double so that near-zero entries are resolved.
inline Gradients finite_diff_grad(const Dataset& ds, const ModelState& state, double h = 1e-5) {
    if (!(h > 0.0)) throw DomainError("finite_diff_grad: h must be positive");
    MatrixL W = state.W.cast<long double>();
    VectorL p = state.p.cast<long double>();
    const VectorL nu = state.nu.cast<long double>();
    const long double hh = h;
    Gradients g{Matrix(state.W.rows(), state.W.cols()), Vector(state.p.size())};
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        for (Eigen::Index j = 0; j < W.cols(); ++j) {
            const long double keep = W(i, j);
            W(i, j) = keep + hh;
            const long double up = empirical_loss_extended(ds, W, p, nu);
            W(i, j) = keep - hh;
            const long double down = empirical_loss_extended(ds, W, p, nu);
            W(i, j) = keep;
            g.W(i, j) = static_cast<double>((up - down) / (2.0L * hh));
        }
    }
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const long double keep = p(i);
        p(i) = keep + hh;
        const long double up = empirical_loss_extended(ds, W, p, nu);
        p(i) = keep - hh;
        const long double down = empirical_loss_extended(ds, W, p, nu);
        p(i) = keep;
        g.p(i) = static_cast<double>((up - down) / (2.0L * hh));
    }
    return g;
}

struct TrainConfig {
    double alpha = 5e-3;
    long steps = 1000;
    long log_every = 10;
    long test_size = 1000;
    double fit_threshold = 1.0;
    double gen_threshold = 0.95;

    void validate(const std::string& path = "$") const {
        if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError(path + ".alpha: must be positive");
        if (steps < 0) throw ConfigError(path + ".steps: must be non-negative");
        if (log_every < 1) throw ConfigError(path + ".log_every: must be at least 1");
        if (test_size < 1) throw ConfigError(path + ".test_size: must be at least 1");
        if (!(fit_threshold > 0.0 && fit_threshold <= 1.0)) throw ConfigError(path + ".fit_threshold: must lie in (0, 1]");
        if (!(gen_threshold > 0.0 && gen_threshold <= 1.0)) throw ConfigError(path + ".gen_threshold: must lie in (0, 1]");
    }

    static TrainConfig read(StrictObject& obj, const std::string& path = "$") {
        TrainConfig c;
        c.alpha = obj.get<double>("alpha");
        c.steps = obj.get<long>("steps");
        c.log_every = obj.get_or<long>("log_every", c.log_every);
        c.test_size = obj.get_or<long>("test_size", c.test_size);
        c.fit_threshold = obj.get_or<double>("fit_threshold", c.fit_threshold);
        c.gen_threshold = obj.get_or<double>("gen_threshold", c.gen_threshold);
        c.validate(path);
        return c;
    }

    void write(Json& j) const {
        j["alpha"] = alpha;
        j["steps"] = steps;
        j["log_every"] = log_every;
        j["test_size"] = test_size;
        j["fit_threshold"] = fit_threshold;
        j["gen_threshold"] = gen_threshold;
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Snapshot at one logged step. Matrices are n x T with 0-based rows/columns.
struct TracePoint {
    long step = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double train_acc_true = 0.0;
    double test_acc = 0.0;
    double test_loss = 0.0;
    double lambda_plus = 0.0;
    double lambda_minus = 0.0;
    Matrix logits;
    Matrix probs;
    Vector outputs;
    Matrix rho_attn;
};

struct TrainTrace {
    std::vector<TracePoint> points;
    std::vector<int> clean_idx;
    std::vector<int> noisy_idx;
    std::vector<int> y_train;
    std::vector<int> y_true;
    long T = 0;

    [[nodiscard]] const TracePoint& final() const { return points.back(); }
    [[nodiscard]] bool empty() const { return points.empty(); }
};

/// Raised when training hits a non-finite value; carries everything logged so far.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const DivergenceError& cause, TrainTrace partial)
        : DivergenceError(cause.what(), cause.step()), trace_(std::move(partial)) {}
    [[nodiscard]] const TrainTrace& trace() const { return trace_; }

private:
    TrainTrace trace_;
};

using TraceHook = std::function<void(const TracePoint&, const ReducedGD&)>;

/// Runs tc.steps steps of the engine, logging at step 0, every log_every steps
/// and at the last step.
inline TrainTrace train(ReducedGD& engine, const Dataset& ds, const SignalBasis& signals, const TrainConfig& tc,
                        const TestSet* test = nullptr, const TraceHook& hook = {}) {
    tc.validate();
    TrainTrace trace;
    trace.clean_idx = ds.clean_idx;
    trace.noisy_idx = ds.noisy_idx;
    trace.T = ds.T();
    for (const Sample& s : ds.samples) {
        trace.y_train.push_back(s.y_train);
        trace.y_true.push_back(s.y_true);
    }
    Matrix sig(2, ds.dim());
    sig.row(0) = signals.mu_plus.transpose();
    sig.row(1) = signals.mu_minus.transpose();
    const Projection sig_proj = engine.project(sig);
    const Projection noise_proj = engine.project(ds.stacked_noise());
    const auto n = static_cast<Eigen::Index>(ds.size());
    const Eigen::Index T = ds.T();

    auto log_point = [&] {
        TracePoint pt;
        pt.step = engine.step_count();
        pt.logits = engine.train_scores();
        pt.probs.resize(n, T);
        pt.outputs.resize(n);
        const Matrix& gamma = engine.token_scores();
        std::vector<double> out(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            pt.probs.row(i) = softmax(pt.logits.row(i).transpose()).transpose();
            pt.outputs(i) = pt.probs.row(i).dot(gamma.row(i));
            out[static_cast<std::size_t>(i)] = pt.outputs(i);
        }
        const Evaluation ev = evaluate_outputs(out, trace.y_train, trace.y_true);
        pt.train_loss = ev.loss;
        pt.train_acc = ev.acc_train;
        pt.train_acc_true = ev.acc_true;
        if (test != nullptr) {
            const Evaluation te = evaluate_outputs(test_outputs(engine, *test), test->labels, test->labels);
            pt.test_acc = te.acc_train;
            pt.test_loss = te.loss;
        }
        const Vector lam = engine.scores(sig_proj);
        pt.lambda_plus = lam(0);
        pt.lambda_minus = lam(1);
        const Vector rho = engine.scores(noise_proj);
        pt.rho_attn = Eigen::Map<const Matrix>(rho.data(), T, n).transpose();
        if (hook) hook(pt, engine);
        trace.points.push_back(std::move(pt));
    };

    try {
        log_point();
        for (long k = 1; k <= tc.steps; ++k) {
            engine.step(tc.alpha);
            if (k % tc.log_every == 0 || k == tc.steps) log_point();
        }
    } catch (const DivergenceError& e) {
        throw TrainingDiverged(e, std::move(trace));
    } catch (const DomainError& e) {
        throw TrainingDiverged(DivergenceError(e.what(), engine.step_count()), std::move(trace));
    }
    return trace;
}

}  // namespace battn
