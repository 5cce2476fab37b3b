#include "benign_attention/experiments.hpp"

#include <gtest/gtest.h>

using namespace battn;

namespace {

struct Instance {
    Dataset ds;
    ModelState st;
    SignalBasis signals;
};

Instance instance(std::uint64_t seed, long n, long T, long d, double sigma = 0.5) {
    Instance in;
    DataConfig c;
    c.n = n;
    c.T = T;
    c.d = d;
    c.mu_norm = 2.0;
    c.sigma_eps = 0.6;
    c.eta = 0.3;
    c.rho = 0.3;
    const RandomStream r(seed, "trainer-test");
    in.signals = make_signals(d, c.mu_norm, SignalMode::RandomOrthogonal, r.split("signals"));
    in.ds = generate_dataset(c, in.signals, r.split("data"));
    init_params(d, sigma, sigma, r.split("init"), in.st.W, in.st.p);
    in.st.nu = make_head(in.signals, {HeadRule::Unit, 0.0});
    return in;
}

}  // namespace

TEST(Gradients, MatchFiniteDifferencesOnRandomInstances) {
    for (std::uint64_t k = 0; k < 20; ++k) {
        Dataset ds;
        ModelState st;
        random_small_instance(RandomStream(100 + k, "grad"), 4, 3, 8, ds, st);
        const Gradients g = gradients(ds, st);
        const Gradients fd = finite_diff_grad(ds, st, 1e-5);
        EXPECT_LE(max_relative_error(g.W, fd.W), 1e-6) << "instance " << k;
        EXPECT_LE(max_relative_error(g.p, fd.p), 1e-6) << "instance " << k;
        EXPECT_EQ(grad_w(ds, st), g.W);
        EXPECT_EQ(grad_p(ds, st), g.p);
    }
}

TEST(Gradients, FactorThroughTheQueryGradient) {
    const Instance in = instance(3, 5, 4, 12);
    const Vector v = query_gradient(in.ds, in.st);
    const Gradients g = gradients(in.ds, in.st);
    EXPECT_LT((g.W - in.st.p * v.transpose()).norm(), 1e-15);
    EXPECT_LT((g.p - in.st.W * v).norm(), 1e-15);
}

TEST(Gradients, ZeroHeadGivesZeroGradient) {
    Instance in = instance(4, 5, 4, 12);
    in.st.nu.setZero();
    const Gradients g = gradients(in.ds, in.st);
    EXPECT_EQ(g.W.norm(), 0.0);
    EXPECT_EQ(g.p.norm(), 0.0);
}

TEST(GdStep, UpdatesBothParametersFromTheIncomingState) {
    const Instance in = instance(5, 5, 4, 12);
    const Gradients g = gradients(in.ds, in.st);
    const ModelState next = gd_step(in.st, in.ds, 0.1);
    EXPECT_LT((next.W - (in.st.W - 0.1 * g.W)).norm(), 1e-15);
    EXPECT_LT((next.p - (in.st.p - 0.1 * g.p)).norm(), 1e-15);
    EXPECT_EQ(next.nu, in.st.nu);
}

TEST(MulticlassGradients, MatchFiniteDifferences) {
    for (std::uint64_t k = 0; k < 5; ++k) {
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
        const RandomStream r(k, "mc");
        const Matrix mu = make_class_signals(8, 3, 1.5, SignalMode::RandomOrthogonal, r.split("signals"));
        const Dataset ds = generate_multiclass(mc, mu, r.split("data"));
        MulticlassState st;
        init_params(8, 0.5, 0.5, r.split("init"), st.W, st.p);
        st.WV = Matrix::Random(8, 3);
        const MulticlassResult g = multiclass_loss_and_grads(ds, st);
        const MulticlassResult fd = multiclass_finite_diff(ds, st);
        EXPECT_NEAR(g.loss, fd.loss, 1e-14);
        EXPECT_LE(max_relative_error(g.grad_W, fd.grad_W), 1e-6);
        EXPECT_LE(max_relative_error(g.grad_p, fd.grad_p), 1e-6);
        EXPECT_LE(max_relative_error(g.grad_WV, fd.grad_WV), 1e-6);
    }
}

TEST(Multiclass, SignalsAndLabelNoise) {
    const Matrix mu = make_class_signals(20, 4, 2.0, SignalMode::RandomOrthogonal, RandomStream(1, "mu"));
    const Matrix gram = mu.transpose() * mu;
    EXPECT_LT((gram - 4.0 * Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
    MulticlassConfig mc;
    mc.n = 2000;
    mc.K = 4;
    mc.d = 20;
    mc.eta = 0.3;
    const Dataset ds = generate_multiclass(mc, mu, RandomStream(2, "data"));
    long flipped = 0;
    for (const Sample& s : ds.samples) {
        ASSERT_GE(s.y_true, 0);
        ASSERT_LT(s.y_true, 4);
        flipped += s.y_train != s.y_true ? 1 : 0;
    }
    EXPECT_NEAR(static_cast<double>(flipped) / 2000.0, 0.3, 0.04);
}

// The reduced engine must reproduce dense gradient descent exactly, both when
// the tokens span fewer than d directions and when they span all of R^d.
class ReducedVsDense : public ::testing::TestWithParam<std::tuple<long, long, long>> {};

TEST_P(ReducedVsDense, TrajectoriesAgree) {
    const auto [n, T, d] = GetParam();
    const Instance in = instance(11, n, T, d, 0.4);
    ReducedGD engine(in.ds, in.st.nu, in.st.W, in.st.p);
    ModelState dense = in.st;
    for (int k = 0; k < 60; ++k) {
        dense = gd_step(dense, in.ds, 0.2);
        engine.step(0.2);
    }
    EXPECT_EQ(engine.step_count(), 60);
    EXPECT_LE(max_relative_error(engine.p(), dense.p, 1e-10), 1e-9);
    EXPECT_LE(max_relative_error(engine.query(), dense.query(), 1e-10), 1e-9);
    EXPECT_LE(max_relative_error(engine.materialize_W(), dense.W, 1e-10), 1e-9);
    Matrix logits(n, T);
    for (long i = 0; i < n; ++i) logits.row(i) = (in.ds.samples[static_cast<std::size_t>(i)].tokens * dense.query()).transpose();
    EXPECT_LE(max_relative_error(engine.train_scores(), logits, 1e-10), 1e-9);
    const Matrix probe = Matrix::Random(3, d);
    EXPECT_LE(max_relative_error(engine.scores(engine.project(probe)), probe * dense.query(), 1e-10), 1e-9);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ReducedVsDense,
                         ::testing::Values(std::make_tuple(3L, 4L, 40L), std::make_tuple(4L, 3L, 8L), std::make_tuple(6L, 5L, 30L)));

TEST(ReducedGD, StreamingInitMatchesInitParams) {
    const Instance in = instance(12, 3, 4, 300);
    const RandomStream r(77, "init");
    Matrix W;
    Vector p;
    init_params(300, 0.05, 0.07, r, W, p);
    const ReducedGD dense_start(in.ds, in.st.nu, W, p);
    const ReducedGD streamed(in.ds, in.st.nu, 0.05, 0.07, r);
    EXPECT_EQ(streamed.p(), p);
    EXPECT_LE(max_relative_error(streamed.query(), dense_start.query(), 1e-12), 1e-10);
    EXPECT_THROW((void)streamed.materialize_W(), std::logic_error);
}

TEST(ReducedGD, RejectsMismatchedShapes) {
    const Instance in = instance(13, 3, 4, 20);
    EXPECT_THROW(ReducedGD(in.ds, Vector::Zero(19), in.st.W, in.st.p), DimensionError);
    EXPECT_THROW(ReducedGD(in.ds, in.st.nu, Matrix::Zero(19, 19), in.st.p), DimensionError);
}

TEST(TestSet, ThreadCountDoesNotChangeIt) {
    DataConfig c;
    c.n = 4;
    c.T = 5;
    c.d = 60;
    c.mu_norm = 3.0;
    const SignalBasis b = make_signals(60, 3.0, SignalMode::RandomOrthogonal, RandomStream(1, "s"));
    const Dataset ds = generate_dataset(c, b, RandomStream(2, "data"));
    const ReducedGD engine(ds, make_head(b), 0.1, 0.1, RandomStream(3, "init"));
    const TestSet a = make_test_set(engine, c, b, 100, RandomStream(4, "test"), 1);
    const TestSet z = make_test_set(engine, c, b, 100, RandomStream(4, "test"), 8);
    EXPECT_EQ(a.labels, z.labels);
    EXPECT_EQ(a.tokens.on_q, z.tokens.on_q);
    EXPECT_EQ(a.gamma, z.gamma);
    // first sample rebuilt directly
    RandomStream r = RandomStream(4, "test").split(std::uint64_t{0});
    const Sample s = sample_from_p_star(c, b, r);
    const Vector direct_out = s.tokens * engine.query();
    const Vector via = engine.scores(a.tokens).head(5);
    EXPECT_LE(max_relative_error(via, direct_out, 1e-12), 1e-10);
}

TEST(Train, LogsStartEveryIntervalAndLastStep) {
    const Instance in = instance(14, 6, 4, 30);
    ReducedGD engine(in.ds, in.st.nu, in.st.W, in.st.p);
    TrainConfig tc;
    tc.alpha = 0.05;
    tc.steps = 25;
    tc.log_every = 10;
    const TrainTrace tr = train(engine, in.ds, in.signals, tc);
    std::vector<long> steps;
    for (const auto& pt : tr.points) steps.push_back(pt.step);
    EXPECT_EQ(steps, (std::vector<long>{0, 10, 20, 25}));
    for (const auto& pt : tr.points) {
        EXPECT_NEAR(pt.probs.rowwise().sum().maxCoeff(), 1.0, 1e-12);
        EXPECT_TRUE(all_finite(pt.logits));
    }
}

TEST(Train, ZeroStepsGivesOneRow) {
    const Instance in = instance(15, 6, 4, 30);
    ReducedGD engine(in.ds, in.st.nu, in.st.W, in.st.p);
    TrainConfig tc;
    tc.steps = 0;
    const TrainTrace tr = train(engine, in.ds, in.signals, tc);
    ASSERT_EQ(tr.points.size(), 1U);
    EXPECT_EQ(tr.points[0].step, 0);
}

TEST(Train, TraceDiagnosticsMatchDenseRecomputation) {
    const Instance in = instance(16, 5, 4, 25);
    ReducedGD engine(in.ds, in.st.nu, in.st.W, in.st.p);
    TrainConfig tc;
    tc.alpha = 0.1;
    tc.steps = 30;
    tc.log_every = 30;
    const TrainTrace tr = train(engine, in.ds, in.signals, tc);
    ModelState dense = in.st;
    for (int k = 0; k < 30; ++k) dense = gd_step(dense, in.ds, 0.1);
    const TracePoint& f = tr.final();
    const Vector q = dense.query();
    EXPECT_NEAR(f.lambda_plus, in.signals.mu_plus.dot(q), 1e-10);
    EXPECT_NEAR(f.lambda_minus, in.signals.mu_minus.dot(q), 1e-10);
    for (std::size_t i = 0; i < in.ds.size(); ++i) {
        const Vector rho = in.ds.samples[i].noise * q;
        for (long t = 0; t < 4; ++t) EXPECT_NEAR(f.rho_attn(static_cast<Eigen::Index>(i), t), rho(t), 1e-10);
    }
    EXPECT_NEAR(f.train_loss, empirical_loss(in.ds, dense), 1e-12);
}

TEST(Train, DivergenceKeepsThePartialTrace) {
    const Instance in = instance(17, 5, 4, 25);
    ReducedGD engine(in.ds, in.st.nu, in.st.W, in.st.p);
    TrainConfig tc;
    tc.alpha = 1e300;
    tc.steps = 50;
    tc.log_every = 1;
    try {
        (void)train(engine, in.ds, in.signals, tc);
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        EXPECT_FALSE(e.trace().empty());
        EXPECT_EQ(e.trace().points.front().step, 0);
        EXPECT_GE(e.step(), 0);
    }
}

TEST(TrainConfig, RejectsBadValues) {
    TrainConfig tc;
    tc.alpha = 0.0;
    EXPECT_THROW(tc.validate(), ConfigError);
    tc = {};
    tc.log_every = 0;
    EXPECT_THROW(tc.validate(), ConfigError);
    tc = {};
    tc.steps = -1;
    EXPECT_THROW(tc.validate(), ConfigError);
}
