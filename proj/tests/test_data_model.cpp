#include "benign_attention/data_model.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace battn;

namespace {

DataConfig small_config() {
    DataConfig c;
    c.n = 40;
    c.T = 6;
    c.d = 50;
    c.mu_norm = 3.0;
    c.sigma_eps = 0.5;
    c.eta = 0.2;
    c.rho = 0.2;
    c.n_weak_same = 2;
    return c;
}

}  // namespace

TEST(DataConfig, ValidationNamesTheField) {
    DataConfig c = small_config();
    c.eta = 0.7;
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("$.eta"), std::string::npos);
    }
    c = small_config();
    c.T = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.rho = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.sigma_eps = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DataConfig, JsonRoundTrip) {
    const DataConfig c = small_config();
    EXPECT_EQ(DataConfig::from_json(c.to_json()), c);
}

TEST(DataConfig, UnknownAndMistypedFieldsAreRejected) {
    Json j = small_config().to_json();
    j["bogus"] = 1;
    try {
        (void)DataConfig::from_json(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("$.bogus"), std::string::npos);
    }
    j = small_config().to_json();
    j["d"] = "many";
    EXPECT_THROW((void)DataConfig::from_json(j), ConfigError);
    j = small_config().to_json();
    j.erase("n");
    EXPECT_THROW((void)DataConfig::from_json(j), ConfigError);
}

TEST(Signals, OrthogonalWithRequestedNorm) {
    for (SignalMode mode : {SignalMode::AxisAligned, SignalMode::RandomOrthogonal}) {
        const SignalBasis b = make_signals(300, 7.5, mode, RandomStream(2, "signals"));
        EXPECT_NEAR(b.mu_plus.norm(), 7.5, 1e-12);
        EXPECT_NEAR(b.mu_minus.norm(), 7.5, 1e-12);
        EXPECT_NEAR(b.mu_plus.dot(b.mu_minus), 0.0, 1e-10);
        EXPECT_EQ(&b.signal(1), &b.mu_plus);
        EXPECT_EQ(&b.signal(-1), &b.mu_minus);
    }
}

TEST(Sample, TokensAreSignalPlusNoiseByRole) {
    const DataConfig c = small_config();
    const SignalBasis b = make_signals(c.d, c.mu_norm, SignalMode::RandomOrthogonal, RandomStream(1, "s"));
    RandomStream r(3, "draw");
    for (int k = 0; k < 20; ++k) {
        const Sample s = sample_from_p_star(c, b, r);
        ASSERT_EQ(s.T(), c.T);
        EXPECT_EQ(s.y_train, s.y_true);
        const Vector& own = b.signal(s.y_true);
        const Vector& other = b.signal(-s.y_true);
        EXPECT_LT((s.tokens.row(0) - s.noise.row(0) - own.transpose()).norm(), 1e-12);
        EXPECT_LT((s.tokens.row(1) - s.noise.row(1) - c.rho * other.transpose()).norm(), 1e-12);
        EXPECT_EQ(s.roles[0], TokenRole::Relevant);
        EXPECT_EQ(s.roles[1], TokenRole::WeakConfusing);
        for (long u = 2; u < 2 + c.n_weak_same; ++u) {
            EXPECT_EQ(s.roles[static_cast<std::size_t>(u)], TokenRole::WeakSame);
            EXPECT_LT((s.tokens.row(u) - s.noise.row(u) - c.rho * own.transpose()).norm(), 1e-12);
        }
        for (long u = 2 + c.n_weak_same; u < c.T; ++u) {
            EXPECT_EQ(s.roles[static_cast<std::size_t>(u)], TokenRole::Irrelevant);
            EXPECT_EQ(s.tokens.row(u), s.noise.row(u));
        }
    }
}

TEST(Sample, NoNoiseGivesExactSignals) {
    DataConfig c = small_config();
    c.sigma_eps = 0.0;
    const SignalBasis b = make_signals(c.d, c.mu_norm, SignalMode::AxisAligned, RandomStream(1, "s"));
    RandomStream r(4, "draw");
    const Sample s = sample_from_p_star(c, b, r);
    EXPECT_EQ(s.noise.norm(), 0.0);
    EXPECT_EQ(s.tokens.row(0).transpose(), b.signal(s.y_true));
}

TEST(Dataset, NoLabelNoiseWhenEtaIsZero) {
    DataConfig c = small_config();
    c.eta = 0.0;
    const SignalBasis b = make_signals(c.d, c.mu_norm, SignalMode::RandomOrthogonal, RandomStream(1, "s"));
    const Dataset ds = generate_dataset(c, b, RandomStream(5, "data"));
    for (const Sample& s : ds.samples) EXPECT_EQ(s.y_train, s.y_true);
    EXPECT_TRUE(ds.noisy_idx.empty());
    EXPECT_EQ(ds.clean_idx.size(), ds.size());
}

TEST(Dataset, IndexSetsPartitionTheSamples) {
    DataConfig c = small_config();
    c.n = 400;
    c.d = 10;
    const SignalBasis b = make_signals(c.d, c.mu_norm, SignalMode::RandomOrthogonal, RandomStream(1, "s"));
    const Dataset ds = generate_dataset(c, b, RandomStream(6, "data"));
    EXPECT_EQ(ds.clean_idx.size() + ds.noisy_idx.size(), ds.size());
    EXPECT_EQ(ds.clean_pos.size() + ds.clean_neg.size(), ds.clean_idx.size());
    EXPECT_EQ(ds.noisy_pos.size() + ds.noisy_neg.size(), ds.noisy_idx.size());
    for (int j : ds.noisy_idx) EXPECT_EQ(ds.samples[static_cast<std::size_t>(j)].y_train, -ds.samples[static_cast<std::size_t>(j)].y_true);
    // binomial(400, 0.2): mean 80, sd 8
    EXPECT_NEAR(static_cast<double>(ds.noisy_idx.size()), 80.0, 32.0);
}

TEST(Dataset, SameSeedSameData) {
    const DataConfig c = small_config();
    const SignalBasis b = make_signals(c.d, c.mu_norm, SignalMode::RandomOrthogonal, RandomStream(1, "s"));
    const Dataset a = generate_dataset(c, b, RandomStream(8, "data"));
    const Dataset z = generate_dataset(c, b, RandomStream(8, "data"));
    EXPECT_EQ(a.stacked_tokens(), z.stacked_tokens());
    EXPECT_EQ(a.noisy_idx, z.noisy_idx);
}

TEST(DerivedQuantities, SnrAndReferenceVariance) {
    DataConfig c;
    c.n = 20;
    c.T = 8;
    c.d = 1000;
    c.mu_norm = 100.0;
    c.sigma_eps = 1.0;
    EXPECT_NEAR(snr(c), 100.0 / std::sqrt(1000.0), 1e-12);
    EXPECT_NEAR(c.n * snr(c) * snr(c), 200.0, 1e-9);
    const double lf = std::log(160.0 / 0.01);
    EXPECT_NEAR(log_factor(c, 0.01), lf, 1e-12);
    EXPECT_NEAR(signal_noise_scale(c), std::max(100.0 * std::sqrt(1000.0), 1000.0), 1e-9);
    EXPECT_NEAR(reference_init_variance(c, 0.01), 1.0 / (100.0 * std::sqrt(1000.0) * lf * lf), 1e-15);
    c.sigma_eps = 0.0;
    EXPECT_THROW((void)snr(c), DomainError);
}

TEST(Assumptions, ReportListsEveryConditionWithMargins) {
    const DataConfig c;  // d=2000, mu=20
    const double sd = std::sqrt(reference_init_variance(c, 0.01));
    const AssumptionReport rep = check_assumptions(c, {sd, sd, 5e-3}, 1.0, 0.01);
    for (const char* name : {"A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8_w", "A8_p"}) EXPECT_NO_THROW((void)rep.at(name));
    EXPECT_TRUE(rep.at("A8_w").holds);
    EXPECT_TRUE(rep.at("A8_p").holds);
    EXPECT_TRUE(rep.at("A7").asymptotic_only);
    // alpha = 5e-3 against 1 / max{20 sqrt(2000), 2000} = 5e-4
    EXPECT_NEAR(rep.at("A4").upper, 1.0 / 2000.0, 1e-15);
    EXPECT_FALSE(rep.at("A4").holds);
    const AssumptionReport off = check_assumptions(c, {sd * 10.0, sd, 5e-3}, 1.0, 0.01, 10.0);
    EXPECT_FALSE(off.at("A8_w").holds);
    EXPECT_EQ(rep.to_json()["checks"].size(), 9U);
}
