#include <gtest/gtest.h>

#include <cmath>

#include "relubridge/random.hpp"
#include "relubridge/stats.hpp"

using namespace relubridge;

namespace {

// Profile with one output component and the given gradients R_0..R_K at
// evenly spaced nodes.
PathProfile synthetic_profile(const std::vector<double>& r) {
    PathProfile p;
    const auto n = static_cast<Eigen::Index>(r.size());
    p.gradients.resize(n, 1);
    p.offsets = Matrix::Zero(n, 1);
    p.slopes = Matrix::Zero(n, 1);
    for (Eigen::Index k = 0; k < n; ++k) p.gradients(k, 0) = r[static_cast<std::size_t>(k)];
    for (std::size_t k = 1; k < r.size(); ++k)
        p.nodes.push_back({static_cast<double>(k) / static_cast<double>(r.size()), {0, k - 1}});
    return p;
}

OutputVector unit_output(std::vector<double> v) {
    Vector x = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    return normalize_output(OutputVector(x));
}

}  // namespace

TEST(GapSigma, Examples) {
    EXPECT_DOUBLE_EQ(empirical_gap_sigma({1.0, -1.0}).sigma, 1.0);
    Rng rng(2);
    std::vector<double> g, neg;
    for (int i = 0; i < 100; ++i) {
        g.push_back(rng.normal() * 0.3 + 0.1);
        neg.push_back(-g.back());
    }
    EXPECT_EQ(empirical_gap_sigma(g).sigma, empirical_gap_sigma(neg).sigma);
    EXPECT_THROW(empirical_gap_sigma({1.0}), Error);
}

TEST(BridgeTheory, Examples) {
    EXPECT_EQ(bridge_deviation_theory(0, 100, 1.0), 0.0);
    EXPECT_EQ(bridge_deviation_theory(100, 100, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(bridge_deviation_theory(50, 100, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(bridge_midpoint_deviation(1.0, 100), 5.0);
    for (std::size_t K : {1u, 7u, 100u, 1001u})
        for (std::size_t k = 0; k <= K; ++k)
            EXPECT_EQ(bridge_deviation_theory(k, K, 0.37), bridge_deviation_theory(K - k, K, 0.37));
    EXPECT_THROW(bridge_deviation_theory(3, 2, 1.0), Error);
}

TEST(BridgeSimulate, FourStepMidpointVariance) {
    const BridgeStats s = bridge_simulate(gaussian_increments(1.0), 4, {0.0, 0.0}, 100'000, 1);
    EXPECT_TRUE(s.endpoints_pinned);
    EXPECT_LE(std::abs(s.empirical_variance[2] - 1.0), 3.0 * s.variance_se[2]);
    EXPECT_EQ(s.empirical_variance[0], 0.0);
    EXPECT_EQ(s.empirical_variance[4], 0.0);
}

TEST(BridgeSimulate, IndependentOfThreadCount) {
    const auto a = bridge_simulate(gaussian_increments(1.0), 10, {0.0, 0.0}, 20'000, 9, 1);
    const auto b = bridge_simulate(gaussian_increments(1.0), 10, {0.0, 0.0}, 20'000, 9, 3);
    EXPECT_EQ(a.empirical_variance, b.empirical_variance);
    EXPECT_EQ(a.mean, b.mean);
}

TEST(BridgeSimulate, NonzeroStartStillPinned) {
    const auto s = bridge_simulate(gaussian_increments(2.0), 8, {5.0, 0.0}, 5'000, 4);
    EXPECT_TRUE(s.endpoints_pinned);
    EXPECT_LE(std::abs(s.empirical_variance[4] - 4.0 * 2.0), 4.0 * s.variance_se[4]);
}

TEST(BridgeSimulate, NonGaussianIncrements) {
    // Uniform increments on [-a, a] have variance a^2 / 3.
    const IncrementSampler uniform{[](Rng& rng) { return 2.0 * rng.uniform() - 1.0; }, std::sqrt(1.0 / 3.0)};
    const auto s = bridge_simulate(uniform, 20, {0.0, 0.0}, 50'000, 8);
    for (std::size_t k = 0; k <= 20; ++k) {
        const double theory = std::pow(s.deviation_profile[k], 2);
        EXPECT_LE(std::abs(s.empirical_variance[k] - theory), 4.0 * s.variance_se[k] + 1e-15) << k;
    }
}

TEST(TheoryValues, MidpointDeviation) {
    EXPECT_NEAR(midpoint_deviation_theory_2layer(100, 784), 0.0357142857142857, 1e-15);
    EXPECT_NEAR(midpoint_deviation_theory_2layer(100, 3072), 0.018042195912175804, 1e-15);
    EXPECT_EQ(midpoint_deviation_theory_2layer(64, 784), midpoint_deviation_theory_2layer(4096, 784));
}

TEST(TheoryValues, GapVariance) {
    EXPECT_NEAR(gap_variance_theory(1, 100, 784), 5.102040816326531e-05, 1e-18);
    EXPECT_DOUBLE_EQ(gap_variance_theory(2, 100, 0), 4.0e-4);
    EXPECT_THROW(gap_variance_theory(0, 100, 784), Error);
}

TEST(NodeCountCheck, AcceptsBinomialSamples) {
    Rng rng(12);
    for (std::size_t m : {16u, 64u, 128u}) {
        std::vector<std::size_t> counts;
        for (int t = 0; t < 2000; ++t) {
            std::size_t k = 0;
            for (std::size_t u = 0; u < m; ++u) k += rng.below(2);
            counts.push_back(k);
        }
        const auto c = node_count_check(counts, m);
        EXPECT_LT(std::abs(c.z_mean), 3.0) << m;
        EXPECT_LT(std::abs(c.z_variance), 3.0) << m;
        EXPECT_GT(c.p_value, 0.01) << m;
    }
}

TEST(NodeCountCheck, RejectsOverdispersedSamples) {
    // Success probability drawn per trial from 1/2 +- 0.1 inflates the variance.
    Rng rng(13);
    std::vector<std::size_t> counts;
    for (int t = 0; t < 2000; ++t) {
        const double p = 0.4 + 0.2 * rng.uniform();
        std::size_t k = 0;
        for (std::size_t u = 0; u < 128; ++u) k += rng.uniform() < p ? 1 : 0;
        counts.push_back(k);
    }
    const auto c = node_count_check(counts, 128);
    EXPECT_GT(c.z_variance, 3.0);
    EXPECT_LT(c.p_value, 0.01);
}

TEST(NodeCountCheck, DegenerateWidth) {
    std::vector<std::size_t> counts;
    for (int i = 0; i < 100; ++i) counts.push_back(static_cast<std::size_t>(i % 2));
    const auto c = node_count_check(counts, 1);
    EXPECT_DOUBLE_EQ(c.mean, 0.5);
    EXPECT_THROW(node_count_check(std::vector<std::size_t>(10, 1), 1), Error);
}

TEST(Deflection, Examples) {
    EXPECT_DOUBLE_EQ(*deflection_midpoint(synthetic_profile({0.0, 1.0, 0.0}), 0), 1.0);
    EXPECT_DOUBLE_EQ(*deflection_midpoint(synthetic_profile({2.0, 2.0, 2.0, 2.0}), 0), 0.0);
    EXPECT_NEAR(*deflection_midpoint(synthetic_profile({0.0, 0.25, 0.5, 0.75, 1.0}), 0), 0.0, 1e-15);
    EXPECT_FALSE(deflection_midpoint(synthetic_profile({1.0}), 0).has_value());
    EXPECT_DOUBLE_EQ(*deflection_at(synthetic_profile({0.0, 1.0, 0.0}), 0, 0.5), 1.0);
}

TEST(GapDeviation, Examples) {
    EXPECT_EQ(*gap_deviation_mid(synthetic_profile({0.0, 1.0})), 0.0);
    const std::vector<PathProfile> single{synthetic_profile({0.0, 1.0})};
    EXPECT_EQ(gap_deviation_empirical(single), 0.0);
    EXPECT_THROW(gap_deviation_empirical(std::vector<PathProfile>{}), Error);
    // Gaps [1, -1, 1, -1]: sigma = 1, k* = 2, K = 4 -> sqrt(2 * 2 / 4) = 1.
    EXPECT_DOUBLE_EQ(*gap_deviation_mid(synthetic_profile({0.0, 1.0, 0.0, 1.0, 0.0})), 1.0);
}

TEST(GapDeviation, ScaleEquivariance) {
    Rng rng(4);
    std::vector<double> r{0.0};
    for (int i = 0; i < 30; ++i) r.push_back(r.back() + rng.normal());
    std::vector<double> scaled;
    for (double v : r) scaled.push_back(3.0 * v);
    const auto a = synthetic_profile(r), b = synthetic_profile(scaled);
    EXPECT_NEAR(*gap_deviation_mid(b), 3.0 * *gap_deviation_mid(a), 1e-12);
    EXPECT_NEAR(profile_gap_sigma(b).sigma, 3.0 * profile_gap_sigma(a).sigma, 1e-12);
    EXPECT_NEAR(*deflection_midpoint(b, 0), 3.0 * *deflection_midpoint(a, 0), 1e-12);
}

TEST(Margin, Examples) {
    // 0.9 followed by nineteen entries of 0.1 has unit norm.
    std::vector<double> padded(20, 0.1);
    padded[0] = 0.9;
    const OutputVector f = unit_output(padded);
    EXPECT_NEAR(margin(f, 0), 0.8, 1e-12);
    const OutputVector g = unit_output({0.9, 0.1, 0.0});
    EXPECT_LT(margin(g, 1), 0.0);
    EXPECT_GE(margin(g, argmax(g.values)), 0.0);
    EXPECT_THROW(margin(g, 3), Error);
    Vector raw(2);
    raw << 3.0, 4.0;
    EXPECT_THROW(margin(OutputVector(raw), 0), Error);
}

TEST(PairStats, MarginAndFluctuation) {
    EXPECT_DOUBLE_EQ(pair_margin(0.4, 0.6), 0.5);
    EXPECT_DOUBLE_EQ(pair_margin(0.3, 0.3), 0.3);
    EXPECT_EQ(pair_margin(0.1, 0.7), pair_margin(0.7, 0.1));
    Vector u0(3), u1(3), e(3);
    u0 << 1.0, 2.0, 3.0;
    u1 << 3.0, 0.0, -1.0;
    EXPECT_DOUBLE_EQ(pair_fluctuation(u0, u1, 0.5 * (u0 + u1)), 0.0);
    e << 0.0, 3.0, 4.0;
    EXPECT_DOUBLE_EQ(pair_fluctuation(Vector::Zero(3), Vector::Zero(3), e), 5.0);
    EXPECT_THROW(pair_fluctuation(u0, u1, Vector::Zero(2)), Error);
}
