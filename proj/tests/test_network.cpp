#include <gtest/gtest.h>

#include <cmath>

#include "reference.hpp"
#include "relubridge/network.hpp"
#include "relubridge/random.hpp"

using namespace relubridge;

namespace {

LayerGraph one_unit_net() {
    WeightMatrix w1(1, 1), w2(1, 1);
    w1 << 1.0;
    w2 << 1.0;
    return dense_graph({w1, w2});
}

Vector random_input(std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Vector x(static_cast<Eigen::Index>(d));
    for (auto& v : x) v = rng.normal();
    return x;
}

const char* kGraphs[] = {
    "in:5 dense:7 dense:3",
    "in:4 dense:6 dense:6 dense:6 dense:2",
    "in:1x6x6 conv:3,3,1,1 dense:4",
    "in:2x5x5 conv:4,3,2,1 conv:2,2,1,0 dense:3",
    "in:6 dense:8 res:5 res:3 dense:2",
    "in:2x4x4 conv:3,3,1,1 resconv:3 dense:5",
};

}  // namespace

TEST(Network, OneUnitPassThroughAndCut) {
    const LayerGraph net = one_unit_net();
    EXPECT_EQ(forward(net, Vector::Constant(1, 2.0)).values(0), 2.0);
    EXPECT_EQ(forward(net, Vector::Constant(1, -3.0)).values(0), 0.0);
    EXPECT_EQ(capture_pattern(net, Vector::Constant(1, 2.0)).sites[0][0], 1);
    EXPECT_EQ(capture_pattern(net, Vector::Constant(1, -3.0)).sites[0][0], 0);
}

TEST(Network, ZeroPreactivationIsActive) {
    const LayerGraph net = one_unit_net();
    EXPECT_EQ(capture_pattern(net, Vector::Constant(1, 0.0)).sites[0][0], 1);
    EXPECT_EQ(capture_pattern(net, Vector::Constant(1, -0.0)).sites[0][0], 1);
}

TEST(Network, HeInitVariance) {
    const LayerGraph net = he_init(mlp_architecture(784, 100, 10), 1);
    const auto& w = std::get<DenseLayer>(net.layers()[0]).weights;
    const double mean = w.mean();
    const double var = (w.array() - mean).square().sum() / static_cast<double>(w.size() - 1);
    EXPECT_NEAR(var, 2.0 / 784.0, 0.05 * 2.0 / 784.0);
    const auto& w2 = std::get<DenseLayer>(net.layers()[1]).weights;
    const double var2 = w2.array().square().mean();
    EXPECT_NEAR(var2, 2.0 / 100.0, 0.15 * 2.0 / 100.0);
}

TEST(Network, HeInitDeterministic) {
    const auto arch = parse_architecture("in:1x6x6 conv:4,3,2,1 res:8 dense:10");
    EXPECT_EQ(he_init(arch, 7).parameters(), he_init(arch, 7).parameters());
    EXPECT_NE(he_init(arch, 7).parameters(), he_init(arch, 8).parameters());
}

TEST(Network, ZeroWidthRejected) {
    EXPECT_THROW(parse_architecture("in:784 dense:0 dense:10"), Error);
    EXPECT_THROW(he_init(mlp_architecture(784, 0, 10), 1), Error);
    try {
        he_init(mlp_architecture(784, 0, 10), 1);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
}

TEST(Network, ArchitectureParsing) {
    const auto arch = parse_architecture("in:2x4x4 conv:3,3,1,1 resconv:3 res:5 dense:5");
    EXPECT_EQ(arch.input_dim(), 32u);
    EXPECT_EQ(arch.layers.size(), 4u);
    EXPECT_EQ(parse_architecture(to_string(arch)).layers.size(), 4u);
    EXPECT_THROW(parse_architecture("dense:10"), Error);
    EXPECT_THROW(parse_architecture("in:4 dense:3 conv:2,1,1,0"), Error);
    EXPECT_THROW(parse_architecture("in:4 pool:2 dense:3"), Error);
    EXPECT_THROW(parse_architecture("in:1x4x4 resconv:2 dense:3"), Error);
    EXPECT_THROW(parse_architecture("in:4 dense:x"), Error);
}

TEST(Network, ShapeMismatchRejected) {
    WeightMatrix a(3, 2), b(2, 4);
    a.setOnes();
    b.setOnes();
    EXPECT_THROW(dense_graph({a, b}), Error);
    const LayerGraph net = he_init(mlp_architecture(4, 3, 2), 1);
    EXPECT_THROW(forward(net, Vector::Zero(5)), Error);
}

TEST(Network, MatchesReferenceEvaluator) {
    for (std::size_t g = 0; g < std::size(kGraphs); ++g) {
        const LayerGraph net = he_init(parse_architecture(kGraphs[g]), 100 + g);
        for (std::uint64_t s = 0; s < 5; ++s) {
            const Vector x = random_input(net.input_dim(), s);
            const auto ref = reference::forward<long double>(net, {x.data(), x.data() + x.size()});
            const OutputVector f = forward(net, x);
            ASSERT_EQ(f.size(), ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i)
                EXPECT_NEAR(f.values(static_cast<Eigen::Index>(i)), static_cast<double>(ref[i]), 1e-12)
                    << kGraphs[g];
        }
    }
}

TEST(Network, ForwardEqualsFixedPatternForwardExactly) {
    for (std::size_t g = 0; g < std::size(kGraphs); ++g) {
        const LayerGraph net = he_init(parse_architecture(kGraphs[g]), 200 + g);
        for (std::uint64_t s = 0; s < 5; ++s) {
            const Vector x = random_input(net.input_dim(), 50 + s);
            const Vector f = forward(net, x).values;
            const Vector fixed = forward_fixed(net, x, capture_pattern(net, x)).values;
            for (Eigen::Index i = 0; i < f.size(); ++i) EXPECT_EQ(f(i), fixed(i));
        }
    }
}

TEST(Network, FixedPatternIsLinear) {
    const LayerGraph net = he_init(parse_architecture("in:2x5x5 conv:4,3,2,1 res:6 dense:3"), 9);
    const Vector x = random_input(net.input_dim(), 1);
    const Vector z = random_input(net.input_dim(), 2);
    const ActivationPattern p = capture_pattern(net, x);
    const Vector a = forward_fixed(net, 2.5 * z, p).values;
    const Vector b = 2.5 * forward_fixed(net, z, p).values;
    EXPECT_LE((a - b).norm(), 1e-12 * b.norm());
}

TEST(Network, AllOnesPatternIsMatrixProduct) {
    const LayerGraph net = he_init(mlp_architecture(4, 6, 3), 3);
    ActivationPattern ones = net.empty_pattern();
    for (auto& site : ones.sites) std::fill(site.begin(), site.end(), 1);
    const Vector z = random_input(4, 5);
    const auto& w1 = std::get<DenseLayer>(net.layers()[0]).weights;
    const auto& w2 = std::get<DenseLayer>(net.layers()[1]).weights;
    const Vector expected = w2 * (w1 * z);
    EXPECT_LE((forward_fixed(net, z, ones).values - expected).norm(), 1e-13 * expected.norm());
}

TEST(Network, ParameterRoundTrip) {
    for (const char* text : kGraphs) {
        const LayerGraph net = he_init(parse_architecture(text), 4);
        const auto params = net.parameters();
        EXPECT_EQ(params.size(), net.parameter_count());
        const LayerGraph copy = net.with_parameters(params);
        EXPECT_EQ(copy.parameters(), params);
        const Vector x = random_input(net.input_dim(), 3);
        EXPECT_EQ(forward(copy, x).values, forward(net, x).values);
    }
}

TEST(Network, ConvLayerParameterPerturbationMatchesReference) {
    // A perturbed kernel entry must reach every induced-matrix position it occupies.
    const LayerGraph net = he_init(parse_architecture("in:1x5x5 conv:2,3,1,1 dense:2"), 8);
    auto params = net.parameters();
    params[4] += 0.75;
    const LayerGraph moved = net.with_parameters(params);
    const Vector x = random_input(25, 4);
    const auto ref = reference::forward<long double>(moved, reference::to_std<long double>(x));
    const Vector f = forward(moved, x).values;
    for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(f(static_cast<Eigen::Index>(i)), static_cast<double>(ref[i]), 1e-12);
}

TEST(Network, NormalizeOutput) {
    Vector v(2);
    v << 3.0, 4.0;
    const OutputVector n = normalize_output(OutputVector(v));
    EXPECT_DOUBLE_EQ(n.values(0), 0.6);
    EXPECT_DOUBLE_EQ(n.values(1), 0.8);
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        Vector r(7);
        for (auto& e : r) e = rng.normal() * std::pow(10.0, i - 10);
        EXPECT_NEAR(normalize_output(OutputVector(r)).values.norm(), 1.0, 1e-12);
    }
    EXPECT_THROW(normalize_output(OutputVector(Vector::Zero(2))), Error);
}

TEST(Network, OutputNormIsCached) {
    Vector v(3);
    v << 1.0, -2.0, 2.0;
    EXPECT_NEAR(OutputVector(v).norm, 3.0, 3e-12);
}

TEST(Network, PatternDifference) {
    const LayerGraph net = he_init(mlp_architecture(3, 5, 2), 1);
    ActivationPattern a = net.empty_pattern(), b = net.empty_pattern();
    b.sites[0][3] = 1;
    const auto diff = pattern_difference(a, b);
    ASSERT_EQ(diff.size(), 1u);
    EXPECT_EQ(diff[0].unit, 3u);
    EXPECT_EQ(a.unit_count(), 5u);
}

TEST(Network, Argmax) {
    Vector v(4);
    v << 1.0, 5.0, 5.0, -2.0;
    EXPECT_EQ(argmax(v), 1u);
}
