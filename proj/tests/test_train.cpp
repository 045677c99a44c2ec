#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "relubridge/random.hpp"
#include "relubridge/train.hpp"

using namespace relubridge;

namespace {

Dataset random_dataset(std::size_t n, std::size_t d, std::size_t c, std::uint64_t seed) {
    Dataset data = synth_gaussian(n, d, seed);
    Rng rng(seed + 1);
    for (auto& y : data.labels) y = static_cast<std::uint32_t>(rng.below(c));
    data.classes = c;
    return data;
}

// Mean loss of `net` on all of `data`, from the plain forward pass.
double loss_of(const LayerGraph& net, const Dataset& data) {
    Matrix logits(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(net.output_dim()));
    for (std::size_t i = 0; i < data.size(); ++i)
        logits.row(static_cast<Eigen::Index>(i)) = forward(net, data.input(i)).values.transpose();
    return softmax_cross_entropy(logits, data.labels);
}

void check_gradient(const char* arch_text, std::uint64_t seed) {
    const LayerGraph net = he_init(parse_architecture(arch_text), seed);
    const Dataset data = random_dataset(6, net.input_dim(), net.output_dim(), seed);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const BatchGradient g = backward(net, gather_columns(data, rows), data.labels);
    EXPECT_NEAR(g.loss, loss_of(net, data), 1e-12);

    const auto params = net.parameters();
    std::vector<double> fd(params.size());
    const double h = 1e-6;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto plus = params, minus = params;
        plus[p] += h;
        minus[p] -= h;
        fd[p] = (loss_of(net.with_parameters(plus), data) - loss_of(net.with_parameters(minus), data)) / (2 * h);
    }
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        num += (fd[p] - g.params[p]) * (fd[p] - g.params[p]);
        den += g.params[p] * g.params[p];
    }
    EXPECT_LE(std::sqrt(num / den), 1e-6) << arch_text;
}

}  // namespace

TEST(CrossEntropy, Values) {
    const std::vector<std::uint32_t> y0{0};
    EXPECT_NEAR(softmax_cross_entropy(Matrix::Zero(1, 3), y0), std::log(3.0), 1e-15);
    Matrix l(1, 3);
    l << 1.0, 2.0, 3.0;
    const std::vector<std::uint32_t> y2{2};
    EXPECT_NEAR(softmax_cross_entropy(l, y2), 0.40760596444437466, 1e-14);
    Matrix big(1, 2);
    big << 1000.0, 0.0;
    EXPECT_NEAR(softmax_cross_entropy(big, y0), 0.0, 1e-300);
    const std::vector<std::uint32_t> y1{1};
    EXPECT_NEAR(softmax_cross_entropy(big, y1), 1000.0, 1e-9);
    const std::vector<std::uint32_t> bad{3};
    EXPECT_THROW(softmax_cross_entropy(l, bad), Error);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
    Matrix l(2, 3), g;
    l << 1.0, 2.0, 3.0, -1.0, 0.0, 0.5;
    const std::vector<std::uint32_t> y{2, 0};
    softmax_cross_entropy(l, y, g);
    for (Eigen::Index i = 0; i < 2; ++i) {
        const Eigen::RowVectorXd p = l.row(i).array().exp() / l.row(i).array().exp().sum();
        for (Eigen::Index j = 0; j < 3; ++j)
            EXPECT_NEAR(g(i, j), (p(j) - (static_cast<std::uint32_t>(j) == y[static_cast<std::size_t>(i)])) / 2.0,
                        1e-15);
    }
}

TEST(Backward, MatchesFiniteDifferences) {
    check_gradient("in:4 dense:8 dense:3", 1);
    check_gradient("in:4 dense:8 dense:8 dense:3", 2);
    check_gradient("in:1x4x4 conv:2,3,1,1 dense:3", 3);
    check_gradient("in:5 dense:6 res:4 dense:3", 4);
    check_gradient("in:2x3x3 conv:2,2,1,0 resconv:1 dense:3", 5);
}

TEST(Train, ZeroLearningRateLeavesWeights) {
    const LayerGraph net = he_init(parse_architecture("in:4 dense:8 dense:3"), 1);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 5;
    cfg.epochs = 2;
    const auto result = train(net, random_dataset(20, 4, 3, 1), cfg);
    EXPECT_EQ(result.net.parameters(), net.parameters());
}

TEST(Train, SingleStepIsExactUpdate) {
    const LayerGraph net = he_init(parse_architecture("in:4 dense:8 dense:3"), 2);
    const Dataset data = random_dataset(1, 4, 3, 2);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    const auto result = train(net, data, cfg);
    const std::vector<std::size_t> rows{0};
    const BatchGradient g = backward(net, gather_columns(data, rows), data.labels);
    auto expected = net.parameters();
    for (std::size_t p = 0; p < expected.size(); ++p) expected[p] -= 0.05 * g.params[p];
    EXPECT_EQ(result.net.parameters(), expected);
    ASSERT_EQ(result.log.steps.size(), 1u);
    EXPECT_EQ(result.log.steps[0].loss, g.loss);
}

TEST(Train, MomentumStep) {
    const LayerGraph net = he_init(parse_architecture("in:3 dense:5 dense:2"), 3);
    const Dataset data = random_dataset(1, 3, 2, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.9;
    cfg.epochs = 2;
    const auto result = train(net, data, cfg);
    const std::vector<std::size_t> rows{0};
    auto p = net.parameters();
    std::vector<double> v(p.size(), 0.0);
    LayerGraph cur = net;
    for (int step = 0; step < 2; ++step) {
        const auto g = backward(cur, gather_columns(data, rows), data.labels);
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = 0.9 * v[i] + g.params[i];
            p[i] -= 0.1 * v[i];
        }
        cur = cur.with_parameters(p);
    }
    EXPECT_EQ(result.net.parameters(), p);
}

TEST(Train, Deterministic) {
    const LayerGraph net = he_init(parse_architecture("in:6 dense:10 dense:4"), 4);
    const Dataset data = random_dataset(50, 6, 4, 4);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 3;
    cfg.seed = 99;
    EXPECT_EQ(train(net, data, cfg).net.parameters(), train(net, data, cfg).net.parameters());
    TrainConfig other = cfg;
    other.seed = 100;
    EXPECT_NE(train(net, data, cfg).net.parameters(), train(net, data, other).net.parameters());
}

TEST(Train, ReducesLossOnSeparableData) {
    Dataset data = synth_gaussian(200, 5, 7);
    data.classes = 2;
    for (std::size_t i = 0; i < data.size(); ++i) data.labels[i] = data.inputs(static_cast<Eigen::Index>(i), 0) > 0 ? 1 : 0;
    const LayerGraph net = he_init(parse_architecture("in:5 dense:32 dense:2"), 7);
    TrainConfig cfg;
    cfg.batch_size = 10;
    cfg.epochs = 20;
    const auto result = train(net, data, cfg);
    EXPECT_LT(dataset_loss(result.net, data), 0.5 * dataset_loss(net, data));
    EXPECT_GT(dataset_accuracy(result.net, data), 0.95);
}

TEST(Train, CheckpointSchedule) {
    const LayerGraph net = he_init(parse_architecture("in:3 dense:4 dense:2"), 5);
    TrainConfig cfg;
    cfg.batch_size = 1;
    cfg.epochs = 1;
    cfg.eval_every = 3;
    const auto result = train(net, random_dataset(10, 3, 2, 5), cfg);
    std::vector<std::size_t> steps;
    for (const auto& c : result.log.checkpoints) steps.push_back(c.step);
    EXPECT_EQ(steps, (std::vector<std::size_t>{0, 1, 2, 3, 4, 6, 8, 9, 10}));
    EXPECT_EQ(result.log.checkpoints.front().net.parameters(), net.parameters());
    EXPECT_EQ(result.log.checkpoints.back().net.parameters(), result.net.parameters());
}

TEST(Train, DivergenceCarriesLastGoodCheckpoint) {
    const LayerGraph net = he_init(parse_architecture("in:3 dense:4 dense:2"), 6);
    TrainConfig cfg;
    cfg.learning_rate = 1e300;
    cfg.batch_size = 2;
    cfg.epochs = 5;
    try {
        train(net, random_dataset(10, 3, 2, 6), cfg);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Numeric);
        for (double p : e.last_good().net.parameters()) EXPECT_TRUE(std::isfinite(p));
    }
}

TEST(Train, ConfigValidation) {
    TrainConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.learning_rate = -1.0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.momentum = 1.0;
    EXPECT_THROW(cfg.validate(), Error);
    const LayerGraph net = he_init(parse_architecture("in:3 dense:4 dense:2"), 5);
    EXPECT_THROW(train(net, random_dataset(10, 4, 2, 1), TrainConfig{}), Error);
}
