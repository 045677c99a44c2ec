#pragma once

// Minibatch SGD on mean softmax cross-entropy for bias-free ReLU graphs.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "relubridge/data.hpp"
#include "relubridge/network.hpp"

namespace relubridge {

struct TrainConfig {
    double learning_rate = 0.1;
    double momentum = 0.0;  // 0 = vanilla SGD
    std::size_t batch_size = 64;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // extra checkpoints every N steps; 0 = log-spaced only

    void validate() const;
};

struct TrainStep {
    std::size_t step = 0;  // updates applied so far (1-based after the update)
    double loss = 0.0;     // minibatch loss before the update
    double accuracy = 0.0; // minibatch accuracy before the update
};

struct Checkpoint {
    std::size_t step = 0;
    LayerGraph net;
};

struct TrainLog {
    std::vector<TrainStep> steps;
    std::vector<Checkpoint> checkpoints;  // step 0, powers of two, eval_every multiples, final
};

struct TrainResult {
    LayerGraph net;
    TrainLog log;
};

// Raised when the loss becomes non-finite; carries the last checkpoint.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, Checkpoint last_good)
        : Error(ErrorKind::Numeric, "training diverged at step " + std::to_string(step)),
          step_(step), last_good_(std::move(last_good)) {}
    std::size_t step() const { return step_; }
    const Checkpoint& last_good() const { return last_good_; }

private:
    std::size_t step_;
    Checkpoint last_good_;
};

// logits: n x c, one row per sample. Mean of -log softmax(logits)_label.
double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels);

// Same loss plus d loss / d logits (n x c).
double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels, Matrix& grad);

struct BatchGradient {
    std::vector<double> params;  // same layout as LayerGraph::parameters()
    double loss = 0.0;
    std::size_t correct = 0;
};

// Exact gradient of the mean batch loss. inputs: d x n, one column per sample.
// The ReLU derivative at a zero preactivation is 1.
BatchGradient backward(const LayerGraph& net, const Matrix& inputs, std::span<const std::uint32_t> labels);

// Deterministic given cfg.seed.
TrainResult train(const LayerGraph& net, const Dataset& data, const TrainConfig& cfg);

// Full-dataset mean loss and accuracy.
double dataset_loss(const LayerGraph& net, const Dataset& data);
double dataset_accuracy(const LayerGraph& net, const Dataset& data);

// Columns `rows` of the dataset as a d x n matrix.
Matrix gather_columns(const Dataset& data, std::span<const std::size_t> rows);

}  // namespace relubridge
