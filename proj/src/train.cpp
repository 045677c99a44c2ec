#include "relubridge/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "relubridge/random.hpp"

namespace relubridge {

void TrainConfig::validate() const {
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorKind::Config,
            "learning rate must be finite and non-negative");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::Config, "momentum must lie in [0, 1)");
    require(batch_size >= 1, ErrorKind::Config, "batch size must be >= 1");
}

namespace {

void check_labels(const Matrix& logits, std::span<const std::uint32_t> labels) {
    require(static_cast<std::size_t>(logits.rows()) == labels.size(), ErrorKind::Shape,
            "logit rows do not match label count");
    require(logits.rows() >= 1, ErrorKind::Shape, "empty batch");
    for (auto y : labels)
        require(y < static_cast<std::size_t>(logits.cols()), ErrorKind::Shape, "label out of range");
}

// Per-sample log-sum-exp with max subtraction.
double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    const double mx = row.maxCoeff();
    return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace

double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels) {
    check_labels(logits, labels);
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        total += log_sum_exp(logits.row(i)) - logits(i, labels[static_cast<std::size_t>(i)]);
    return total / static_cast<double>(logits.rows());
}

double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels, Matrix& grad) {
    check_labels(logits, labels);
    const double inv_n = 1.0 / static_cast<double>(logits.rows());
    grad.resize(logits.rows(), logits.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double lse = log_sum_exp(logits.row(i));
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        total += lse - logits(i, y);
        grad.row(i) = (logits.row(i).array() - lse).exp() * inv_n;
        grad(i, y) -= inv_n;
    }
    return total * inv_n;
}

namespace {

// Gradient of the mean loss through a compiled program. Shared by the
// public backward() and the training loop, which keeps its own program.
BatchGradient program_backward(const Program& program, std::size_t parameter_count, const Matrix& inputs,
                               std::span<const std::uint32_t> labels) {
    require(inputs.allFinite(), ErrorKind::Numeric, "non-finite input batch");
    const std::size_t n_ops = program.ops.size();
    std::vector<Matrix> affine_inputs(n_ops);
    std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>> masks(program.site_widths.size());

    Program::State state{inputs, {}};
    for (std::size_t i = 0; i < n_ops; ++i) {
        const Op& op = program.ops[i];
        if (const auto* affine = std::get_if<AffineOp>(&op)) {
            affine_inputs[i] = state.value;
            Matrix next = program.matrices[affine->matrix] * state.value;
            state.value = std::move(next);
        } else if (const auto* relu = std::get_if<ReluOp>(&op)) {
            require(state.value.allFinite(), ErrorKind::Numeric, "non-finite activation in backward pass");
            auto& mask = masks[relu->site];
            mask = state.value.array() >= 0.0;
            state.value = mask.select(state.value, 0.0);
        } else if (std::holds_alternative<PushSkipOp>(op)) {
            state.skips.push_back(state.value);
        } else {
            state.value += state.skips.back();
            state.skips.pop_back();
        }
    }

    BatchGradient out;
    out.params.assign(parameter_count, 0.0);
    const Matrix logits = state.value.transpose();
    Matrix grad_logits;
    out.loss = softmax_cross_entropy(logits, labels, grad_logits);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best;
        logits.row(i).maxCoeff(&best);
        if (static_cast<std::size_t>(best) == labels[static_cast<std::size_t>(i)]) ++out.correct;
    }

    Matrix delta = grad_logits.transpose();
    std::vector<Matrix> skip_grads;
    for (std::size_t i = n_ops; i-- > 0;) {
        const Op& op = program.ops[i];
        if (const auto* affine = std::get_if<AffineOp>(&op)) {
            const WeightMatrix& w = program.matrices[affine->matrix];
            const ParamBinding& binding = program.bindings[affine->matrix];
            const WeightMatrix dw = delta * affine_inputs[i].transpose();
            if (binding.entries.empty()) {
                std::copy_n(dw.data(), dw.size(),
                            out.params.begin() + static_cast<std::ptrdiff_t>(binding.offset));
            } else {
                for (const auto& e : binding.entries) out.params[binding.offset + e.param] += dw(e.row, e.col);
            }
            if (i > 0) {
                Matrix back = w.transpose() * delta;
                delta = std::move(back);
            }
        } else if (const auto* relu = std::get_if<ReluOp>(&op)) {
            delta = masks[relu->site].select(delta, 0.0);
        } else if (std::holds_alternative<AddSkipOp>(op)) {
            skip_grads.push_back(delta);
        } else {
            delta += skip_grads.back();
            skip_grads.pop_back();
        }
    }
    return out;
}

void load_parameters(Program& program, std::span<const double> params) {
    for (std::size_t m = 0; m < program.matrices.size(); ++m) {
        WeightMatrix& w = program.matrices[m];
        const ParamBinding& binding = program.bindings[m];
        if (binding.entries.empty()) {
            std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(binding.offset), w.size(), w.data());
        } else {
            for (const auto& e : binding.entries) w(e.row, e.col) = params[binding.offset + e.param];
        }
    }
}

bool is_checkpoint_step(std::size_t step, std::size_t eval_every) {
    if (step == 0 || std::has_single_bit(step)) return true;
    return eval_every > 0 && step % eval_every == 0;
}

}  // namespace

Matrix gather_columns(const Dataset& data, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(data.dim()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t c = 0; c < rows.size(); ++c)
        out.col(static_cast<Eigen::Index>(c)) = data.inputs.row(static_cast<Eigen::Index>(rows[c])).transpose();
    return out;
}

BatchGradient backward(const LayerGraph& net, const Matrix& inputs, std::span<const std::uint32_t> labels) {
    require(static_cast<std::size_t>(inputs.rows()) == net.input_dim(), ErrorKind::Shape,
            "batch input dimension does not match network");
    require(static_cast<std::size_t>(inputs.cols()) == labels.size(), ErrorKind::Shape,
            "batch size does not match label count");
    return program_backward(net.program(), net.parameter_count(), inputs, labels);
}

TrainResult train(const LayerGraph& net, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    validate(data);
    require(data.dim() == net.input_dim(), ErrorKind::Shape, "dataset dimension does not match network");
    require(data.classes <= net.output_dim(), ErrorKind::Shape, "more classes than network outputs");

    std::vector<double> params = net.parameters();
    std::vector<double> velocity(params.size(), 0.0);
    Program program = net.program();

    TrainLog log;
    log.checkpoints.push_back({0, net});

    const std::size_t n = data.size();
    std::vector<std::size_t> order(n);
    std::vector<std::uint32_t> batch_labels;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, n - start);
            const std::span<const std::size_t> rows(order.data() + start, count);
            batch_labels.clear();
            for (auto r : rows) batch_labels.push_back(data.labels[r]);

            BatchGradient grad;
            try {
                grad = program_backward(program, params.size(), gather_columns(data, rows), batch_labels);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::Numeric) throw;
                throw DivergenceError(step, log.checkpoints.back());
            }
            if (!std::isfinite(grad.loss)) throw DivergenceError(step, log.checkpoints.back());

            if (cfg.momentum == 0.0) {
                for (std::size_t p = 0; p < params.size(); ++p) params[p] -= cfg.learning_rate * grad.params[p];
            } else {
                for (std::size_t p = 0; p < params.size(); ++p) {
                    velocity[p] = cfg.momentum * velocity[p] + grad.params[p];
                    params[p] -= cfg.learning_rate * velocity[p];
                }
            }
            load_parameters(program, params);
            ++step;
            log.steps.push_back({step, grad.loss, static_cast<double>(grad.correct) / static_cast<double>(count)});
            if (is_checkpoint_step(step, cfg.eval_every)) {
                const bool finite = std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); });
                if (!finite) throw DivergenceError(step, log.checkpoints.back());
                log.checkpoints.push_back({step, net.with_parameters(params)});
            }
        }
    }
    for (double v : params)
        if (!std::isfinite(v)) throw DivergenceError(step, log.checkpoints.back());
    LayerGraph final_net = net.with_parameters(params);
    if (log.checkpoints.back().step != step) log.checkpoints.push_back({step, final_net});
    return {std::move(final_net), std::move(log)};
}

double dataset_loss(const LayerGraph& net, const Dataset& data) {
    require(data.dim() == net.input_dim(), ErrorKind::Shape, "dataset dimension does not match network");
    constexpr std::size_t kChunk = 1024;
    double total = 0.0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, data.size() - start);
        rows.resize(count);
        std::iota(rows.begin(), rows.end(), start);
        Program::State state{gather_columns(data, rows), {}};
        net.program().run(state, 0, [](std::size_t, Program::State& st) {
            st.value = (st.value.array() >= 0.0).select(st.value, 0.0);
        });
        const std::span<const std::uint32_t> labels(data.labels.data() + start, count);
        total += softmax_cross_entropy(state.value.transpose(), labels) * static_cast<double>(count);
    }
    return total / static_cast<double>(data.size());
}

double dataset_accuracy(const LayerGraph& net, const Dataset& data) {
    require(data.dim() == net.input_dim(), ErrorKind::Shape, "dataset dimension does not match network");
    constexpr std::size_t kChunk = 1024;
    std::size_t correct = 0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, data.size() - start);
        rows.resize(count);
        std::iota(rows.begin(), rows.end(), start);
        Program::State state{gather_columns(data, rows), {}};
        net.program().run(state, 0, [](std::size_t, Program::State& st) {
            st.value = (st.value.array() >= 0.0).select(st.value, 0.0);
        });
        for (std::size_t c = 0; c < count; ++c)
            if (argmax(state.value.col(static_cast<Eigen::Index>(c))) == data.labels[start + c]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace relubridge
