#pragma once

// Bias-free ReLU layer graphs.
//
// A LayerGraph is a sequence of linear layers (dense, 2-D convolution,
// identity-shortcut residual blocks) with a ReLU after every layer except
// the last. Every ReLU application is a "site"; each scalar it acts on is
// one unit. Activation patterns record, per site, which units are active.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "relubridge/error.hpp"

namespace relubridge {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using WeightMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Architecture descriptors (weightless)

struct DenseSpec {
    std::size_t units = 0;
};

struct ConvSpec {
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

// Residual block h -> h + branch(h). A dense branch is dense(hidden), ReLU,
// dense(width); a conv branch is two shape-preserving convolutions.
struct ResidualSpec {
    bool conv = false;
    std::size_t hidden = 0;  // dense: hidden units; conv: kernel size (odd)
};

using LayerSpec = std::variant<DenseSpec, ConvSpec, ResidualSpec>;

struct Architecture {
    std::size_t channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::vector<LayerSpec> layers;

    std::size_t input_dim() const { return channels * height * width; }
};

// Parses a whitespace-separated descriptor, e.g.
//   "in:784 dense:100 dense:10"
//   "in:1x6x6 conv:4,3,2,1 res:8 dense:10"
//   "in:2x4x4 conv:3,3,1,1 resconv:3 dense:5"
// conv:OC,K,S,P is out_channels, kernel, stride, padding. The last layer
// must be dense; its width is the class count.
Architecture parse_architecture(std::string_view text);

// Walks the layer shapes; throws a Config error on zero widths, kernels that
// do not fit, or even residual conv kernels.
void validate(const Architecture& arch);
std::string to_string(const Architecture& arch);

// Two-layer MLP d -> m -> c.
Architecture mlp_architecture(std::size_t d, std::size_t m, std::size_t c);

// ---------------------------------------------------------------------------
// Weighted layers

struct DenseLayer {
    WeightMatrix weights;  // out x in, row-major

    std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
    std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }
};

struct Conv2DGeometry {
    std::size_t in_channels = 0;
    std::size_t in_height = 0;
    std::size_t in_width = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_height = 0;
    std::size_t kernel_width = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_height() const { return (in_height + 2 * padding - kernel_height) / stride + 1; }
    std::size_t out_width() const { return (in_width + 2 * padding - kernel_width) / stride + 1; }
    std::size_t in_dim() const { return in_channels * in_height * in_width; }
    std::size_t out_dim() const { return out_channels * out_height() * out_width(); }
    std::size_t kernel_size() const {
        return out_channels * in_channels * kernel_height * kernel_width;
    }
    std::size_t fan_in() const { return in_channels * kernel_height * kernel_width; }
};

struct Conv2DLayer {
    Conv2DGeometry geometry;
    std::vector<double> kernel;  // [out_c][in_c][kh][kw]

    std::size_t in_dim() const { return geometry.in_dim(); }
    std::size_t out_dim() const { return geometry.out_dim(); }
};

using BranchLayer = std::variant<DenseLayer, Conv2DLayer>;

struct ResidualLayer {
    std::vector<BranchLayer> branch;  // ReLU between consecutive branch layers

    std::size_t in_dim() const;
    std::size_t out_dim() const;
};

using Layer = std::variant<DenseLayer, Conv2DLayer, ResidualLayer>;

// ---------------------------------------------------------------------------
// Compiled evaluation program

// Entry of a conv layer's induced matrix: M(row, col) = params[param].
struct InducedEntry {
    std::uint32_t row;
    std::uint32_t col;
    std::uint32_t param;  // index into the layer's own parameter block
};

struct AffineOp {
    std::size_t matrix;  // index into Program::matrices
};
struct ReluOp {
    std::size_t site;
};
struct PushSkipOp {};
struct AddSkipOp {};

using Op = std::variant<AffineOp, ReluOp, PushSkipOp, AddSkipOp>;

// Where an induced matrix's entries live in the flat parameter vector.
struct ParamBinding {
    std::size_t offset = 0;             // start of this layer's parameter block
    std::vector<InducedEntry> entries;  // empty for dense (row-major identity map)
};

// Flattened straight-line form of a LayerGraph. Conv layers are lowered to
// their induced dense matrices on flattened (channel, row, col) inputs.
struct Program {
    std::vector<Op> ops;
    std::vector<WeightMatrix> matrices;
    std::vector<ParamBinding> bindings;    // parallel to matrices
    std::vector<std::size_t> site_widths;  // units per ReLU site
    std::vector<std::size_t> site_ops;     // op index of each ReLU site

    // Working state: `value` is dim x cols (one column per evaluated input);
    // `skips` holds residual inputs awaiting their AddSkipOp.
    struct State {
        Matrix value;
        std::vector<Matrix> skips;
    };

    // Runs ops [first, ops.size()). At every ReLU site, `at_site(site,
    // state)` must apply the (possibly fixed) nonlinearity to state.value.
    template <class AtSite>
    void run(State& state, std::size_t first, AtSite&& at_site) const {
        for (std::size_t i = first; i < ops.size(); ++i) {
            const Op& op = ops[i];
            if (const auto* affine = std::get_if<AffineOp>(&op)) {
                Matrix next = matrices[affine->matrix] * state.value;
                state.value = std::move(next);
            } else if (const auto* relu = std::get_if<ReluOp>(&op)) {
                at_site(relu->site, state);
            } else if (std::holds_alternative<PushSkipOp>(op)) {
                state.skips.push_back(state.value);
            } else {
                state.value += state.skips.back();
                state.skips.pop_back();
            }
        }
    }
};

// ---------------------------------------------------------------------------

struct ActivationPattern {
    std::vector<std::vector<std::uint8_t>> sites;  // bit per unit, 1 = active

    std::size_t site_count() const { return sites.size(); }
    std::size_t unit_count() const;
    bool operator==(const ActivationPattern&) const = default;
};

struct UnitId {
    std::size_t site = 0;
    std::size_t unit = 0;
    auto operator<=>(const UnitId&) const = default;
};

// Units whose bits differ; patterns must have the same shape.
std::vector<UnitId> pattern_difference(const ActivationPattern& a, const ActivationPattern& b);

struct OutputVector {
    Vector values;
    double norm = 0.0;

    OutputVector() = default;
    explicit OutputVector(Vector v) : values(std::move(v)), norm(values.norm()) {}
    std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

class LayerGraph {
public:
    LayerGraph(std::size_t input_dim, std::vector<Layer> layers);

    std::size_t input_dim() const { return input_dim_; }
    std::size_t output_dim() const { return output_dim_; }
    // Number of top-level layers (a residual block counts as one).
    std::size_t depth() const { return layers_.size(); }
    const std::vector<std::size_t>& site_widths() const { return program_.site_widths; }
    std::size_t hidden_units() const;
    const std::vector<Layer>& layers() const { return layers_; }
    const Program& program() const { return program_; }

    // Flat parameter vector: layers in order, residual branch layers in
    // order, dense row-major (out-dim major), conv kernels [oc][ic][kh][kw].
    std::size_t parameter_count() const { return parameter_count_; }
    std::vector<double> parameters() const;
    LayerGraph with_parameters(std::span<const double> params) const;

    ActivationPattern empty_pattern() const;

private:
    std::size_t input_dim_;
    std::size_t output_dim_ = 0;
    std::size_t parameter_count_ = 0;
    std::vector<Layer> layers_;
    Program program_;
};

// Builds a graph for `arch` with i.i.d. N(0, 2 / fan_in) weights.
LayerGraph he_init(const Architecture& arch, std::uint64_t seed);

// Graph of dense layers from explicit row-major weights (out x in each).
LayerGraph dense_graph(const std::vector<WeightMatrix>& weights);

OutputVector forward(const LayerGraph& net, const Vector& x);

// Bit i of site s is 1 iff the preactivation is >= 0.
ActivationPattern capture_pattern(const LayerGraph& net, const Vector& x);

// Evaluates the network with every ReLU replaced by its fixed 0/1 mask.
// The result is linear in z.
OutputVector forward_fixed(const LayerGraph& net, const Vector& z, const ActivationPattern& pattern);

// Same as forward_fixed for several inputs at once (columns of zs).
Matrix forward_fixed_columns(const LayerGraph& net, const Matrix& zs, const ActivationPattern& pattern);

OutputVector normalize_output(const OutputVector& f);

// Index of the largest component (first on ties).
std::size_t argmax(const Vector& v);

}  // namespace relubridge
