#include "relubridge/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "relubridge/random.hpp"

namespace relubridge {

namespace {

std::size_t parse_count(std::string_view token, std::string_view what) {
    std::size_t value = 0;
    if (token.empty()) fail(ErrorKind::Config, "architecture: empty " + std::string(what));
    for (char ch : token) {
        if (ch < '0' || ch > '9')
            fail(ErrorKind::Config, "architecture: bad " + std::string(what) + " '" +
                                        std::string(token) + "'");
        value = value * 10 + static_cast<std::size_t>(ch - '0');
    }
    return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        parts.push_back(text.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return parts;
}

std::size_t layer_in_dim(const BranchLayer& layer) {
    return std::visit([](const auto& l) { return l.in_dim(); }, layer);
}
std::size_t layer_out_dim(const BranchLayer& layer) {
    return std::visit([](const auto& l) { return l.out_dim(); }, layer);
}
std::size_t layer_in_dim(const Layer& layer) {
    return std::visit([](const auto& l) { return l.in_dim(); }, layer);
}
std::size_t layer_out_dim(const Layer& layer) {
    return std::visit([](const auto& l) { return l.out_dim(); }, layer);
}

void check_conv(const Conv2DGeometry& g) {
    require(g.in_channels > 0 && g.in_height > 0 && g.in_width > 0 && g.out_channels > 0,
            ErrorKind::Config, "conv: zero-sized dimension");
    require(g.kernel_height > 0 && g.kernel_width > 0 && g.stride > 0, ErrorKind::Config,
            "conv: zero kernel or stride");
    require(g.in_height + 2 * g.padding >= g.kernel_height &&
                g.in_width + 2 * g.padding >= g.kernel_width,
            ErrorKind::Config, "conv: kernel larger than padded input");
}

// Induced matrix entries of a convolution in (row, col, kernel index) form.
std::vector<InducedEntry> conv_entries(const Conv2DGeometry& g) {
    std::vector<InducedEntry> entries;
    const std::size_t oh = g.out_height(), ow = g.out_width();
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t row = (oc * oh + oy) * ow + ox;
                for (std::size_t ic = 0; ic < g.in_channels; ++ic)
                    for (std::size_t ky = 0; ky < g.kernel_height; ++ky)
                        for (std::size_t kx = 0; kx < g.kernel_width; ++kx) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                            static_cast<std::ptrdiff_t>(g.padding);
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                            static_cast<std::ptrdiff_t>(g.padding);
                            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_height) ||
                                ix >= static_cast<std::ptrdiff_t>(g.in_width))
                                continue;
                            const std::size_t col =
                                (ic * g.in_height + static_cast<std::size_t>(iy)) * g.in_width +
                                static_cast<std::size_t>(ix);
                            const std::size_t param =
                                ((oc * g.in_channels + ic) * g.kernel_height + ky) * g.kernel_width + kx;
                            entries.push_back({static_cast<std::uint32_t>(row),
                                               static_cast<std::uint32_t>(col),
                                               static_cast<std::uint32_t>(param)});
                        }
            }
    return entries;
}

std::size_t param_count(const BranchLayer& layer) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer))
        return static_cast<std::size_t>(dense->weights.size());
    return std::get<Conv2DLayer>(layer).kernel.size();
}

// Appends one linear layer to the program; returns its parameter count.
std::size_t compile_linear(Program& program, const BranchLayer& layer, std::size_t offset) {
    ParamBinding binding{offset, {}};
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
        require(dense->weights.rows() > 0 && dense->weights.cols() > 0, ErrorKind::Config,
                "dense layer with zero width");
        require(dense->weights.allFinite(), ErrorKind::Numeric, "dense layer has non-finite weights");
        program.matrices.push_back(dense->weights);
    } else {
        const auto& conv = std::get<Conv2DLayer>(layer);
        check_conv(conv.geometry);
        require(conv.kernel.size() == conv.geometry.kernel_size(), ErrorKind::Shape,
                "conv kernel size does not match geometry");
        for (double w : conv.kernel)
            require(std::isfinite(w), ErrorKind::Numeric, "conv layer has non-finite weights");
        WeightMatrix induced = WeightMatrix::Zero(static_cast<Eigen::Index>(conv.geometry.out_dim()),
                                                  static_cast<Eigen::Index>(conv.geometry.in_dim()));
        binding.entries = conv_entries(conv.geometry);
        for (const auto& e : binding.entries) induced(e.row, e.col) = conv.kernel[e.param];
        program.matrices.push_back(std::move(induced));
    }
    program.bindings.push_back(std::move(binding));
    program.ops.emplace_back(AffineOp{program.matrices.size() - 1});
    return param_count(layer);
}

void add_site(Program& program, std::size_t width) {
    program.site_ops.push_back(program.ops.size());
    program.ops.emplace_back(ReluOp{program.site_widths.size()});
    program.site_widths.push_back(width);
}

void load_layer(BranchLayer& layer, std::span<const double> params, std::size_t& offset) {
    if (auto* dense = std::get_if<DenseLayer>(&layer)) {
        const auto n = static_cast<std::size_t>(dense->weights.size());
        std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(offset), n, dense->weights.data());
        offset += n;
    } else {
        auto& conv = std::get<Conv2DLayer>(layer);
        std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(offset), conv.kernel.size(),
                    conv.kernel.begin());
        offset += conv.kernel.size();
    }
}

void store_layer(const BranchLayer& layer, std::vector<double>& out) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
        out.insert(out.end(), dense->weights.data(), dense->weights.data() + dense->weights.size());
    } else {
        const auto& conv = std::get<Conv2DLayer>(layer);
        out.insert(out.end(), conv.kernel.begin(), conv.kernel.end());
    }
}

BranchLayer as_branch(const Layer& layer) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) return *dense;
    return std::get<Conv2DLayer>(layer);
}

}  // namespace

// ---------------------------------------------------------------------------

Architecture parse_architecture(std::string_view text) {
    Architecture arch;
    std::istringstream in{std::string(text)};
    std::string token;
    bool have_input = false;
    while (in >> token) {
        const auto colon = token.find(':');
        require(colon != std::string::npos, ErrorKind::Config,
                "architecture: token '" + token + "' lacks ':'");
        const std::string_view kind = std::string_view(token).substr(0, colon);
        const std::string_view body = std::string_view(token).substr(colon + 1);
        if (kind == "in") {
            require(!have_input, ErrorKind::Config, "architecture: duplicate 'in'");
            const auto dims = split(body, 'x');
            if (dims.size() == 1) {
                arch.channels = parse_count(dims[0], "input dimension");
            } else if (dims.size() == 3) {
                arch.channels = parse_count(dims[0], "channels");
                arch.height = parse_count(dims[1], "height");
                arch.width = parse_count(dims[2], "width");
            } else {
                fail(ErrorKind::Config, "architecture: input must be D or CxHxW");
            }
            have_input = true;
        } else if (kind == "dense") {
            arch.layers.emplace_back(DenseSpec{parse_count(body, "dense width")});
        } else if (kind == "conv") {
            const auto parts = split(body, ',');
            require(parts.size() == 4, ErrorKind::Config, "architecture: conv needs OC,K,S,P");
            arch.layers.emplace_back(ConvSpec{parse_count(parts[0], "conv channels"),
                                              parse_count(parts[1], "conv kernel"),
                                              parse_count(parts[2], "conv stride"),
                                              parse_count(parts[3], "conv padding")});
        } else if (kind == "res") {
            arch.layers.emplace_back(ResidualSpec{false, parse_count(body, "residual width")});
        } else if (kind == "resconv") {
            arch.layers.emplace_back(ResidualSpec{true, parse_count(body, "residual kernel")});
        } else {
            fail(ErrorKind::Config, "architecture: unknown layer kind '" + std::string(kind) + "'");
        }
    }
    require(have_input, ErrorKind::Config, "architecture: missing 'in:'");
    require(!arch.layers.empty(), ErrorKind::Config, "architecture: no layers");
    require(std::holds_alternative<DenseSpec>(arch.layers.back()), ErrorKind::Config,
            "architecture: last layer must be dense");
    validate(arch);
    return arch;
}

void validate(const Architecture& arch) {
    require(arch.channels > 0 && arch.height > 0 && arch.width > 0, ErrorKind::Config,
            "architecture: zero input dimension");
    require(!arch.layers.empty(), ErrorKind::Config, "architecture: no layers");
    std::size_t channels = arch.channels, height = arch.height, width = arch.width;
    for (const auto& spec : arch.layers) {
        if (const auto* d = std::get_if<DenseSpec>(&spec)) {
            require(d->units > 0, ErrorKind::Config, "architecture: dense width must be >= 1");
            channels = d->units;
            height = width = 1;
        } else if (const auto* c = std::get_if<ConvSpec>(&spec)) {
            const Conv2DGeometry g{channels, height, width, c->out_channels, c->kernel, c->kernel, c->stride,
                                   c->padding};
            check_conv(g);
            channels = g.out_channels;
            height = g.out_height();
            width = g.out_width();
        } else {
            const auto& r = std::get<ResidualSpec>(spec);
            if (r.conv) {
                require(r.hidden % 2 == 1, ErrorKind::Config, "architecture: resconv kernel must be odd");
                check_conv({channels, height, width, channels, r.hidden, r.hidden, 1, r.hidden / 2});
            } else {
                require(r.hidden > 0, ErrorKind::Config, "architecture: residual width must be >= 1");
            }
        }
    }
}

std::string to_string(const Architecture& arch) {
    std::ostringstream out;
    if (arch.height == 1 && arch.width == 1)
        out << "in:" << arch.channels;
    else
        out << "in:" << arch.channels << 'x' << arch.height << 'x' << arch.width;
    for (const auto& layer : arch.layers) {
        out << ' ';
        if (const auto* d = std::get_if<DenseSpec>(&layer)) {
            out << "dense:" << d->units;
        } else if (const auto* c = std::get_if<ConvSpec>(&layer)) {
            out << "conv:" << c->out_channels << ',' << c->kernel << ',' << c->stride << ','
                << c->padding;
        } else {
            const auto& r = std::get<ResidualSpec>(layer);
            out << (r.conv ? "resconv:" : "res:") << r.hidden;
        }
    }
    return out.str();
}

Architecture mlp_architecture(std::size_t d, std::size_t m, std::size_t c) {
    Architecture arch;
    arch.channels = d;
    arch.layers = {DenseSpec{m}, DenseSpec{c}};
    return arch;
}

std::size_t ResidualLayer::in_dim() const {
    return branch.empty() ? 0 : layer_in_dim(branch.front());
}
std::size_t ResidualLayer::out_dim() const {
    return branch.empty() ? 0 : layer_out_dim(branch.back());
}

std::size_t ActivationPattern::unit_count() const {
    std::size_t n = 0;
    for (const auto& s : sites) n += s.size();
    return n;
}

std::vector<UnitId> pattern_difference(const ActivationPattern& a, const ActivationPattern& b) {
    require(a.sites.size() == b.sites.size(), ErrorKind::Shape, "pattern site count mismatch");
    std::vector<UnitId> diff;
    for (std::size_t s = 0; s < a.sites.size(); ++s) {
        require(a.sites[s].size() == b.sites[s].size(), ErrorKind::Shape, "pattern width mismatch");
        for (std::size_t i = 0; i < a.sites[s].size(); ++i)
            if (a.sites[s][i] != b.sites[s][i]) diff.push_back({s, i});
    }
    return diff;
}

// ---------------------------------------------------------------------------

LayerGraph::LayerGraph(std::size_t input_dim, std::vector<Layer> layers)
    : input_dim_(input_dim), layers_(std::move(layers)) {
    require(input_dim_ > 0, ErrorKind::Config, "input dimension must be positive");
    require(!layers_.empty(), ErrorKind::Config, "network has no layers");
    require(std::holds_alternative<DenseLayer>(layers_.back()), ErrorKind::Config,
            "last layer must be dense");

    std::size_t dim = input_dim_;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& layer = layers_[i];
        require(layer_in_dim(layer) == dim, ErrorKind::Shape,
                "layer " + std::to_string(i) + " expects input " +
                    std::to_string(layer_in_dim(layer)) + ", got " + std::to_string(dim));
        if (const auto* res = std::get_if<ResidualLayer>(&layer)) {
            require(!res->branch.empty(), ErrorKind::Config, "residual block with empty branch");
            require(res->out_dim() == res->in_dim(), ErrorKind::Shape,
                    "residual branch must preserve dimension");
            program_.ops.emplace_back(PushSkipOp{});
            std::size_t bdim = dim;
            for (std::size_t j = 0; j < res->branch.size(); ++j) {
                require(layer_in_dim(res->branch[j]) == bdim, ErrorKind::Shape,
                        "residual branch dimensions do not compose");
                offset += compile_linear(program_, res->branch[j], offset);
                bdim = layer_out_dim(res->branch[j]);
                if (j + 1 < res->branch.size()) add_site(program_, bdim);
            }
            program_.ops.emplace_back(AddSkipOp{});
        } else {
            offset += compile_linear(program_, as_branch(layer), offset);
        }
        dim = layer_out_dim(layer);
        require(dim > 0, ErrorKind::Config, "layer with zero width");
        if (i + 1 < layers_.size()) add_site(program_, dim);
    }
    output_dim_ = dim;
    parameter_count_ = offset;
}

std::size_t LayerGraph::hidden_units() const {
    std::size_t n = 0;
    for (auto w : program_.site_widths) n += w;
    return n;
}

std::vector<double> LayerGraph::parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count_);
    for (const auto& layer : layers_) {
        if (const auto* res = std::get_if<ResidualLayer>(&layer)) {
            for (const auto& b : res->branch) store_layer(b, out);
        } else {
            store_layer(as_branch(layer), out);
        }
    }
    return out;
}

LayerGraph LayerGraph::with_parameters(std::span<const double> params) const {
    require(params.size() == parameter_count_, ErrorKind::Shape, "parameter count mismatch");
    std::vector<Layer> layers = layers_;
    std::size_t offset = 0;
    for (auto& layer : layers) {
        if (auto* res = std::get_if<ResidualLayer>(&layer)) {
            for (auto& b : res->branch) load_layer(b, params, offset);
        } else {
            BranchLayer b = as_branch(layer);
            load_layer(b, params, offset);
            if (auto* dense = std::get_if<DenseLayer>(&b))
                layer = std::move(*dense);
            else
                layer = std::get<Conv2DLayer>(std::move(b));
        }
    }
    return LayerGraph(input_dim_, std::move(layers));
}

ActivationPattern LayerGraph::empty_pattern() const {
    ActivationPattern p;
    for (auto w : program_.site_widths) p.sites.emplace_back(w, std::uint8_t{0});
    return p;
}

// ---------------------------------------------------------------------------

namespace {

DenseLayer random_dense(std::size_t out, std::size_t in, Rng& rng) {
    require(out > 0 && in > 0, ErrorKind::Config, "dense layer with zero width or fan-in");
    DenseLayer layer{WeightMatrix(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in))};
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = rng.normal(0.0, stddev);
    return layer;
}

Conv2DLayer random_conv(const Conv2DGeometry& g, Rng& rng) {
    check_conv(g);
    Conv2DLayer layer{g, std::vector<double>(g.kernel_size())};
    const double stddev = std::sqrt(2.0 / static_cast<double>(g.fan_in()));
    for (double& w : layer.kernel) w = rng.normal(0.0, stddev);
    return layer;
}

}  // namespace

LayerGraph he_init(const Architecture& arch, std::uint64_t seed) {
    validate(arch);
    Rng rng(seed);
    std::size_t channels = arch.channels, height = arch.height, width = arch.width;
    std::vector<Layer> layers;
    for (const auto& spec : arch.layers) {
        const std::size_t dim = channels * height * width;
        if (const auto* d = std::get_if<DenseSpec>(&spec)) {
            layers.emplace_back(random_dense(d->units, dim, rng));
            channels = d->units;
            height = width = 1;
        } else if (const auto* c = std::get_if<ConvSpec>(&spec)) {
            Conv2DGeometry g{channels, height, width, c->out_channels, c->kernel, c->kernel, c->stride,
                             c->padding};
            layers.emplace_back(random_conv(g, rng));
            channels = g.out_channels;
            height = g.out_height();
            width = g.out_width();
        } else {
            const auto& r = std::get<ResidualSpec>(spec);
            ResidualLayer block;
            if (r.conv) {
                const Conv2DGeometry g{channels, height, width, channels, r.hidden, r.hidden, 1,
                                       r.hidden / 2};
                block.branch.emplace_back(random_conv(g, rng));
                block.branch.emplace_back(random_conv(g, rng));
            } else {
                block.branch.emplace_back(random_dense(r.hidden, dim, rng));
                block.branch.emplace_back(random_dense(dim, r.hidden, rng));
            }
            layers.emplace_back(std::move(block));
        }
    }
    return LayerGraph(arch.input_dim(), std::move(layers));
}

LayerGraph dense_graph(const std::vector<WeightMatrix>& weights) {
    require(!weights.empty(), ErrorKind::Config, "no weight matrices");
    std::vector<Layer> layers;
    for (const auto& w : weights) layers.emplace_back(DenseLayer{w});
    return LayerGraph(static_cast<std::size_t>(weights.front().cols()), std::move(layers));
}

// ---------------------------------------------------------------------------

namespace {

void check_input(const LayerGraph& net, Eigen::Index rows) {
    require(static_cast<std::size_t>(rows) == net.input_dim(), ErrorKind::Shape,
            "input has dimension " + std::to_string(rows) + ", network expects " +
                std::to_string(net.input_dim()));
}

void check_pattern(const LayerGraph& net, const ActivationPattern& pattern) {
    const auto& widths = net.site_widths();
    require(pattern.sites.size() == widths.size(), ErrorKind::Shape, "pattern site count mismatch");
    for (std::size_t s = 0; s < widths.size(); ++s)
        require(pattern.sites[s].size() == widths[s], ErrorKind::Shape, "pattern width mismatch");
}

// Forward and fixed-pattern evaluation share this exact arithmetic:
// a unit either keeps its value or becomes 0.0.
inline void relu_in_place(Eigen::Ref<Matrix> value) {
    for (Eigen::Index i = 0; i < value.size(); ++i) {
        double& v = value.data()[i];
        v = v >= 0.0 ? v : 0.0;
    }
}

}  // namespace

OutputVector forward(const LayerGraph& net, const Vector& x) {
    check_input(net, x.size());
    Program::State state{x, {}};
    net.program().run(state, 0, [](std::size_t, Program::State& st) { relu_in_place(st.value); });
    return OutputVector(state.value.col(0));
}

ActivationPattern capture_pattern(const LayerGraph& net, const Vector& x) {
    check_input(net, x.size());
    ActivationPattern pattern = net.empty_pattern();
    Program::State state{x, {}};
    net.program().run(state, 0, [&](std::size_t site, Program::State& st) {
        Matrix& value = st.value;
        auto& bits = pattern.sites[site];
        for (Eigen::Index i = 0; i < value.rows(); ++i) {
            const bool active = value(i, 0) >= 0.0;
            bits[static_cast<std::size_t>(i)] = active ? 1 : 0;
            value(i, 0) = active ? value(i, 0) : 0.0;
        }
    });
    return pattern;
}

Matrix forward_fixed_columns(const LayerGraph& net, const Matrix& zs, const ActivationPattern& pattern) {
    check_input(net, zs.rows());
    check_pattern(net, pattern);
    Program::State state{zs, {}};
    net.program().run(state, 0, [&](std::size_t site, Program::State& st) {
        Matrix& value = st.value;
        const auto& bits = pattern.sites[site];
        for (Eigen::Index i = 0; i < value.rows(); ++i)
            if (!bits[static_cast<std::size_t>(i)]) value.row(i).setZero();
    });
    return state.value;
}

OutputVector forward_fixed(const LayerGraph& net, const Vector& z, const ActivationPattern& pattern) {
    return OutputVector(forward_fixed_columns(net, z, pattern).col(0));
}

OutputVector normalize_output(const OutputVector& f) {
    require(f.norm > 0.0 && std::isfinite(f.norm), ErrorKind::Numeric,
            "cannot normalize a zero or non-finite output");
    return OutputVector(f.values / f.norm);
}

std::size_t argmax(const Vector& v) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = i;
    return static_cast<std::size_t>(best);
}

}  // namespace relubridge
