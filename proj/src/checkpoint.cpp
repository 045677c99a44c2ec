#include "relubridge/checkpoint.hpp"

#include "relubridge/binary_io.hpp"

namespace relubridge {

namespace {

constexpr std::string_view kMagic = "RPLN";
constexpr char kVersion = '1';

enum : std::uint8_t { kDense = 1, kConv = 2, kResidual = 3 };

void encode_branch(binary::Writer& w, const BranchLayer& layer) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
        w.u8(kDense);
        w.u32(static_cast<std::uint32_t>(dense->out_dim()));
        w.u32(static_cast<std::uint32_t>(dense->in_dim()));
        for (Eigen::Index i = 0; i < dense->weights.size(); ++i) w.f64(dense->weights.data()[i]);
        return;
    }
    const auto& conv = std::get<Conv2DLayer>(layer);
    const auto& g = conv.geometry;
    w.u8(kConv);
    for (std::size_t v : {g.in_channels, g.in_height, g.in_width, g.out_channels, g.kernel_height,
                          g.kernel_width, g.stride, g.padding})
        w.u32(static_cast<std::uint32_t>(v));
    for (double k : conv.kernel) w.f64(k);
}

void check_payload(const binary::Reader& r, std::uint64_t count, const std::string& what) {
    if (r.remaining() < count * 8)
        fail(ErrorKind::Data, what + ": dimension header inconsistent with payload length");
}

BranchLayer decode_branch(binary::Reader& r, std::uint8_t kind, const std::string& what) {
    if (kind == kDense) {
        const std::uint32_t out = r.u32(), in = r.u32();
        check_payload(r, std::uint64_t{out} * in, what);
        DenseLayer layer{WeightMatrix(out, in)};
        for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = r.f64();
        return layer;
    }
    if (kind == kConv) {
        Conv2DGeometry g;
        for (std::size_t* v : {&g.in_channels, &g.in_height, &g.in_width, &g.out_channels, &g.kernel_height,
                               &g.kernel_width, &g.stride, &g.padding})
            *v = r.u32();
        check_payload(r, g.kernel_size(), what);
        Conv2DLayer layer{g, std::vector<double>(g.kernel_size())};
        for (double& k : layer.kernel) k = r.f64();
        return layer;
    }
    fail(ErrorKind::Data, what + ": unknown layer kind " + std::to_string(kind));
}

}  // namespace

std::string encode_checkpoint(const LayerGraph& net) {
    binary::Writer w;
    w.bytes(kMagic);
    w.u8(static_cast<std::uint8_t>(kVersion));
    w.u32(static_cast<std::uint32_t>(net.layers().size()));
    for (const auto& layer : net.layers()) {
        if (const auto* res = std::get_if<ResidualLayer>(&layer)) {
            w.u8(kResidual);
            w.u32(static_cast<std::uint32_t>(res->branch.size()));
            for (const auto& b : res->branch) encode_branch(w, b);
        } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
            encode_branch(w, *dense);
        } else {
            encode_branch(w, std::get<Conv2DLayer>(layer));
        }
    }
    return w.data();
}

LayerGraph decode_checkpoint(std::string_view bytes, const std::string& what) {
    binary::Reader r(bytes, what);
    if (bytes.size() < 5 || bytes.substr(0, 4) != kMagic) fail(ErrorKind::Data, what + ": bad checkpoint magic");
    if (bytes[4] != kVersion)
        fail(ErrorKind::Data, what + ": unsupported checkpoint version '" + std::string(1, bytes[4]) + "'");
    r.bytes(5);
    const std::uint32_t count = r.u32();
    require(count >= 1, ErrorKind::Data, what + ": checkpoint has no layers");
    std::vector<Layer> layers;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint8_t kind = r.u8();
        if (kind == kResidual) {
            ResidualLayer res;
            const std::uint32_t branches = r.u32();
            for (std::uint32_t j = 0; j < branches; ++j) {
                const std::uint8_t sub = r.u8();
                require(sub != kResidual, ErrorKind::Data, what + ": nested residual block");
                res.branch.push_back(decode_branch(r, sub, what));
            }
            layers.emplace_back(std::move(res));
        } else {
            BranchLayer b = decode_branch(r, kind, what);
            if (auto* dense = std::get_if<DenseLayer>(&b))
                layers.emplace_back(std::move(*dense));
            else
                layers.emplace_back(std::get<Conv2DLayer>(std::move(b)));
        }
    }
    if (r.remaining() != 0) fail(ErrorKind::Data, what + ": dimension header inconsistent with payload length");

    const std::size_t input_dim = std::visit([](const auto& l) { return l.in_dim(); }, layers.front());
    try {
        return LayerGraph(input_dim, std::move(layers));
    } catch (const Error& e) {
        fail(ErrorKind::Data, what + ": " + e.what());
    }
}

void save_checkpoint(const LayerGraph& net, const std::filesystem::path& path) {
    binary::write_file(path, encode_checkpoint(net));
}

LayerGraph load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(binary::read_file(path), path.string());
}

}  // namespace relubridge
