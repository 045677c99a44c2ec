#pragma once

// Naive reference evaluation of a LayerGraph straight from its layer
// descriptors: explicit loops, no compiled program, no Eigen products.

#include <cmath>
#include <vector>

#include "relubridge/network.hpp"

namespace reference {

using relubridge::BranchLayer;
using relubridge::Conv2DLayer;
using relubridge::DenseLayer;
using relubridge::Layer;
using relubridge::LayerGraph;
using relubridge::ResidualLayer;

template <class T>
std::vector<T> dense(const DenseLayer& layer, const std::vector<T>& x) {
    std::vector<T> y(layer.out_dim(), T(0));
    for (std::size_t i = 0; i < layer.out_dim(); ++i)
        for (std::size_t j = 0; j < layer.in_dim(); ++j)
            y[i] += T(layer.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) * x[j];
    return y;
}

template <class T>
std::vector<T> conv(const Conv2DLayer& layer, const std::vector<T>& x) {
    const auto& g = layer.geometry;
    const std::size_t oh = g.out_height(), ow = g.out_width();
    std::vector<T> y(g.out_channels * oh * ow, T(0));
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                T acc(0);
                for (std::size_t ic = 0; ic < g.in_channels; ++ic)
                    for (std::size_t kh = 0; kh < g.kernel_height; ++kh)
                        for (std::size_t kw = 0; kw < g.kernel_width; ++kw) {
                            const long ir = static_cast<long>(r * g.stride + kh) - static_cast<long>(g.padding);
                            const long icol = static_cast<long>(c * g.stride + kw) - static_cast<long>(g.padding);
                            if (ir < 0 || icol < 0 || ir >= static_cast<long>(g.in_height) ||
                                icol >= static_cast<long>(g.in_width))
                                continue;
                            const double w =
                                layer.kernel[((oc * g.in_channels + ic) * g.kernel_height + kh) * g.kernel_width + kw];
                            acc += T(w) * x[(ic * g.in_height + static_cast<std::size_t>(ir)) * g.in_width +
                                            static_cast<std::size_t>(icol)];
                        }
                y[(oc * oh + r) * ow + c] = acc;
            }
    return y;
}

template <class T>
std::vector<T> branch(const BranchLayer& layer, const std::vector<T>& x) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) return dense(*d, x);
    return conv(std::get<Conv2DLayer>(layer), x);
}

template <class T>
void relu(std::vector<T>& v) {
    for (auto& e : v) e = e >= T(0) ? e : T(0);
}

// Full nonlinear forward pass.
template <class T>
std::vector<T> forward(const LayerGraph& net, std::vector<T> x) {
    const auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (const auto* res = std::get_if<ResidualLayer>(&layers[l])) {
            std::vector<T> h = x;
            for (std::size_t b = 0; b < res->branch.size(); ++b) {
                h = branch(res->branch[b], h);
                if (b + 1 < res->branch.size()) relu(h);
            }
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += h[i];
        } else if (const auto* d = std::get_if<DenseLayer>(&layers[l])) {
            x = dense(*d, x);
        } else {
            x = conv(std::get<Conv2DLayer>(layers[l]), x);
        }
        if (l + 1 < layers.size()) relu(x);
    }
    return x;
}

template <class T = double>
inline std::vector<T> to_std(const relubridge::Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace reference
