#pragma once

// Exact traversal of a ReLU network along a straight input segment.
//
// On X(t) = (1 - t) x0 + t x1 every preactivation is piecewise affine in t.
// walk_path finds every node (a t where some unit changes sign), the
// activation pattern of each segment between nodes, and the directional
// gradient of each output component on each segment.

#include <cstddef>
#include <vector>

#include "relubridge/network.hpp"

namespace relubridge {

struct LinearPath {
    Vector x0;
    Vector x1;
    Vector direction;       // x1 - x0
    Vector unit_direction;  // direction / |direction|
    double direction_norm = 0.0;

    std::size_t dim() const { return static_cast<std::size_t>(x0.size()); }
    // (1 - t) x0 + t x1; exact at t = 0 and t = 1.
    Vector at(double t) const;
    LinearPath reversed() const;
};

LinearPath make_path(const Vector& x0, const Vector& x1);

struct PathNode {
    double t = 0.0;
    UnitId unit;  // the unit whose sign changes at t
};

enum class OutputScaling {
    PerPair,  // divide by (|f(x0)| + |f(x1)|) / 2
    None,
};

struct WalkOptions {
    std::size_t max_nodes = 1'000'000;
    // Recompute only from the flipped site downward; false recomputes the
    // whole network after every node (reference mode).
    bool incremental = true;
    // Re-capture the pattern at every segment midpoint and repair drift.
    bool verify_midpoints = true;
    OutputScaling scaling = OutputScaling::PerPair;
};

struct PathProfile {
    std::vector<PathNode> nodes;                   // strictly increasing t in (0, 1)
    std::vector<ActivationPattern> segment_patterns;  // nodes.size() + 1
    // Row k: gradient R_k of every output component on segment k (scaled).
    Matrix gradients;
    // Row k: scaled output on segment k is offsets.row(k) + t * slopes.row(k).
    Matrix offsets;
    Matrix slopes;
    double norm_scale = 1.0;
    std::size_t repairs = 0;  // midpoint re-captures that changed the pattern

    std::size_t node_count() const { return nodes.size(); }
    std::size_t components() const { return static_cast<std::size_t>(gradients.cols()); }
    // Scaled output of segment k evaluated at t.
    Vector segment_output(std::size_t k, double t) const;
};

// Per-pair output scale for `scaling`.
double path_norm_scale(const LayerGraph& net, const LinearPath& path, OutputScaling scaling);

PathProfile walk_path(const LayerGraph& net, const LinearPath& path, const WalkOptions& options = {});

// Directional gradient of every component on a segment with the given
// pattern: forward_fixed(net, unit_direction, pattern) / norm_scale.
Vector segment_gradients(const LayerGraph& net, const LinearPath& path,
                         const ActivationPattern& pattern, double norm_scale);
double segment_gradient(const LayerGraph& net, const LinearPath& path,
                        const ActivationPattern& pattern, std::size_t component, double norm_scale);

// Y_k = R_k - R_{k-1}, k = 1..K.
std::vector<double> gradient_gaps(const PathProfile& profile, std::size_t component);

// Gradient jump between two patterns that differ at a single site,
// evaluated directly as W_L G_L ... (G'_l - G_l) W_l ... W_1 xi / norm_scale.
Vector gap_product_form(const LayerGraph& net, const LinearPath& path, const ActivationPattern& before,
                        const ActivationPattern& after, double norm_scale);

// ---------------------------------------------------------------------------
// Oracles (independent of the walk; evaluated in extended precision)

// Central difference (u(t+h) - u(t-h)) / (2 h |v|) / norm_scale for every
// component. Throws if t - h and t + h are not in the segment containing t.
Vector fd_gradient_oracle(const LayerGraph& net, const LinearPath& path, double t, double h,
                          double norm_scale);

// Number of cells of a uniform grid with `grid` cells on [0, 1] across which
// any unit changes sign. Undercounts when nodes are closer than 1 / grid.
std::size_t dense_node_oracle(const LayerGraph& net, const LinearPath& path, std::size_t grid);

}  // namespace relubridge
