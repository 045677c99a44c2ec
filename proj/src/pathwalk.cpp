#include "relubridge/pathwalk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace relubridge {

Vector LinearPath::at(double t) const {
    if (t == 0.0) return x0;
    if (t == 1.0) return x1;
    return (1.0 - t) * x0 + t * x1;
}

LinearPath LinearPath::reversed() const { return make_path(x1, x0); }

LinearPath make_path(const Vector& x0, const Vector& x1) {
    require(x0.size() == x1.size(), ErrorKind::Shape, "path endpoints differ in dimension");
    require(x0.size() > 0, ErrorKind::Shape, "path endpoints are empty");
    require(x0.allFinite() && x1.allFinite(), ErrorKind::Numeric, "path endpoints are not finite");
    LinearPath path;
    path.x0 = x0;
    path.x1 = x1;
    path.direction = x1 - x0;
    path.direction_norm = path.direction.norm();
    require(path.direction_norm > 0.0, ErrorKind::Shape, "path endpoints must differ (x0 != x1)");
    path.unit_direction = path.direction / path.direction_norm;
    return path;
}

Vector PathProfile::segment_output(std::size_t k, double t) const {
    return (offsets.row(static_cast<Eigen::Index>(k)) + t * slopes.row(static_cast<Eigen::Index>(k)))
        .transpose();
}

double path_norm_scale(const LayerGraph& net, const LinearPath& path, OutputScaling scaling) {
    if (scaling == OutputScaling::None) return 1.0;
    const double scale = 0.5 * (forward(net, path.x0).norm + forward(net, path.x1).norm);
    require(scale > 0.0 && std::isfinite(scale), ErrorKind::Numeric,
            "output norm at both endpoints is zero; cannot normalize");
    return scale;
}

// ---------------------------------------------------------------------------

namespace {

// Preactivations at each site are tracked as a width x 2 matrix whose
// columns are the slope a (propagated from v) and intercept b (from x0):
// g(t) = b + a t under the current pattern.
class Walker {
public:
    Walker(const LayerGraph& net, const LinearPath& path, const WalkOptions& options)
        : net_(net), program_(net.program()), path_(path), options_(options),
          pattern_(net.empty_pattern()), snapshots_(net.site_widths().size()) {}

    PathProfile run() {
        PathProfile profile;
        profile.norm_scale = path_norm_scale(net_, path_, options_.scaling);
        const double inv_scale = 1.0 / profile.norm_scale;
        const std::size_t c = net_.output_dim();

        evaluate_all(/*choose_bits=*/true);

        std::vector<Vector> grads, offs, slopes;
        double t_cur = 0.0;
        while (true) {
            Event event = next_event(t_cur);
            for (int attempt = 0; options_.verify_midpoints && attempt < kMaxRepairs; ++attempt) {
                const double t_end = event.found ? event.t : 1.0;
                if (t_end - t_cur <= kMinVerifiedLength) break;
                const ActivationPattern mid = capture_pattern(net_, path_.at(0.5 * (t_cur + t_end)));
                if (mid == pattern_) break;
                pattern_ = mid;
                ++profile.repairs;
                evaluate_all(/*choose_bits=*/false);
                event = next_event(t_cur);
            }

            profile.segment_patterns.push_back(pattern_);
            slopes.emplace_back(output_.col(0) * inv_scale);
            offs.emplace_back(output_.col(1) * inv_scale);
            grads.emplace_back(output_.col(0) * (inv_scale / path_.direction_norm));
            if (!event.found) break;

            require(profile.nodes.size() < options_.max_nodes, ErrorKind::Numeric,
                    "node count exceeds cap of " + std::to_string(options_.max_nodes) +
                        "; pathological input");
            profile.nodes.push_back({event.t, event.unit});
            auto& bit = pattern_.sites[event.unit.site][event.unit.unit];
            bit = bit ? 0 : 1;
            if (options_.incremental)
                evaluate_from(event.unit.site);
            else
                evaluate_all(/*choose_bits=*/false);
            t_cur = event.t;
        }

        const auto rows = static_cast<Eigen::Index>(grads.size());
        profile.gradients.resize(rows, static_cast<Eigen::Index>(c));
        profile.offsets.resize(rows, static_cast<Eigen::Index>(c));
        profile.slopes.resize(rows, static_cast<Eigen::Index>(c));
        for (Eigen::Index k = 0; k < rows; ++k) {
            profile.gradients.row(k) = grads[static_cast<std::size_t>(k)].transpose();
            profile.offsets.row(k) = offs[static_cast<std::size_t>(k)].transpose();
            profile.slopes.row(k) = slopes[static_cast<std::size_t>(k)].transpose();
        }
        return profile;
    }

private:
    static constexpr int kMaxRepairs = 4;
    // Segments shorter than this are not re-captured: their midpoint
    // preactivations sit within rounding of zero.
    static constexpr double kMinVerifiedLength = 1e-9;
    static constexpr double kSlopeFloor = 1e-14;

    struct Event {
        bool found = false;
        double t = 1.0;
        UnitId unit;
    };

    void apply_mask(std::size_t site, Matrix& value) const {
        const auto& bits = pattern_.sites[site];
        for (Eigen::Index i = 0; i < value.rows(); ++i)
            if (!bits[static_cast<std::size_t>(i)]) value.row(i).setZero();
    }

    void snapshot(std::size_t site, const Program::State& state) {
        require(state.value.allFinite(), ErrorKind::Numeric, "non-finite preactivation on path");
        snapshots_[site] = state;
    }

    // Full evaluation. With choose_bits, each unit's bit is its sign just
    // after t = 0 (the sign of b, or of a when b is exactly zero).
    void evaluate_all(bool choose_bits) {
        Program::State state;
        state.value.resize(static_cast<Eigen::Index>(net_.input_dim()), 2);
        state.value.col(0) = path_.direction;
        state.value.col(1) = path_.x0;
        program_.run(state, 0, [&](std::size_t site, Program::State& st) {
            snapshot(site, st);
            if (choose_bits) {
                auto& bits = pattern_.sites[site];
                for (Eigen::Index i = 0; i < st.value.rows(); ++i) {
                    const double a = st.value(i, 0), b = st.value(i, 1);
                    bits[static_cast<std::size_t>(i)] = (b > 0.0 || (b == 0.0 && a >= 0.0)) ? 1 : 0;
                }
            }
            apply_mask(site, st.value);
        });
        output_ = std::move(state.value);
    }

    // Re-evaluates everything downstream of `site` after its mask changed.
    void evaluate_from(std::size_t site) {
        Program::State state = snapshots_[site];
        apply_mask(site, state.value);
        program_.run(state, program_.site_ops[site] + 1, [&](std::size_t s, Program::State& st) {
            snapshot(s, st);
            apply_mask(s, st.value);
        });
        output_ = std::move(state.value);
    }

    // Earliest unit that reaches zero while moving against its current bit.
    Event next_event(double t_cur) const {
        const double eps_adv = 1e-12 * (1.0 - t_cur);
        double r_min = std::numeric_limits<double>::infinity();
        struct Candidate {
            double r;
            UnitId unit;
        };
        std::vector<Candidate> candidates;
        for (std::size_t s = 0; s < snapshots_.size(); ++s) {
            const Matrix& pre = snapshots_[s].value;
            if (pre.rows() == 0) continue;
            const double floor = kSlopeFloor * pre.col(0).cwiseAbs().maxCoeff();
            const auto& bits = pattern_.sites[s];
            for (Eigen::Index i = 0; i < pre.rows(); ++i) {
                const double a = pre(i, 0);
                const bool active = bits[static_cast<std::size_t>(i)] != 0;
                if (a == 0.0 && pre(i, 1) == 0.0) {
                    // Identically zero once every input is masked: zero counts
                    // as active, so an inactive unit flips immediately.
                    if (!active) {
                        candidates.push_back({t_cur, {s, static_cast<std::size_t>(i)}});
                        r_min = std::min(r_min, t_cur);
                    }
                    continue;
                }
                if (std::abs(a) <= floor || a == 0.0) continue;
                if (active ? !(a < 0.0) : !(a > 0.0)) continue;
                const double r = -pre(i, 1) / a;
                if (!(r < 1.0)) continue;
                candidates.push_back({r, {s, static_cast<std::size_t>(i)}});
                r_min = std::min(r_min, r);
            }
        }
        Event event;
        // Candidates are in ascending (site, unit) order; coincident roots
        // go to the lowest unit first, one flip per node.
        for (const auto& cand : candidates) {
            if (cand.r <= r_min + eps_adv) {
                event.found = true;
                event.unit = cand.unit;
                event.t = cand.r > t_cur ? cand.r : std::nextafter(t_cur, 2.0);
                require(event.t < 1.0, ErrorKind::Numeric, "node advance reached the path end");
                break;
            }
        }
        return event;
    }

    const LayerGraph& net_;
    const Program& program_;
    const LinearPath& path_;
    const WalkOptions& options_;
    ActivationPattern pattern_;
    std::vector<Program::State> snapshots_;  // per-site preactivations + skips
    Matrix output_;                          // c x 2
};

}  // namespace

PathProfile walk_path(const LayerGraph& net, const LinearPath& path, const WalkOptions& options) {
    require(path.dim() == net.input_dim(), ErrorKind::Shape,
            "path dimension " + std::to_string(path.dim()) + " does not match network input " +
                std::to_string(net.input_dim()));
    return Walker(net, path, options).run();
}

Vector segment_gradients(const LayerGraph& net, const LinearPath& path,
                         const ActivationPattern& pattern, double norm_scale) {
    require(norm_scale > 0.0, ErrorKind::Numeric, "norm scale must be positive");
    return forward_fixed(net, path.unit_direction, pattern).values / norm_scale;
}

double segment_gradient(const LayerGraph& net, const LinearPath& path,
                        const ActivationPattern& pattern, std::size_t component, double norm_scale) {
    require(component < net.output_dim(), ErrorKind::Shape,
            "component " + std::to_string(component) + " out of range");
    return segment_gradients(net, path, pattern, norm_scale)(static_cast<Eigen::Index>(component));
}

std::vector<double> gradient_gaps(const PathProfile& profile, std::size_t component) {
    require(component < profile.components(), ErrorKind::Shape, "component out of range");
    const auto j = static_cast<Eigen::Index>(component);
    std::vector<double> gaps;
    gaps.reserve(profile.node_count());
    for (Eigen::Index k = 1; k < profile.gradients.rows(); ++k)
        gaps.push_back(profile.gradients(k, j) - profile.gradients(k - 1, j));
    return gaps;
}

Vector gap_product_form(const LayerGraph& net, const LinearPath& path, const ActivationPattern& before,
                        const ActivationPattern& after, double norm_scale) {
    require(path.dim() == net.input_dim(), ErrorKind::Shape, "path dimension mismatch");
    const auto diff = pattern_difference(before, after);
    if (diff.empty()) return Vector::Zero(static_cast<Eigen::Index>(net.output_dim()));
    const std::size_t changed = diff.front().site;
    for (const auto& u : diff)
        require(u.site == changed, ErrorKind::Shape, "patterns differ at more than one site");

    Program::State state{path.unit_direction, {}};
    net.program().run(state, 0, [&](std::size_t site, Program::State& st) {
        if (site == changed) {
            // Only the (G' - G) term survives; contributions that bypass
            // this site through pending shortcuts cancel in the difference.
            for (Eigen::Index i = 0; i < st.value.rows(); ++i) {
                const auto idx = static_cast<std::size_t>(i);
                st.value(i, 0) *= static_cast<double>(after.sites[site][idx]) -
                                  static_cast<double>(before.sites[site][idx]);
            }
            for (auto& skip : st.skips) skip.setZero();
        } else {
            const auto& bits = before.sites[site];
            for (Eigen::Index i = 0; i < st.value.rows(); ++i)
                if (!bits[static_cast<std::size_t>(i)]) st.value(i, 0) = 0.0;
        }
    });
    return state.value.col(0) / norm_scale;
}

// ---------------------------------------------------------------------------
// Extended-precision reference evaluation, written against the layer
// descriptors directly (no induced matrices, no Program).

namespace {

using LongVec = std::vector<long double>;

struct LongEval {
    LongVec output;
    std::vector<std::vector<std::uint8_t>> bits;
};

LongVec long_linear(const BranchLayer& layer, const LongVec& x) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
        LongVec y(dense->out_dim(), 0.0L);
        for (std::size_t r = 0; r < y.size(); ++r) {
            long double acc = 0.0L;
            for (std::size_t c = 0; c < x.size(); ++c)
                acc += static_cast<long double>(
                           dense->weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) *
                       x[c];
            y[r] = acc;
        }
        return y;
    }
    const auto& conv = std::get<Conv2DLayer>(layer);
    const auto& g = conv.geometry;
    const std::size_t oh = g.out_height(), ow = g.out_width();
    LongVec y(g.out_dim(), 0.0L);
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                long double acc = 0.0L;
                for (std::size_t ic = 0; ic < g.in_channels; ++ic)
                    for (std::size_t ky = 0; ky < g.kernel_height; ++ky)
                        for (std::size_t kx = 0; kx < g.kernel_width; ++kx) {
                            const long long iy = static_cast<long long>(oy * g.stride + ky) -
                                                 static_cast<long long>(g.padding);
                            const long long ix = static_cast<long long>(ox * g.stride + kx) -
                                                 static_cast<long long>(g.padding);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long long>(g.in_height) ||
                                ix >= static_cast<long long>(g.in_width))
                                continue;
                            const double w =
                                conv.kernel[((oc * g.in_channels + ic) * g.kernel_height + ky) *
                                                g.kernel_width +
                                            kx];
                            acc += static_cast<long double>(w) *
                                   x[(ic * g.in_height + static_cast<std::size_t>(iy)) * g.in_width +
                                     static_cast<std::size_t>(ix)];
                        }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
    return y;
}

void long_relu(LongVec& x, std::vector<std::vector<std::uint8_t>>& bits) {
    std::vector<std::uint8_t> site(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        site[i] = x[i] >= 0.0L ? 1 : 0;
        if (!site[i]) x[i] = 0.0L;
    }
    bits.push_back(std::move(site));
}

LongEval long_forward(const LayerGraph& net, const LongVec& input) {
    LongEval eval;
    LongVec h = input;
    const auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (const auto* res = std::get_if<ResidualLayer>(&layers[i])) {
            LongVec b = h;
            for (std::size_t j = 0; j < res->branch.size(); ++j) {
                b = long_linear(res->branch[j], b);
                if (j + 1 < res->branch.size()) long_relu(b, eval.bits);
            }
            for (std::size_t k = 0; k < h.size(); ++k) h[k] += b[k];
        } else if (const auto* dense = std::get_if<DenseLayer>(&layers[i])) {
            h = long_linear(*dense, h);
        } else {
            h = long_linear(std::get<Conv2DLayer>(layers[i]), h);
        }
        if (i + 1 < layers.size()) long_relu(h, eval.bits);
    }
    eval.output = std::move(h);
    return eval;
}

LongVec long_point(const LinearPath& path, long double t) {
    LongVec x(path.dim());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto idx = static_cast<Eigen::Index>(i);
        x[i] = (1.0L - t) * static_cast<long double>(path.x0(idx)) +
               t * static_cast<long double>(path.x1(idx));
    }
    return x;
}

}  // namespace

Vector fd_gradient_oracle(const LayerGraph& net, const LinearPath& path, double t, double h,
                          double norm_scale) {
    require(path.dim() == net.input_dim(), ErrorKind::Shape, "path dimension mismatch");
    require(h > 0.0 && norm_scale > 0.0, ErrorKind::Numeric, "step and scale must be positive");
    const long double lt = t, lh = h;
    const LongEval lo = long_forward(net, long_point(path, lt - lh));
    const LongEval mid = long_forward(net, long_point(path, lt));
    const LongEval hi = long_forward(net, long_point(path, lt + lh));
    require(lo.bits == mid.bits && hi.bits == mid.bits, ErrorKind::Numeric,
            "finite-difference stencil straddles a node");
    const long double denom =
        2.0L * lh * static_cast<long double>(path.direction_norm) * static_cast<long double>(norm_scale);
    Vector out(static_cast<Eigen::Index>(net.output_dim()));
    for (std::size_t j = 0; j < net.output_dim(); ++j)
        out(static_cast<Eigen::Index>(j)) = static_cast<double>((hi.output[j] - lo.output[j]) / denom);
    return out;
}

std::size_t dense_node_oracle(const LayerGraph& net, const LinearPath& path, std::size_t grid) {
    require(path.dim() == net.input_dim(), ErrorKind::Shape, "path dimension mismatch");
    require(grid >= 1, ErrorKind::Shape, "grid must have at least one cell");
    const std::size_t units = net.hidden_units();
    const auto& widths = net.site_widths();
    std::vector<std::size_t> site_offset(widths.size(), 0);
    for (std::size_t s = 1; s < widths.size(); ++s) site_offset[s] = site_offset[s - 1] + widths[s - 1];

    constexpr std::size_t kChunk = 4096;
    std::vector<std::uint8_t> prev(units), bits;
    std::size_t crossings = 0;
    bool have_prev = false;
    for (std::size_t start = 0; start <= grid; start += kChunk) {
        const std::size_t count = std::min(kChunk, grid + 1 - start);
        Program::State state;
        state.value.resize(static_cast<Eigen::Index>(net.input_dim()), static_cast<Eigen::Index>(count));
        for (std::size_t c = 0; c < count; ++c) {
            const double t = static_cast<double>(start + c) / static_cast<double>(grid);
            state.value.col(static_cast<Eigen::Index>(c)) = path.at(t);
        }
        bits.assign(units * count, 0);
        net.program().run(state, 0, [&](std::size_t site, Program::State& st) {
            for (Eigen::Index c = 0; c < st.value.cols(); ++c)
                for (Eigen::Index i = 0; i < st.value.rows(); ++i) {
                    double& v = st.value(i, c);
                    const bool active = v >= 0.0;
                    bits[static_cast<std::size_t>(c) * units + site_offset[site] +
                         static_cast<std::size_t>(i)] = active ? 1 : 0;
                    if (!active) v = 0.0;
                }
        });
        for (std::size_t c = 0; c < count; ++c) {
            const auto* cur = bits.data() + c * units;
            if (have_prev && !std::equal(cur, cur + units, prev.begin())) ++crossings;
            std::copy(cur, cur + units, prev.begin());
            have_prev = true;
        }
    }
    return crossings;
}

}  // namespace relubridge
