#include "relubridge/stats.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

namespace relubridge {

GapDistribution empirical_gap_sigma(std::vector<double> gaps) {
    require(gaps.size() >= 2, ErrorKind::Numeric, "gap pool needs at least two samples");
    double sum_sq = 0.0;
    for (double y : gaps) sum_sq += y * y;
    GapDistribution dist;
    dist.count = gaps.size();
    dist.sigma = std::sqrt(sum_sq / static_cast<double>(gaps.size()));
    dist.samples = std::move(gaps);
    return dist;
}

double bridge_deviation_theory(std::size_t k, std::size_t K, double sigma) {
    require(K >= 1, ErrorKind::Shape, "bridge length must be >= 1");
    require(k <= K, ErrorKind::Shape, "bridge index out of range");
    require(sigma >= 0.0, ErrorKind::Numeric, "sigma must be non-negative");
    const double kk = static_cast<double>(k);
    // k (K - k) / K keeps value(k) == value(K - k) bit-for-bit.
    return sigma * std::sqrt(kk * static_cast<double>(K - k) / static_cast<double>(K));
}

double bridge_midpoint_deviation(double sigma, std::size_t K) {
    return 0.5 * sigma * std::sqrt(static_cast<double>(K));
}

IncrementSampler gaussian_increments(double sigma) {
    require(sigma >= 0.0, ErrorKind::Numeric, "sigma must be non-negative");
    return {[sigma](Rng& rng) { return sigma * rng.normal(); }, sigma};
}

namespace {

struct BridgeMoments {
    std::vector<double> s1, s2, s3, s4;
    bool pinned = true;

    explicit BridgeMoments(std::size_t n) : s1(n, 0.0), s2(n, 0.0), s3(n, 0.0), s4(n, 0.0) {}
    void add(const BridgeMoments& o) {
        for (std::size_t k = 0; k < s1.size(); ++k) {
            s1[k] += o.s1[k];
            s2[k] += o.s2[k];
            s3[k] += o.s3[k];
            s4[k] += o.s4[k];
        }
        pinned = pinned && o.pinned;
    }
};

constexpr std::size_t kBridgeShard = 4096;

BridgeMoments simulate_shard(const IncrementSampler& sampler, std::size_t K, double s0, std::size_t trials,
                             std::uint64_t seed) {
    BridgeMoments m(K + 1);
    Rng rng(seed);
    std::vector<double> s(K + 1);
    for (std::size_t trial = 0; trial < trials; ++trial) {
        s[0] = s0;
        for (std::size_t k = 1; k <= K; ++k) s[k] = s[k - 1] + sampler.draw(rng);
        const double total = s[K] - s[0];
        for (std::size_t k = 0; k <= K; ++k) {
            const double frac = static_cast<double>(k) / static_cast<double>(K);
            const double t = (s[k] - s[0]) - frac * total;
            if ((k == 0 || k == K) && t != 0.0) m.pinned = false;
            const double t2 = t * t;
            m.s1[k] += t;
            m.s2[k] += t2;
            m.s3[k] += t2 * t;
            m.s4[k] += t2 * t2;
        }
    }
    return m;
}

}  // namespace

BridgeStats bridge_simulate(const IncrementSampler& sampler, std::size_t K, std::pair<double, double> endpoints,
                            std::size_t trials, std::uint64_t seed, std::size_t threads) {
    require(K >= 1, ErrorKind::Shape, "bridge length must be >= 1");
    require(trials >= 2, ErrorKind::Shape, "bridge simulation needs at least two trials");
    require(static_cast<bool>(sampler.draw), ErrorKind::Config, "no increment sampler");

    const std::size_t shards = (trials + kBridgeShard - 1) / kBridgeShard;
    std::vector<BridgeMoments> parts(shards, BridgeMoments(K + 1));
    auto work = [&](std::size_t first) {
        for (std::size_t i = first; i < shards; i += std::max<std::size_t>(threads, 1)) {
            const std::size_t n = std::min(kBridgeShard, trials - i * kBridgeShard);
            parts[i] = simulate_shard(sampler, K, endpoints.first, n, derive_seed(seed, i));
        }
    };
    if (threads <= 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }
    BridgeMoments total(K + 1);
    for (const auto& p : parts) total.add(p);

    BridgeStats stats;
    stats.K = K;
    stats.trials = trials;
    stats.endpoints_pinned = total.pinned;
    const double n = static_cast<double>(trials);
    for (std::size_t k = 0; k <= K; ++k) {
        const double mu = total.s1[k] / n;
        const double raw2 = total.s2[k] / n, raw3 = total.s3[k] / n, raw4 = total.s4[k] / n;
        const double central2 = std::max(0.0, raw2 - mu * mu);
        const double central4 =
            std::max(0.0, raw4 - 4.0 * mu * raw3 + 6.0 * mu * mu * raw2 - 3.0 * mu * mu * mu * mu);
        const double var = central2 * n / (n - 1.0);
        stats.mean.push_back(mu);
        stats.empirical_variance.push_back(var);
        stats.empirical_profile.push_back(std::sqrt(var));
        stats.variance_se.push_back(std::sqrt(std::max(0.0, central4 - central2 * central2) / n));
        stats.deviation_profile.push_back(bridge_deviation_theory(k, K, sampler.sigma));
    }
    return stats;
}

double midpoint_deviation_theory_2layer(std::size_t m, std::size_t d) {
    require(m >= 1 && d >= 1, ErrorKind::Shape, "width and input dimension must be >= 1");
    return 1.0 / std::sqrt(static_cast<double>(d));
}

double gap_variance_theory(std::size_t layer, std::size_t m, std::size_t d) {
    require(layer >= 1, ErrorKind::Shape, "layer index is 1-based");
    require(m >= 1, ErrorKind::Shape, "width must be >= 1");
    const double md = static_cast<double>(m);
    if (layer == 1) {
        require(d >= 1, ErrorKind::Shape, "input dimension must be >= 1");
        return 4.0 / (md * static_cast<double>(d));
    }
    return 4.0 / (md * md);
}

NodeCountCheck node_count_check(std::span<const std::size_t> counts, std::size_t m) {
    require(counts.size() >= 30, ErrorKind::Shape, "node count check needs at least 30 samples");
    require(m >= 1, ErrorKind::Shape, "width must be >= 1");
    NodeCountCheck out;
    out.n = counts.size();
    const double n = static_cast<double>(out.n);
    double sum = 0.0;
    for (auto c : counts) {
        require(c <= m, ErrorKind::Shape, "node count exceeds unit count");
        sum += static_cast<double>(c);
    }
    out.mean = sum / n;
    double ss = 0.0;
    for (auto c : counts) ss += (static_cast<double>(c) - out.mean) * (static_cast<double>(c) - out.mean);
    out.variance = ss / (n - 1.0);

    const double mm = static_cast<double>(m);
    const double mu = mm / 2.0, var = mm / 4.0;
    // Fourth central moment of Binomial(m, 1/2).
    const double mu4 = var * (1.0 + 3.0 * (mm - 2.0) / 4.0);
    out.se_mean = std::sqrt(var / n);
    out.se_variance = std::sqrt((mu4 - var * var * (n - 3.0) / (n - 1.0)) / n);
    out.z_mean = (out.mean - mu) / out.se_mean;
    out.z_variance = out.se_variance > 0.0 ? (out.variance - var) / out.se_variance : 0.0;

    // Chi-square goodness of fit with tail bins merged until expected >= 5.
    const boost::math::binomial_distribution<double> binom(mm, 0.5);
    std::vector<double> observed(m + 1, 0.0), expected(m + 1, 0.0);
    for (auto c : counts) observed[c] += 1.0;
    for (std::size_t k = 0; k <= m; ++k) expected[k] = n * boost::math::pdf(binom, static_cast<double>(k));

    struct Bin {
        double obs = 0.0, exp = 0.0;
    };
    std::vector<Bin> bins;
    Bin acc;
    for (std::size_t k = 0; k <= m; ++k) {
        acc.obs += observed[k];
        acc.exp += expected[k];
        if (acc.exp >= 5.0) {
            bins.push_back(acc);
            acc = {};
        }
    }
    if (acc.exp > 0.0 || acc.obs > 0.0) {
        if (bins.empty()) {
            bins.push_back(acc);
        } else {
            bins.back().obs += acc.obs;
            bins.back().exp += acc.exp;
        }
    }
    if (bins.size() >= 2) {
        for (const auto& b : bins) out.chi_square += (b.obs - b.exp) * (b.obs - b.exp) / b.exp;
        out.dof = bins.size() - 1;
        const boost::math::chi_squared_distribution<double> chi(static_cast<double>(out.dof));
        out.p_value = boost::math::cdf(boost::math::complement(chi, out.chi_square));
    }
    return out;
}

std::optional<double> deflection_midpoint(const PathProfile& profile, std::size_t component) {
    require(component < profile.components(), ErrorKind::Shape, "component out of range");
    const std::size_t K = profile.node_count();
    if (K == 0) return std::nullopt;
    const std::size_t ks = K / 2;
    const auto j = static_cast<Eigen::Index>(component);
    const double r0 = profile.gradients(0, j);
    const double rK = profile.gradients(static_cast<Eigen::Index>(K), j);
    const double rk = profile.gradients(static_cast<Eigen::Index>(ks), j);
    const double chord = r0 + (static_cast<double>(ks) / static_cast<double>(K)) * (rK - r0);
    return std::abs(rk - chord);
}

std::optional<double> deflection_at(const PathProfile& profile, std::size_t component, double t) {
    require(component < profile.components(), ErrorKind::Shape, "component out of range");
    require(t >= 0.0 && t <= 1.0, ErrorKind::Shape, "t must lie in [0, 1]");
    const std::size_t K = profile.node_count();
    if (K == 0) return std::nullopt;
    std::size_t seg = 0;
    while (seg < K && profile.nodes[seg].t <= t) ++seg;
    const auto j = static_cast<Eigen::Index>(component);
    const double r0 = profile.gradients(0, j);
    const double rK = profile.gradients(static_cast<Eigen::Index>(K), j);
    return std::abs(profile.gradients(static_cast<Eigen::Index>(seg), j) - (r0 + t * (rK - r0)));
}

GapDistribution profile_gap_sigma(const PathProfile& profile) {
    std::vector<double> pooled;
    pooled.reserve(profile.node_count() * profile.components());
    for (std::size_t j = 0; j < profile.components(); ++j) {
        const auto gaps = gradient_gaps(profile, j);
        pooled.insert(pooled.end(), gaps.begin(), gaps.end());
    }
    return empirical_gap_sigma(std::move(pooled));
}

std::optional<double> gap_deviation_mid(const PathProfile& profile) {
    const std::size_t K = profile.node_count();
    if (K == 0) return std::nullopt;
    if (profile.components() * K < 2) return 0.0;
    return bridge_deviation_theory(K / 2, K, profile_gap_sigma(profile).sigma);
}

double gap_deviation_empirical(std::span<const PathProfile> profiles) {
    std::vector<double> values;
    for (const auto& p : profiles)
        if (auto v = gap_deviation_mid(p)) values.push_back(*v);
    require(!values.empty(), ErrorKind::Numeric, "no profile with at least one node");
    return rms(values);
}

double rms(std::span<const double> values) {
    require(!values.empty(), ErrorKind::Numeric, "RMS of an empty set");
    double ss = 0.0;
    for (double v : values) ss += v * v;
    return std::sqrt(ss / static_cast<double>(values.size()));
}

double margin(const OutputVector& fnorm, std::size_t label) {
    require(label < fnorm.size(), ErrorKind::Shape, "label out of range");
    require(fnorm.size() >= 2, ErrorKind::Shape, "margin needs at least two classes");
    require(std::abs(fnorm.values.norm() - 1.0) <= 1e-9, ErrorKind::Numeric, "margin expects a unit-norm output");
    double best_other = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < fnorm.values.size(); ++j)
        if (static_cast<std::size_t>(j) != label) best_other = std::max(best_other, fnorm.values(j));
    return fnorm.values(static_cast<Eigen::Index>(label)) - best_other;
}

double pair_margin(double m_i, double m_j) { return 0.5 * (m_i + m_j); }

double pair_fluctuation(const Vector& u0, const Vector& u1, const Vector& umid) {
    require(u0.size() == u1.size() && u0.size() == umid.size(), ErrorKind::Shape,
            "pair fluctuation: dimension mismatch");
    return (0.5 * (u0 + u1) - umid).norm();
}

}  // namespace relubridge
