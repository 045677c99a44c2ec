#pragma once

// Random-walk-bridge statistics for gradient profiles along input paths.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "relubridge/pathwalk.hpp"
#include "relubridge/random.hpp"

namespace relubridge {

// Pooled gradient gaps with the zero-mean second moment: sigma^2 = mean(y^2).
struct GapDistribution {
    std::vector<double> samples;
    double sigma = 0.0;
    std::size_t count = 0;
};

GapDistribution empirical_gap_sigma(std::vector<double> gaps);

// sigma * sqrt(k (1 - k / K)), 0 <= k <= K.
double bridge_deviation_theory(std::size_t k, std::size_t K, double sigma);

// Bridge deviation at the midpoint, sigma * sqrt(K) / 2.
double bridge_midpoint_deviation(double sigma, std::size_t K);

struct IncrementSampler {
    std::function<double(Rng&)> draw;  // zero-mean
    double sigma = 1.0;                // its standard deviation
};

IncrementSampler gaussian_increments(double sigma);

struct BridgeStats {
    std::size_t K = 0;
    std::size_t trials = 0;
    std::vector<double> deviation_profile;   // theory, k = 0..K
    std::vector<double> empirical_profile;   // sqrt of empirical variance
    std::vector<double> empirical_variance;  // unbiased sample variance of T_k
    std::vector<double> variance_se;         // Monte Carlo standard error of the above
    std::vector<double> mean;                // sample mean of T_k
    bool endpoints_pinned = true;            // T_0 = T_K = 0 in every trial
};

// Simulates S_k = s0 + sum_{i<=k} Z_i and T_k = (S_k - S_0) - (k/K)(S_K - S_0).
// Trials are split into fixed-size shards with derived seeds, so results do
// not depend on `threads`.
BridgeStats bridge_simulate(const IncrementSampler& sampler, std::size_t K, std::pair<double, double> endpoints,
                            std::size_t trials, std::uint64_t seed, std::size_t threads = 1);

// 1 / sqrt(d): the midpoint gradient gap deviation of a freshly initialized
// two-layer network.
double midpoint_deviation_theory_2layer(std::size_t m, std::size_t d);

// Gap variance for a unit in hidden layer `layer` (1-based): 4/(md) for the
// first layer, 4/m^2 deeper.
double gap_variance_theory(std::size_t layer, std::size_t m, std::size_t d);

struct NodeCountCheck {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0;  // unbiased
    double se_mean = 0.0;
    double se_variance = 0.0;
    double z_mean = 0.0;
    double z_variance = 0.0;
    double chi_square = 0.0;
    std::size_t dof = 0;
    double p_value = 1.0;
};

// Compares node counts with Binomial(m, 1/2): z-scores of mean and variance
// and a chi-square goodness-of-fit (tail bins merged to expected >= 5).
NodeCountCheck node_count_check(std::span<const std::size_t> counts, std::size_t m);

// |R_{k*} - (R_0 + (k*/K)(R_K - R_0))| at k* = floor(K/2); nullopt when K = 0.
std::optional<double> deflection_midpoint(const PathProfile& profile, std::size_t component);

// Continuous variant: |R(t) - (R_0 + t (R_K - R_0))| with R(t) the gradient
// of the segment containing t.
std::optional<double> deflection_at(const PathProfile& profile, std::size_t component, double t);

// Gap sigma of one profile, pooled over all components.
GapDistribution profile_gap_sigma(const PathProfile& profile);

// sigma_hat * sqrt(k* (1 - k*/K)) for one profile; nullopt when K = 0.
std::optional<double> gap_deviation_mid(const PathProfile& profile);

// RMS of gap_deviation_mid over profiles with K >= 1.
double gap_deviation_empirical(std::span<const PathProfile> profiles);

double rms(std::span<const double> values);

// f_label - max_{j != label} f_j of a unit-norm output.
double margin(const OutputVector& fnorm, std::size_t label);

double pair_margin(double m_i, double m_j);

// |(u0 + u1) / 2 - umid|_2
double pair_fluctuation(const Vector& u0, const Vector& u1, const Vector& umid);

}  // namespace relubridge
