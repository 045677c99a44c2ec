#pragma once

// Datasets: MNIST-style IDX files, CIFAR-10 binary batches, synthetic
// Gaussian inputs, and seeded sampling of input pairs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "relubridge/network.hpp"

namespace relubridge {

using DataMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
    DataMatrix inputs;  // n x d
    std::vector<std::uint32_t> labels;
    std::size_t classes = 0;
    std::string provenance;

    std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }
    Vector input(std::size_t i) const { return inputs.row(static_cast<Eigen::Index>(i)).transpose(); }
};

// Checks labels < classes, finite inputs, n >= 1.
void validate(const Dataset& data);

// IDX image/label files (optionally gzip-compressed). Pixels scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// CIFAR-10 binary batches: a single file, or a directory whose
// data_batch_*.bin files are read in name order.
Dataset load_cifar10(const std::filesystem::path& path);

// n x d i.i.d. N(0, 1) inputs, all labels 0.
Dataset synth_gaussian(std::size_t n, std::size_t d, std::uint64_t seed);

// First n samples.
Dataset take(const Dataset& data, std::size_t n);

// Internal cache: "RPDS1", u64 n, u64 d, u32 c, n*d f64, n u32 (little-endian).
void save_cache(const Dataset& data, const std::filesystem::path& path);
Dataset load_cache(const std::filesystem::path& path);

struct PairSample {
    std::size_t i = 0;
    std::size_t j = 0;
    Vector xi;
    Vector xj;
};

enum class PairMode { Any, WithinClass };

// `count` independent pairs with i != j and x_i != x_j; exact duplicates
// are redrawn.
std::vector<PairSample> sample_pairs(const Dataset& data, std::size_t count, std::uint64_t seed,
                                     PairMode mode = PairMode::Any);

}  // namespace relubridge
