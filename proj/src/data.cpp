#include "relubridge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <zlib.h>

#include "relubridge/binary_io.hpp"
#include "relubridge/random.hpp"

namespace relubridge {

namespace binary {

std::string read_file(const std::filesystem::path& path) {
    // gzread passes uncompressed files through unchanged.
    gzFile file = gzopen(path.c_str(), "rb");
    if (!file) fail(ErrorKind::Data, "cannot open " + path.string());
    std::string out;
    char chunk[1 << 16];
    int n;
    while ((n = gzread(file, chunk, sizeof chunk)) > 0) out.append(chunk, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(file);
    if (failed) fail(ErrorKind::Data, "read error in " + path.string());
    return out;
}

void write_file(const std::filesystem::path& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) fail(ErrorKind::Data, "write error in " + path.string());
}

}  // namespace binary

namespace {

std::uint32_t read_be32(std::string_view bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
    return v;
}

}  // namespace

void validate(const Dataset& data) {
    require(data.size() >= 1, ErrorKind::Data, "dataset is empty");
    require(data.labels.size() == data.size(), ErrorKind::Data, "label count does not match inputs");
    require(data.classes >= 1, ErrorKind::Data, "dataset has no classes");
    for (auto y : data.labels) require(y < data.classes, ErrorKind::Data, "label out of range");
    require(data.inputs.allFinite(), ErrorKind::Data, "dataset has non-finite inputs");
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const std::string img = binary::read_file(images);
    const std::string lab = binary::read_file(labels);
    require(img.size() >= 16, ErrorKind::Data, images.string() + ": truncated IDX header");
    require(lab.size() >= 8, ErrorKind::Data, labels.string() + ": truncated IDX header");
    require(read_be32(img, 0) == 0x00000803, ErrorKind::Data, images.string() + ": bad IDX magic for images");
    require(read_be32(lab, 0) == 0x00000801, ErrorKind::Data, labels.string() + ": bad IDX magic for labels");

    const std::size_t n = read_be32(img, 4);
    const std::size_t rows = read_be32(img, 8);
    const std::size_t cols = read_be32(img, 12);
    const std::size_t nl = read_be32(lab, 4);
    require(n == nl, ErrorKind::Data,
            "image count " + std::to_string(n) + " does not match label count " + std::to_string(nl));
    require(n >= 1 && rows * cols >= 1, ErrorKind::Data, "IDX file is empty");
    const std::size_t d = rows * cols;
    require(img.size() - 16 >= n * d, ErrorKind::Data, images.string() + ": truncated image data");
    require(lab.size() - 8 >= n, ErrorKind::Data, labels.string() + ": truncated label data");

    Dataset data;
    data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    data.labels.resize(n);
    std::uint32_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < d; ++p)
            data.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
                static_cast<unsigned char>(img[16 + i * d + p]) / 255.0;
        data.labels[i] = static_cast<unsigned char>(lab[8 + i]);
        max_label = std::max(max_label, data.labels[i]);
    }
    data.classes = std::max<std::size_t>(10, max_label + 1);
    data.provenance = "idx:" + images.string();
    return data;
}

Dataset load_cifar10(const std::filesystem::path& path) {
    constexpr std::size_t kPixels = 3072, kRecord = kPixels + 1;
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(path)) {
        for (const auto& entry : std::filesystem::directory_iterator(path)) {
            const auto name = entry.path().filename().string();
            if (name.starts_with("data_batch_") && name.ends_with(".bin")) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        require(!files.empty(), ErrorKind::Data, path.string() + ": no data_batch_*.bin files");
    } else {
        files.push_back(path);
    }

    std::vector<std::string> blobs;
    std::size_t n = 0;
    for (const auto& f : files) {
        blobs.push_back(binary::read_file(f));
        require(!blobs.back().empty() && blobs.back().size() % kRecord == 0, ErrorKind::Data,
                f.string() + ": size is not a multiple of the 3073-byte record");
        n += blobs.back().size() / kRecord;
    }
    Dataset data;
    data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kPixels));
    data.labels.reserve(n);
    data.classes = 10;
    std::size_t row = 0;
    for (const auto& blob : blobs)
        for (std::size_t r = 0; r < blob.size() / kRecord; ++r, ++row) {
            const char* rec = blob.data() + r * kRecord;
            const auto label = static_cast<unsigned char>(rec[0]);
            require(label < 10, ErrorKind::Data, "CIFAR-10 label out of range");
            data.labels.push_back(label);
            for (std::size_t p = 0; p < kPixels; ++p)
                data.inputs(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(p)) =
                    static_cast<unsigned char>(rec[1 + p]) / 255.0;
        }
    data.provenance = "cifar10:" + path.string();
    return data;
}

Dataset synth_gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
    require(n >= 1 && d >= 1, ErrorKind::Config, "synthetic dataset needs n >= 1 and d >= 1");
    Rng rng(seed);
    Dataset data;
    data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < data.inputs.size(); ++i) data.inputs.data()[i] = rng.normal();
    data.labels.assign(n, 0);
    data.classes = 1;
    data.provenance = "gaussian:seed=" + std::to_string(seed);
    return data;
}

Dataset take(const Dataset& data, std::size_t n) {
    require(n >= 1 && n <= data.size(), ErrorKind::Config, "subset size out of range");
    Dataset out;
    out.inputs = data.inputs.topRows(static_cast<Eigen::Index>(n));
    out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(n));
    out.classes = data.classes;
    out.provenance = data.provenance + "[:" + std::to_string(n) + "]";
    return out;
}

void save_cache(const Dataset& data, const std::filesystem::path& path) {
    validate(data);
    binary::Writer w;
    w.bytes("RPDS1");
    w.u64(data.size());
    w.u64(data.dim());
    w.u32(static_cast<std::uint32_t>(data.classes));
    for (Eigen::Index i = 0; i < data.inputs.size(); ++i) w.f64(data.inputs.data()[i]);
    for (auto y : data.labels) w.u32(y);
    binary::write_file(path, w.data());
}

Dataset load_cache(const std::filesystem::path& path) {
    const std::string blob = binary::read_file(path);
    binary::Reader r(blob, path.string());
    require(blob.size() >= 5 && r.bytes(5) == "RPDS1", ErrorKind::Data, path.string() + ": bad cache magic");
    const std::uint64_t n = r.u64();
    const std::uint64_t d = r.u64();
    Dataset data;
    data.classes = r.u32();
    require(n >= 1 && d >= 1, ErrorKind::Data, path.string() + ": empty cache");
    require(r.remaining() == n * d * 8 + n * 4, ErrorKind::Data,
            path.string() + ": header dimensions do not match payload length");
    data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < data.inputs.size(); ++i) data.inputs.data()[i] = r.f64();
    data.labels.resize(n);
    for (auto& y : data.labels) y = r.u32();
    data.provenance = "cache:" + path.string();
    validate(data);
    return data;
}

std::vector<PairSample> sample_pairs(const Dataset& data, std::size_t count, std::uint64_t seed, PairMode mode) {
    require(data.size() >= 2, ErrorKind::Data, "pair sampling needs at least two samples");
    std::map<std::uint32_t, std::vector<std::size_t>> by_class;
    if (mode == PairMode::WithinClass)
        for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

    Rng rng(seed);
    const std::size_t n = data.size();
    const std::size_t max_attempts = 1000 * (count + 1);
    std::size_t attempts = 0;
    std::vector<PairSample> pairs;
    pairs.reserve(count);
    while (pairs.size() < count) {
        require(++attempts <= max_attempts, ErrorKind::Data, "could not draw distinct input pairs");
        const std::size_t i = static_cast<std::size_t>(rng.below(n));
        std::size_t j;
        if (mode == PairMode::WithinClass) {
            const auto& members = by_class[data.labels[i]];
            if (members.size() < 2) continue;
            const auto self = static_cast<std::size_t>(
                std::lower_bound(members.begin(), members.end(), i) - members.begin());
            auto pick = static_cast<std::size_t>(rng.below(members.size() - 1));
            if (pick >= self) ++pick;
            j = members[pick];
        } else {
            j = static_cast<std::size_t>(rng.below(n - 1));
            if (j >= i) ++j;
        }
        if (data.inputs.row(static_cast<Eigen::Index>(i)) == data.inputs.row(static_cast<Eigen::Index>(j)))
            continue;
        pairs.push_back({i, j, data.input(i), data.input(j)});
    }
    return pairs;
}

}  // namespace relubridge
