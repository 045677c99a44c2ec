#pragma once

// Binary network checkpoints.
//
// Layout (little-endian): "RPLN1", u32 layer count, then per layer a u8 kind
// followed by its dimensions as u32s and its weights as f64:
//   1 dense     out, in, weights[out*in] row-major
//   2 conv      in_c, in_h, in_w, out_c, k_h, k_w, stride, padding, kernel
//   3 residual  branch count, then each branch layer encoded as above

#include <filesystem>
#include <string>

#include "relubridge/network.hpp"

namespace relubridge {

std::string encode_checkpoint(const LayerGraph& net);
LayerGraph decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint");

void save_checkpoint(const LayerGraph& net, const std::filesystem::path& path);
LayerGraph load_checkpoint(const std::filesystem::path& path);

}  // namespace relubridge
