#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "brainparc/volume.hpp"

namespace brainparc {

// Fixed color map keyed by class index so overlays are diffable across runs.
// Class 0 (background) renders as plain grayscale; foreground classes cycle
// through a 16-entry palette.
std::array<uint8_t, 3> class_color(int64_t cls);

// Minimal RGB8 PNG encoder (filter 0 rows, single zlib IDAT).
std::vector<uint8_t> encode_png_rgb(const std::vector<uint8_t>& rgb, int64_t width,
                                    int64_t height);
void write_png_rgb(const std::string& path, const torch::Tensor& image); // (H,W,3) uint8

// Grayscale slice (min-max scaled) blended 50/50 with class colors where the
// label is foreground. intensity (H,W) float, labels (H,W) int64 -> (H,W,3) u8.
torch::Tensor overlay_slice(const torch::Tensor& intensity, const torch::Tensor& labels);

// Writes <out_dir>/slice_<index>.png for every sampled center along `axis`:
// ground truth overlay on the left, prediction on the right, separated by a
// 2px white gutter. `stride` samples every stride-th slice (>=1).
std::vector<std::string> save_prediction_overlays(const VolumeBundle& vol,
                                                  const torch::Tensor& pred, int64_t axis,
                                                  const std::string& out_dir, int64_t stride);

} // namespace brainparc
