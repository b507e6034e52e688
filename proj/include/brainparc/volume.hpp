#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace brainparc {

// A labeled 3D intensity volume; the unit of dataset I/O.
//
// On disk a bundle is a directory holding `header.json` plus two raw
// little-endian payloads, `intensities.raw` (f32) and `labels.raw` (u16),
// both in X-fastest order. In memory both arrays are (X,Y,Z) tensors.
struct VolumeBundle {
    torch::Tensor intensities; // (X,Y,Z) float32
    torch::Tensor labels;      // (X,Y,Z) int64, values in [0, num_classes)
    std::array<double, 3> voxel_size_mm = {1.0, 1.0, 1.0};
    std::string subject_id;
    int64_t num_classes = 0;

    std::array<int64_t, 3> dims() const {
        return {intensities.size(0), intensities.size(1), intensities.size(2)};
    }
    // Throws DataError if shapes disagree or labels fall outside range.
    void validate() const;
};

// Writes header.json + payloads into `dir` (created if missing).
void save_volume_bundle(const VolumeBundle& vol, const std::string& dir);

// Loads and validates a bundle; checksum, size and label-range violations
// raise distinct DataError messages.
VolumeBundle load_volume_bundle(const std::string& dir);

} // namespace brainparc
