#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "brainparc/config.hpp"
#include "brainparc/volume.hpp"

namespace brainparc {

// Five consecutive slices around a center slice, plus the supervision targets
// for that center slice.
struct SliceSlab {
    torch::Tensor slices;        // (5,H,W) float32, normalized
    torch::Tensor center_labels; // (H,W) int64
    torch::Tensor center_edge;   // (1,H,W) float32 binary
    std::string subject_id;
    int64_t axis = 0;
    int64_t center_index = 0;
};

struct SplitManifest {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    uint64_t seed = 0;

    void save(const std::string& path) const;
    static SplitManifest load(const std::string& path);
};

// Symmetric center crop; when the margin is odd the extra removed voxel falls
// on the high side (kept window starts at floor(margin/2)). Intensities and
// labels are cropped identically.
VolumeBundle center_crop(const VolumeBundle& vol, const std::array<int64_t, 3>& target);

// Per-volume z-score over nonzero-intensity voxels; zero voxels stay zero.
VolumeBundle normalize(const VolumeBundle& vol);

// Slices center-2..center+2 along `axis`; out-of-bounds slices replicate the
// nearest valid slice. Attaches center labels and the derived edge target.
SliceSlab extract_slab(const VolumeBundle& vol, int64_t axis, int64_t center_index);

// Applies the same flips to slices, labels, and edge; Gaussian noise to the
// intensities only. Deterministic given the rng state.
SliceSlab augment(const SliceSlab& slab, std::mt19937_64& rng, const AugmentParams& params);

// Deterministic shuffled split: floor(n * train_fraction) subjects to train,
// clamped so both sides stay non-empty.
SplitManifest make_split(const std::vector<std::string>& subject_ids, double train_fraction,
                         uint64_t seed);

// Synthetic labeled phantom: nested ellipsoidal shells around a solid core,
// with small blob regions carved inside the core. Intensities are per-label
// base values plus a smooth bias field and noise; background stays zero.
VolumeBundle make_phantom(uint64_t seed, const std::array<int64_t, 3>& dims,
                          int64_t num_foreground);

} // namespace brainparc
