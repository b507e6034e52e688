#include "brainparc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "brainparc/errors.hpp"
#include "brainparc/losses.hpp"

namespace brainparc {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

void SplitManifest::save(const std::string& path) const {
    json j;
    j["train_ids"] = train_ids;
    j["test_ids"] = test_ids;
    j["seed"] = seed;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

SplitManifest SplitManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed split manifest " + path + ": " + e.what());
    }
    SplitManifest m;
    m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    m.seed = j.value("seed", uint64_t{0});
    std::set<std::string> train(m.train_ids.begin(), m.train_ids.end());
    for (const auto& id : m.test_ids)
        if (train.count(id))
            throw DataError("split manifest " + path + " places subject " + id +
                            " in both train and test");
    return m;
}

SplitManifest make_split(const std::vector<std::string>& subject_ids, double train_fraction,
                         uint64_t seed) {
    if (subject_ids.size() < 2)
        throw DataError("need at least 2 subjects to split, got " +
                        std::to_string(subject_ids.size()));
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train_fraction must be in (0,1), got " +
                          std::to_string(train_fraction));

    std::vector<std::string> ids = subject_ids;
    std::mt19937_64 rng(seed);
    // Explicit Fisher-Yates so the split does not depend on the stdlib's
    // std::shuffle implementation.
    for (size_t i = ids.size() - 1; i > 0; --i) {
        const size_t j = static_cast<size_t>(rng() % (i + 1));
        std::swap(ids[i], ids[j]);
    }

    const auto n = static_cast<int64_t>(ids.size());
    auto n_train = static_cast<int64_t>(
        std::floor(static_cast<double>(n) * train_fraction));
    n_train = std::clamp<int64_t>(n_train, 1, n - 1);

    SplitManifest m;
    m.seed = seed;
    m.train_ids.assign(ids.begin(), ids.begin() + n_train);
    m.test_ids.assign(ids.begin() + n_train, ids.end());
    return m;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

VolumeBundle center_crop(const VolumeBundle& vol, const std::array<int64_t, 3>& target) {
    vol.validate();
    const auto src = vol.dims();
    static const char* axis_name[3] = {"X", "Y", "Z"};
    for (int a = 0; a < 3; ++a) {
        if (target[a] < 1)
            throw DataError(std::string("crop target on axis ") + axis_name[a] +
                            " must be positive, got " + std::to_string(target[a]));
        if (target[a] > src[a])
            throw DataError(std::string("crop target ") + std::to_string(target[a]) +
                            " exceeds source extent " + std::to_string(src[a]) + " on axis " +
                            axis_name[a]);
    }

    VolumeBundle out = vol;
    out.intensities = vol.intensities;
    out.labels = vol.labels;
    for (int a = 0; a < 3; ++a) {
        const int64_t start = (src[a] - target[a]) / 2; // extra removed voxel on the high side
        out.intensities = out.intensities.slice(a, start, start + target[a]);
        out.labels = out.labels.slice(a, start, start + target[a]);
    }
    out.intensities = out.intensities.contiguous();
    out.labels = out.labels.contiguous();
    return out;
}

VolumeBundle normalize(const VolumeBundle& vol) {
    vol.validate();
    auto mask = vol.intensities.ne(0.0f);
    const int64_t n = mask.sum().item<int64_t>();
    if (n == 0) throw DataError("cannot normalize: volume is constant zero");

    auto vals = vol.intensities.masked_select(mask).to(torch::kDouble);
    const double mean = vals.mean().item<double>();
    const double var = (vals - mean).square().mean().item<double>();
    if (var < 1e-20)
        throw DataError("cannot normalize: nonzero intensities are constant (zero variance)");
    const double inv_std = 1.0 / std::sqrt(var);

    VolumeBundle out = vol;
    auto z = (vol.intensities.to(torch::kDouble) - mean) * inv_std;
    out.intensities =
        torch::where(mask, z, torch::zeros_like(z)).to(torch::kFloat32).contiguous();
    out.labels = vol.labels;
    return out;
}

SliceSlab extract_slab(const VolumeBundle& vol, int64_t axis, int64_t center_index) {
    vol.validate();
    if (axis < 0 || axis > 2)
        throw DataError("slab axis must be 0, 1, or 2, got " + std::to_string(axis));
    const int64_t extent = vol.dims()[static_cast<size_t>(axis)];
    if (center_index < 0 || center_index >= extent)
        throw DataError("slab center " + std::to_string(center_index) +
                        " outside axis extent " + std::to_string(extent));

    std::vector<torch::Tensor> slices;
    slices.reserve(5);
    for (int64_t d = -2; d <= 2; ++d) {
        const int64_t idx = std::clamp<int64_t>(center_index + d, 0, extent - 1);
        slices.push_back(vol.intensities.select(axis, idx));
    }

    SliceSlab slab;
    slab.slices = torch::stack(slices, 0).contiguous();
    slab.center_labels = vol.labels.select(axis, center_index).contiguous();
    slab.center_edge = edge_target_from_labels(slab.center_labels.unsqueeze(0)).squeeze(0);
    slab.subject_id = vol.subject_id;
    slab.axis = axis;
    slab.center_index = center_index;
    return slab;
}

SliceSlab augment(const SliceSlab& slab, std::mt19937_64& rng, const AugmentParams& params) {
    SliceSlab out = slab;
    out.slices = slab.slices.clone();
    out.center_labels = slab.center_labels.clone();
    out.center_edge = slab.center_edge.clone();

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool flip_w = unit(rng) < params.flip_lr_prob;
    const bool flip_h = unit(rng) < params.flip_ud_prob;

    if (flip_w) {
        out.slices = out.slices.flip({2});
        out.center_labels = out.center_labels.flip({1});
        out.center_edge = out.center_edge.flip({2});
    }
    if (flip_h) {
        out.slices = out.slices.flip({1});
        out.center_labels = out.center_labels.flip({0});
        out.center_edge = out.center_edge.flip({1});
    }

    if (params.noise_sigma > 0.0) {
        auto noise = torch::empty_like(out.slices);
        std::normal_distribution<float> gauss(0.0f, static_cast<float>(params.noise_sigma));
        float* p = noise.data_ptr<float>();
        for (int64_t i = 0; i < noise.numel(); ++i) p[i] = gauss(rng);
        out.slices = out.slices + noise;
    }

    out.slices = out.slices.contiguous();
    out.center_labels = out.center_labels.contiguous();
    out.center_edge = out.center_edge.contiguous();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic phantom
// ---------------------------------------------------------------------------

namespace {

// Normalized squared radius of every voxel for an axis-aligned ellipsoid.
torch::Tensor ellipsoid_r2(const std::array<int64_t, 3>& dims, const std::array<double, 3>& c,
                           const std::array<double, 3>& semi) {
    auto gx = (torch::arange(dims[0], torch::kDouble) - c[0]).div(semi[0]).square().view(
        {dims[0], 1, 1});
    auto gy = (torch::arange(dims[1], torch::kDouble) - c[1]).div(semi[1]).square().view(
        {1, dims[1], 1});
    auto gz = (torch::arange(dims[2], torch::kDouble) - c[2]).div(semi[2]).square().view(
        {1, 1, dims[2]});
    return gx + gy + gz;
}

} // namespace

VolumeBundle make_phantom(uint64_t seed, const std::array<int64_t, 3>& dims,
                          int64_t num_foreground) {
    if (num_foreground < 1)
        throw ConfigError("num_foreground must be >= 1, got " +
                          std::to_string(num_foreground));
    for (int a = 0; a < 3; ++a)
        if (dims[a] < 8)
            throw DataError("phantom dims must be at least 8 voxels per axis");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Head-like outer ellipsoid with slight jitter, safely inside the volume.
    std::array<double, 3> center{}, outer{};
    for (int a = 0; a < 3; ++a) {
        const double d = static_cast<double>(dims[a]);
        center[a] = 0.5 * (d - 1.0) + (unit(rng) - 0.5) * 0.04 * d;
        outer[a] = (0.396 + 0.044 * unit(rng)) * d;
    }

    const int64_t num_shells = std::min<int64_t>(3, num_foreground);
    const int64_t num_blobs = num_foreground - num_shells;
    const double core_frac = 0.55; // core boundary as a fraction of the outer radius

    auto r = ellipsoid_r2(dims, center, outer).sqrt();
    auto labels = torch::zeros({dims[0], dims[1], dims[2]}, torch::kInt64);
    // Threshold edges from the core boundary out to 1; assign outermost first
    // and overwrite inward so ring j gets label num_shells - j.
    for (int64_t j = num_shells - 1; j >= 0; --j) {
        const double edge = num_shells == 1
                                ? 1.0
                                : core_frac + static_cast<double>(j) * (1.0 - core_frac) /
                                                  static_cast<double>(num_shells - 1);
        labels.masked_fill_(r.le(edge), num_shells - j);
    }

    // Blob nuclei carved strictly inside the solid core. Candidate centers sit
    // on a lattice whose spacing guarantees mutual separation (so every label
    // stays one connected component); the seeded rng shuffles the sites and
    // jitters the survivors within the separation budget.
    struct Blob {
        std::array<double, 3> c;
        std::array<double, 3> semi;
    };
    std::vector<Blob> blobs;
    std::array<double, 3> core_semi{};
    for (int a = 0; a < 3; ++a) core_semi[a] = core_frac * outer[a];

    if (num_blobs > 0) {
        const double min_core = *std::min_element(core_semi.begin(), core_semi.end());
        const double jitter = 0.75;
        // Prefer large nuclei; shrink deterministically until the separation
        // lattice offers enough sites for the requested count.
        double s_hi = std::max(1.4, 0.22 * min_core);
        double s_lo = 0.0;
        std::vector<std::array<double, 3>> sites;
        for (int round = 0; round < 8; ++round) {
            s_lo = std::max(1.0, 0.62 * s_hi);
            const double spacing = 2.0 * s_hi + 1.5 + 2.0 * jitter; // >= 1.5 surface gap
            const double margin = s_hi + jitter + 0.5; // keeps blobs off the core rim
            sites.clear();
            const int64_t reach = static_cast<int64_t>(min_core / spacing) + 1;
            for (int64_t i = -reach; i <= reach; ++i)
                for (int64_t j = -reach; j <= reach; ++j)
                    for (int64_t k = -reach; k <= reach; ++k) {
                        const std::array<double, 3> off{spacing * static_cast<double>(i),
                                                        spacing * static_cast<double>(j),
                                                        spacing * static_cast<double>(k)};
                        double n2 = 0.0;
                        for (int a = 0; a < 3; ++a)
                            n2 += (off[a] / core_semi[a]) * (off[a] / core_semi[a]);
                        if (std::sqrt(n2) + margin / min_core <= 1.0)
                            sites.push_back({center[0] + off[0], center[1] + off[1],
                                             center[2] + off[2]});
                    }
            if (static_cast<int64_t>(sites.size()) >= num_blobs || s_hi <= 1.4) break;
            s_hi = std::max(1.4, 0.85 * s_hi);
        }
        if (static_cast<int64_t>(sites.size()) < num_blobs)
            throw DataError("phantom generation failed: " + std::to_string(num_blobs) +
                            " blob regions do not fit inside dims " + std::to_string(dims[0]) +
                            "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
        for (size_t i = sites.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(rng() % (i + 1));
            std::swap(sites[i], sites[j]);
        }
        for (int64_t b = 0; b < num_blobs; ++b) {
            Blob blob;
            for (int a = 0; a < 3; ++a) blob.semi[a] = s_lo + (s_hi - s_lo) * unit(rng);
            for (int a = 0; a < 3; ++a)
                blob.c[a] = sites[static_cast<size_t>(b)][a] + (2.0 * unit(rng) - 1.0) * jitter;
            blobs.push_back(blob);
        }
    }
    for (size_t b = 0; b < blobs.size(); ++b) {
        auto mask = ellipsoid_r2(dims, blobs[b].c, blobs[b].semi).le(1.0);
        labels.masked_fill_(mask, num_shells + 1 + static_cast<int64_t>(b));
    }

    // Every region must materialize; tiny volumes can starve a shell or blob.
    auto counts = torch::bincount(labels.reshape({-1}), {}, num_foreground + 1);
    for (int64_t l = 0; l <= num_foreground; ++l)
        if (counts[l].item<int64_t>() == 0)
            throw DataError("phantom generation failed: region " + std::to_string(l) +
                            " is empty at dims " + std::to_string(dims[0]) + "x" +
                            std::to_string(dims[1]) + "x" + std::to_string(dims[2]));

    // Intensities: shuffled per-label base levels + a smooth trilinear bias
    // field + voxel noise. Background stays exactly zero.
    std::vector<double> base(static_cast<size_t>(num_foreground + 1), 0.0);
    for (int64_t l = 1; l <= num_foreground; ++l)
        base[static_cast<size_t>(l)] =
            num_foreground == 1
                ? 0.7
                : 0.25 + 0.75 * static_cast<double>(l - 1) / static_cast<double>(num_foreground - 1);
    for (size_t i = static_cast<size_t>(num_foreground); i > 1; --i) {
        const size_t j = 1 + static_cast<size_t>(rng() % i);
        std::swap(base[i], base[j]);
    }
    auto base_lut = torch::from_blob(base.data(), {num_foreground + 1}, torch::kDouble).clone();
    auto base_img = base_lut.index_select(0, labels.reshape({-1})).view(labels.sizes());

    std::array<torch::Tensor, 3> t;
    for (int a = 0; a < 3; ++a) {
        auto lin = torch::arange(dims[a], torch::kDouble)
                       .div(static_cast<double>(std::max<int64_t>(dims[a] - 1, 1)))
                       .sub(0.5)
                       .mul(2.0);
        std::array<int64_t, 3> shape{1, 1, 1};
        shape[static_cast<size_t>(a)] = dims[a];
        t[static_cast<size_t>(a)] = lin.view({shape[0], shape[1], shape[2]});
    }
    std::array<double, 8> coef{};
    for (auto& c : coef) c = (2.0 * unit(rng) - 1.0) * 0.15;
    auto bias = coef[0] + coef[1] * t[0] + coef[2] * t[1] + coef[3] * t[2] +
                coef[4] * t[0] * t[1] + coef[5] * t[0] * t[2] + coef[6] * t[1] * t[2] +
                coef[7] * t[0] * t[1] * t[2];

    auto noise = torch::empty(labels.sizes(), torch::kDouble);
    {
        std::normal_distribution<double> gauss(0.0, 0.02);
        double* p = noise.data_ptr<double>();
        for (int64_t i = 0; i < noise.numel(); ++i) p[i] = gauss(rng);
    }

    auto fg = labels.gt(0);
    auto inten = torch::where(fg, base_img + bias + noise, torch::zeros_like(base_img));

    VolumeBundle vol;
    vol.intensities = inten.to(torch::kFloat32).contiguous();
    vol.labels = labels;
    vol.voxel_size_mm = {0.7, 0.7, 0.7};
    vol.subject_id = "phantom_" + std::to_string(seed);
    vol.num_classes = num_foreground + 1;
    vol.validate();
    return vol;
}

} // namespace brainparc
