#include "brainparc/volume.hpp"

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "brainparc/errors.hpp"
#include "brainparc/sha256.hpp"

namespace brainparc {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(const void* data, size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

void VolumeBundle::validate() const {
    if (intensities.dim() != 3 || labels.dim() != 3)
        throw DataError("volume arrays must be 3D");
    if (!intensities.sizes().equals(labels.sizes()))
        throw DataError("intensities and labels have different shapes in bundle '" + subject_id + "'");
    if (num_classes < 1) throw DataError("bundle '" + subject_id + "' has num_classes < 1");
    const int64_t lo = labels.min().item<int64_t>();
    const int64_t hi = labels.max().item<int64_t>();
    if (lo < 0 || hi >= num_classes)
        throw DataError("label value " + std::to_string(lo < 0 ? lo : hi) +
                        " outside [0, " + std::to_string(num_classes) + ") in bundle '" +
                        subject_id + "'");
}

namespace {

// Disk order is X-fastest; an (X,Y,Z) tensor stores Z fastest, so payloads
// are written and read through a (Z,Y,X) contiguous view.
torch::Tensor to_disk_order(const torch::Tensor& t) {
    return t.permute({2, 1, 0}).contiguous();
}

torch::Tensor from_disk_order(torch::Tensor zyx) {
    return zyx.permute({2, 1, 0}).contiguous();
}

void write_file(const fs::path& path, const void* data, size_t size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open for read: " + path.string());
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<size_t>(size));
    in.read(buf.data(), size);
    if (!in) throw IoError("read failed: " + path.string());
    return buf;
}

} // namespace

void save_volume_bundle(const VolumeBundle& vol, const std::string& dir) {
    vol.validate();
    fs::create_directories(dir);
    const auto d = vol.dims();

    auto inten = to_disk_order(vol.intensities.to(torch::kFloat32));
    auto labels_i64 = to_disk_order(vol.labels.to(torch::kInt64));
    const size_t inten_bytes = inten.numel() * sizeof(float);

    std::vector<uint16_t> labels_u16(static_cast<size_t>(labels_i64.numel()));
    const int64_t* lp = labels_i64.const_data_ptr<int64_t>();
    for (size_t i = 0; i < labels_u16.size(); ++i) {
        if (lp[i] < 0 || lp[i] > 0xffff)
            throw DataError("label value " + std::to_string(lp[i]) + " does not fit u16");
        labels_u16[i] = static_cast<uint16_t>(lp[i]);
    }
    const size_t label_bytes = labels_u16.size() * sizeof(uint16_t);

    json header;
    header["format_version"] = 1;
    header["dims"] = {d[0], d[1], d[2]};
    header["dtype_intensities"] = "f32";
    header["dtype_labels"] = "u16";
    header["voxel_size_mm"] = {vol.voxel_size_mm[0], vol.voxel_size_mm[1], vol.voxel_size_mm[2]};
    header["subject_id"] = vol.subject_id;
    header["num_classes"] = vol.num_classes;
    header["sha256_intensities"] = sha256_hex(inten.data_ptr(), inten_bytes);
    header["sha256_labels"] = sha256_hex(labels_u16.data(), label_bytes);

    write_file(fs::path(dir) / "intensities.raw", inten.data_ptr(), inten_bytes);
    write_file(fs::path(dir) / "labels.raw", labels_u16.data(), label_bytes);
    const std::string htxt = header.dump(2) + "\n";
    write_file(fs::path(dir) / "header.json", htxt.data(), htxt.size());
}

VolumeBundle load_volume_bundle(const std::string& dir) {
    const fs::path root(dir);
    json header;
    {
        std::ifstream in(root / "header.json");
        if (!in) throw IoError("missing header.json in " + dir);
        try {
            in >> header;
        } catch (const json::exception& e) {
            throw DataError("corrupt header.json in " + dir + ": " + e.what());
        }
    }

    std::array<int64_t, 3> dims{};
    try {
        auto dv = header.at("dims").get<std::vector<int64_t>>();
        if (dv.size() != 3) throw DataError("header dims must have 3 entries in " + dir);
        std::copy(dv.begin(), dv.end(), dims.begin());
        if (header.at("dtype_intensities").get<std::string>() != "f32" ||
            header.at("dtype_labels").get<std::string>() != "u16")
            throw DataError("unsupported dtype codes in " + dir);
    } catch (const json::exception& e) {
        throw DataError("bad header fields in " + dir + ": " + e.what());
    }
    const int64_t voxels = dims[0] * dims[1] * dims[2];

    auto inten_raw = read_file(root / "intensities.raw");
    auto label_raw = read_file(root / "labels.raw");
    if (static_cast<int64_t>(inten_raw.size()) != voxels * static_cast<int64_t>(sizeof(float)))
        throw DataError("intensity payload size mismatch in " + dir + ": header dims expect " +
                        std::to_string(voxels) + " voxels, payload holds " +
                        std::to_string(inten_raw.size() / sizeof(float)));
    if (static_cast<int64_t>(label_raw.size()) != voxels * static_cast<int64_t>(sizeof(uint16_t)))
        throw DataError("label payload size mismatch in " + dir + ": header dims expect " +
                        std::to_string(voxels) + " voxels, payload holds " +
                        std::to_string(label_raw.size() / sizeof(uint16_t)));

    if (sha256_hex(inten_raw.data(), inten_raw.size()) !=
        header.at("sha256_intensities").get<std::string>())
        throw DataError("intensity payload checksum mismatch in " + dir);
    if (sha256_hex(label_raw.data(), label_raw.size()) !=
        header.at("sha256_labels").get<std::string>())
        throw DataError("label payload checksum mismatch in " + dir);

    VolumeBundle vol;
    vol.subject_id = header.value("subject_id", std::string{});
    vol.num_classes = header.value("num_classes", int64_t{0});
    auto vs = header.value("voxel_size_mm", std::vector<double>{1.0, 1.0, 1.0});
    if (vs.size() == 3) std::copy(vs.begin(), vs.end(), vol.voxel_size_mm.begin());

    auto inten_zyx = torch::from_blob(inten_raw.data(), {dims[2], dims[1], dims[0]},
                                      torch::kFloat32)
                         .clone();
    auto label_zyx = torch::empty({dims[2], dims[1], dims[0]}, torch::kInt64);
    {
        const auto* src = reinterpret_cast<const uint16_t*>(label_raw.data());
        int64_t* dst = label_zyx.data_ptr<int64_t>();
        for (int64_t i = 0; i < label_zyx.numel(); ++i) dst[i] = src[i];
    }
    vol.intensities = from_disk_order(inten_zyx);
    vol.labels = from_disk_order(label_zyx);
    vol.validate();
    return vol;
}

} // namespace brainparc
