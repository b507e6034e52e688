#include "brainparc/model.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "brainparc/errors.hpp"

namespace brainparc {

namespace fs = std::filesystem;
using nlohmann::json;

ParcModelImpl::ParcModelImpl(const RunSpec& spec_) : spec(spec_) {
    spec.finalize();
    encoder = register_module(
        "encoder", SlabViTEncoder(spec.encoder, spec.train.switches.use_unet_skips));
    decoder = register_module("decoder", AttentionDecoder(spec.decoder, spec.train.switches));
}

ModelOut ParcModelImpl::forward(const torch::Tensor& slab) {
    auto features = encoder->forward(slab);
    auto decoded = decoder->forward(features);
    return {decoded.logits, decoded.logits_coarse, decoded.edge_map};
}

std::vector<std::pair<std::string, std::vector<int64_t>>> ParcModelImpl::manifest() const {
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    for (const auto& p : named_parameters())
        out.emplace_back(p.key(), p.value().sizes().vec());
    std::sort(out.begin(), out.end());
    return out;
}

bool ParcModelImpl::is_adaptation_param(const std::string& name) {
    return name.find("lora_") != std::string::npos ||
           name.find(".adapter.") != std::string::npos ||
           name.find("fuses.") != std::string::npos ||
           name.find("slice_embed") != std::string::npos || name.rfind("decoder.", 0) == 0;
}

std::vector<torch::Tensor> ParcModelImpl::adaptation_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : named_parameters())
        if (is_adaptation_param(p.key())) out.push_back(p.value());
    return out;
}

std::vector<torch::Tensor> ParcModelImpl::base_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : named_parameters())
        if (!is_adaptation_param(p.key())) out.push_back(p.value());
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

void save_checkpoint(const ParcModel& model, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir " + dir + ": " + ec.message());

    json index = json::array();
    std::ofstream raw(fs::path(dir) / "params.raw", std::ios::binary);
    if (!raw) throw IoError("cannot open for write: " + dir + "/params.raw");

    int64_t offset = 0;
    for (const auto& p : model->named_parameters()) {
        auto t = p.value().detach().to(torch::kFloat32).contiguous();
        const auto bytes = static_cast<int64_t>(t.numel() * sizeof(float));
        raw.write(reinterpret_cast<const char*>(t.const_data_ptr<float>()),
                  static_cast<std::streamsize>(bytes));
        index.push_back({{"name", p.key()},
                         {"shape", t.sizes().vec()},
                         {"offset", offset},
                         {"numel", t.numel()}});
        offset += bytes;
    }
    if (!raw) throw IoError("write failed: " + dir + "/params.raw");
    raw.close();

    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = to_json(model->spec);
    manifest["config_hash"] = model->spec.config_hash();
    manifest["tensors"] = index;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot open for write: " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("write failed: " + dir + "/manifest.json");
}

namespace {

struct TensorIndexEntry {
    std::vector<int64_t> shape;
    int64_t offset = 0;
    int64_t numel = 0;
};

json read_manifest(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot open checkpoint manifest: " + dir + "/manifest.json");
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint manifest in " + dir + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1)
        throw DataError("unsupported checkpoint format version in " + dir);
    return manifest;
}

std::map<std::string, TensorIndexEntry> read_index(const json& manifest, const std::string& dir) {
    std::map<std::string, TensorIndexEntry> index;
    for (const auto& e : manifest.at("tensors")) {
        TensorIndexEntry entry;
        entry.shape = e.at("shape").get<std::vector<int64_t>>();
        entry.offset = e.at("offset").get<int64_t>();
        entry.numel = e.at("numel").get<int64_t>();
        index[e.at("name").get<std::string>()] = entry;
    }
    if (index.empty()) throw DataError("checkpoint in " + dir + " indexes no tensors");
    return index;
}

std::vector<char> read_raw(const std::string& dir) {
    std::ifstream raw(fs::path(dir) / "params.raw", std::ios::binary | std::ios::ate);
    if (!raw) throw IoError("cannot open checkpoint payload: " + dir + "/params.raw");
    const auto size = static_cast<size_t>(raw.tellg());
    raw.seekg(0);
    std::vector<char> buf(size);
    raw.read(buf.data(), static_cast<std::streamsize>(size));
    if (!raw) throw IoError("read failed: " + dir + "/params.raw");
    return buf;
}

// Copies indexed tensors into the model; strict mode demands both sets match.
std::pair<int64_t, int64_t> load_into(ParcModel& model, const std::string& dir, bool strict) {
    auto manifest = read_manifest(dir);
    auto index = read_index(manifest, dir);
    auto raw = read_raw(dir);

    int64_t copied = 0, skipped = 0;
    torch::NoGradGuard no_grad;
    std::set<std::string> seen;
    for (const auto& p : model->named_parameters()) {
        auto it = index.find(p.key());
        if (it == index.end() || it->second.shape != p.value().sizes().vec()) {
            if (strict)
                throw DataError("checkpoint in " + dir +
                                (it == index.end() ? " is missing parameter "
                                                   : " has a shape mismatch for ") +
                                p.key());
            ++skipped;
            continue;
        }
        const auto& entry = it->second;
        if (entry.offset < 0 ||
            entry.offset + entry.numel * static_cast<int64_t>(sizeof(float)) >
                static_cast<int64_t>(raw.size()))
            throw DataError("checkpoint payload out of bounds for " + p.key() + " in " + dir);
        auto src = torch::from_blob(raw.data() + entry.offset, entry.shape, torch::kFloat32);
        p.value().copy_(src);
        ++copied;
        seen.insert(p.key());
    }
    if (strict && seen.size() != index.size()) {
        for (const auto& [name, entry] : index)
            if (!seen.count(name))
                throw DataError("checkpoint in " + dir + " carries unknown parameter " + name);
    }
    return {copied, skipped};
}

} // namespace

void load_checkpoint(ParcModel& model, const std::string& dir) {
    load_into(model, dir, /*strict=*/true);
}

std::pair<int64_t, int64_t> load_matching(ParcModel& model, const std::string& dir) {
    return load_into(model, dir, /*strict=*/false);
}

RunSpec checkpoint_spec(const std::string& dir) {
    auto manifest = read_manifest(dir);
    auto spec = parse_run_spec(manifest.at("config"));
    spec.finalize();
    return spec;
}

int64_t copy_matching_params(const torch::nn::Module& src, torch::nn::Module& dst) {
    std::map<std::string, torch::Tensor> source;
    for (const auto& p : src.named_parameters()) source[p.key()] = p.value();

    int64_t copied = 0;
    torch::NoGradGuard no_grad;
    for (auto& p : dst.named_parameters()) {
        auto it = source.find(p.key());
        if (it == source.end() || !it->second.sizes().equals(p.value().sizes())) continue;
        p.value().copy_(it->second);
        ++copied;
    }
    return copied;
}

} // namespace brainparc
