#include "brainparc/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "brainparc/errors.hpp"
#include "brainparc/sha256.hpp"

namespace brainparc {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& what) { throw ConfigError(what); }

// Dispatch every key of `j` through `setter`; unknown keys are fatal.
void walk_object(const json& j, const std::string& section,
                 const std::function<bool(const std::string&, const json&)>& setter) {
    if (!j.is_object()) bad("config section '" + section + "' must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!setter(key, value)) {
            bad("unknown key '" + key + "' in config section '" + section + "'");
        }
    }
}

template <typename T>
T as(const json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        bad("bad value for config key '" + key + "'");
    }
}

} // namespace

void EncoderConfig::validate() const {
    if (embed_dim <= 0) bad("embed_dim must be positive");
    if (num_blocks <= 0 || num_blocks % 2 != 0)
        bad("num_blocks must be a positive even integer (skip pairing needs two equal halves)");
    if (num_heads <= 0 || embed_dim % num_heads != 0)
        bad("num_heads must be positive and divide embed_dim");
    if (patch_size <= 0) bad("patch_size must be positive");
    if (slab_depth <= 0) bad("slab_depth must be positive");
    if (adapter_bottleneck <= 0) bad("adapter_bottleneck must be positive");
    if (lora_rank < 0) bad("lora_rank must be >= 0");
    if (input_h <= 0 || input_h % patch_size != 0)
        bad("input height " + std::to_string(input_h) + " is not divisible by patch_size " +
            std::to_string(patch_size));
    if (input_w <= 0 || input_w % patch_size != 0)
        bad("input width " + std::to_string(input_w) + " is not divisible by patch_size " +
            std::to_string(patch_size));
    if (mlp_ratio <= 0) bad("mlp_ratio must be positive");
    for (char c : lora_targets) {
        if (c != 'q' && c != 'k' && c != 'v' && c != 'o')
            bad(std::string("lora_targets may only contain 'q','k','v','o', got '") + c + "'");
    }
}

void DecoderConfig::validate() const {
    if (in_channels <= 0) bad("in_channels must be positive");
    if (aspp_channels <= 0) bad("aspp_channels must be positive");
    if (dilation_rates.empty()) bad("dilation_rates must be non-empty");
    for (size_t i = 0; i < dilation_rates.size(); ++i) {
        if (dilation_rates[i] < 1) bad("dilation rates must be >= 1");
        if (i > 0 && dilation_rates[i] <= dilation_rates[i - 1])
            bad("dilation_rates must be strictly increasing");
    }
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (spatial_kernel <= 0 || spatial_kernel % 2 == 0)
        bad("spatial_kernel must be a positive odd integer");
    if (reduction <= 0) bad("reduction must be positive");
    if (aspp_channels % reduction != 0)
        bad("aspp_channels " + std::to_string(aspp_channels) + " is not divisible by reduction " +
            std::to_string(reduction));
    if (gn_groups <= 0) bad("gn_groups must be positive");
    if (upsample_factor <= 0) bad("upsample_factor must be positive");
}

void LossConfig::validate() const {
    if (alpha < 0 || beta < 0) bad("loss weights alpha and beta must be >= 0");
    if (alpha + beta <= 0) bad("alpha + beta must be positive");
    if (edge_weight < 0) bad("edge_weight must be >= 0");
    if (smooth_eps <= 0) bad("smooth_eps must be positive");
}

void TrainConfig::validate() const {
    if (base_lr <= 0) bad("base_lr must be positive");
    if (warmup_steps < 1) bad("warmup_steps must be >= 1");
    if (decay_gamma <= 0 || decay_gamma >= 1) bad("decay_gamma must lie in (0, 1)");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (epochs < 1) bad("epochs must be >= 1");
    if (val_fraction < 0 || val_fraction >= 1) bad("val_fraction must lie in [0, 1)");
    if (axis < 0 || axis > 2) bad("axis must be 0, 1 or 2");
    loss.validate();
}

void RunSpec::finalize() {
    encoder.validate();
    // The decoder consumes the encoder feature map directly.
    decoder.in_channels = encoder.embed_dim;
    decoder.upsample_factor = encoder.patch_size;
    decoder.validate();
    train.validate();
}

EncoderConfig parse_encoder_config(const json& j) {
    EncoderConfig c;
    walk_object(j, "encoder", [&](const std::string& k, const json& v) {
        if (k == "embed_dim") c.embed_dim = as<int64_t>(v, k);
        else if (k == "num_blocks") c.num_blocks = as<int64_t>(v, k);
        else if (k == "num_heads") c.num_heads = as<int64_t>(v, k);
        else if (k == "patch_size") c.patch_size = as<int64_t>(v, k);
        else if (k == "slab_depth") c.slab_depth = as<int64_t>(v, k);
        else if (k == "adapter_bottleneck") c.adapter_bottleneck = as<int64_t>(v, k);
        else if (k == "lora_rank") c.lora_rank = as<int64_t>(v, k);
        else if (k == "lora_scale") c.lora_scale = as<double>(v, k);
        else if (k == "lora_targets") c.lora_targets = as<std::string>(v, k);
        else if (k == "input_h") c.input_h = as<int64_t>(v, k);
        else if (k == "input_w") c.input_w = as<int64_t>(v, k);
        else if (k == "mlp_ratio") c.mlp_ratio = as<int64_t>(v, k);
        else if (k == "train_base") c.train_base = as<bool>(v, k);
        else if (k == "fuse_norm") c.fuse_norm = as<bool>(v, k);
        else return false;
        return true;
    });
    return c;
}

DecoderConfig parse_decoder_config(const json& j) {
    DecoderConfig c;
    walk_object(j, "decoder", [&](const std::string& k, const json& v) {
        if (k == "aspp_channels") c.aspp_channels = as<int64_t>(v, k);
        else if (k == "dilation_rates") c.dilation_rates = as<std::vector<int64_t>>(v, k);
        else if (k == "num_classes") c.num_classes = as<int64_t>(v, k);
        else if (k == "spatial_kernel") c.spatial_kernel = as<int64_t>(v, k);
        else if (k == "reduction") c.reduction = as<int64_t>(v, k);
        else if (k == "gn_groups") c.gn_groups = as<int64_t>(v, k);
        else if (k == "deconv_upsample") c.deconv_upsample = as<bool>(v, k);
        else return false;
        return true;
    });
    return c;
}

LossConfig parse_loss_config(const json& j) {
    LossConfig c;
    walk_object(j, "loss", [&](const std::string& k, const json& v) {
        if (k == "alpha") c.alpha = as<double>(v, k);
        else if (k == "beta") c.beta = as<double>(v, k);
        else if (k == "edge_weight") c.edge_weight = as<double>(v, k);
        else if (k == "smooth_eps") c.smooth_eps = as<double>(v, k);
        else if (k == "include_background_in_dice") c.include_background_in_dice = as<bool>(v, k);
        else return false;
        return true;
    });
    return c;
}

AblationSwitches parse_switches(const json& j) {
    AblationSwitches s;
    walk_object(j, "switches", [&](const std::string& k, const json& v) {
        if (k == "use_unet_skips") s.use_unet_skips = as<bool>(v, k);
        else if (k == "use_aspp") s.use_aspp = as<bool>(v, k);
        else if (k == "use_csa") s.use_csa = as<bool>(v, k);
        else if (k == "use_br") s.use_br = as<bool>(v, k);
        else return false;
        return true;
    });
    return s;
}

AugmentParams parse_augment_params(const json& j) {
    AugmentParams a;
    walk_object(j, "augment", [&](const std::string& k, const json& v) {
        if (k == "flip_lr_prob") a.flip_lr_prob = as<double>(v, k);
        else if (k == "flip_ud_prob") a.flip_ud_prob = as<double>(v, k);
        else if (k == "noise_sigma") a.noise_sigma = as<double>(v, k);
        else return false;
        return true;
    });
    return a;
}

TrainConfig parse_train_config(const json& j) {
    TrainConfig c;
    walk_object(j, "train", [&](const std::string& k, const json& v) {
        if (k == "base_lr") c.base_lr = as<double>(v, k);
        else if (k == "base_lr_scale") c.base_lr_scale = as<double>(v, k);
        else if (k == "warmup_steps") c.warmup_steps = as<int64_t>(v, k);
        else if (k == "decay_gamma") c.decay_gamma = as<double>(v, k);
        else if (k == "batch_size") c.batch_size = as<int64_t>(v, k);
        else if (k == "epochs") c.epochs = as<int64_t>(v, k);
        else if (k == "seed") c.seed = as<int64_t>(v, k);
        else if (k == "val_fraction") c.val_fraction = as<double>(v, k);
        else if (k == "axis") c.axis = as<int>(v, k);
        else if (k == "switches") c.switches = parse_switches(v);
        else if (k == "loss") c.loss = parse_loss_config(v);
        else if (k == "augment") c.augment = parse_augment_params(v);
        else return false;
        return true;
    });
    return c;
}

RunSpec parse_run_spec(const json& j) {
    RunSpec spec;
    walk_object(j, "<root>", [&](const std::string& k, const json& v) {
        if (k == "encoder") spec.encoder = parse_encoder_config(v);
        else if (k == "decoder") spec.decoder = parse_decoder_config(v);
        else if (k == "train") spec.train = parse_train_config(v);
        else if (k == "data") {
            walk_object(v, "data", [&](const std::string& dk, const json& dv) {
                if (dk == "data_dir") spec.data.data_dir = as<std::string>(dv, dk);
                else if (dk == "crop") spec.data.crop = as<std::vector<int64_t>>(dv, dk);
                else return false;
                return true;
            });
        } else return false;
        return true;
    });
    return spec;
}

RunSpec load_run_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_spec(j);
}

json to_json(const RunSpec& spec) {
    json j;
    j["encoder"] = {
        {"embed_dim", spec.encoder.embed_dim},
        {"num_blocks", spec.encoder.num_blocks},
        {"num_heads", spec.encoder.num_heads},
        {"patch_size", spec.encoder.patch_size},
        {"slab_depth", spec.encoder.slab_depth},
        {"adapter_bottleneck", spec.encoder.adapter_bottleneck},
        {"lora_rank", spec.encoder.lora_rank},
        {"lora_scale", spec.encoder.lora_scale},
        {"lora_targets", spec.encoder.lora_targets},
        {"input_h", spec.encoder.input_h},
        {"input_w", spec.encoder.input_w},
        {"mlp_ratio", spec.encoder.mlp_ratio},
        {"train_base", spec.encoder.train_base},
        {"fuse_norm", spec.encoder.fuse_norm},
    };
    j["decoder"] = {
        {"aspp_channels", spec.decoder.aspp_channels},
        {"dilation_rates", spec.decoder.dilation_rates},
        {"num_classes", spec.decoder.num_classes},
        {"spatial_kernel", spec.decoder.spatial_kernel},
        {"reduction", spec.decoder.reduction},
        {"gn_groups", spec.decoder.gn_groups},
        {"deconv_upsample", spec.decoder.deconv_upsample},
    };
    j["train"] = {
        {"base_lr", spec.train.base_lr},
        {"base_lr_scale", spec.train.base_lr_scale},
        {"warmup_steps", spec.train.warmup_steps},
        {"decay_gamma", spec.train.decay_gamma},
        {"batch_size", spec.train.batch_size},
        {"epochs", spec.train.epochs},
        {"seed", spec.train.seed},
        {"val_fraction", spec.train.val_fraction},
        {"axis", spec.train.axis},
        {"switches",
         {{"use_unet_skips", spec.train.switches.use_unet_skips},
          {"use_aspp", spec.train.switches.use_aspp},
          {"use_csa", spec.train.switches.use_csa},
          {"use_br", spec.train.switches.use_br}}},
        {"loss",
         {{"alpha", spec.train.loss.alpha},
          {"beta", spec.train.loss.beta},
          {"edge_weight", spec.train.loss.edge_weight},
          {"smooth_eps", spec.train.loss.smooth_eps},
          {"include_background_in_dice", spec.train.loss.include_background_in_dice}}},
        {"augment",
         {{"flip_lr_prob", spec.train.augment.flip_lr_prob},
          {"flip_ud_prob", spec.train.augment.flip_ud_prob},
          {"noise_sigma", spec.train.augment.noise_sigma}}},
    };
    j["data"] = {{"data_dir", spec.data.data_dir}, {"crop", spec.data.crop}};
    return j;
}

std::string RunSpec::canonical_json() const {
    // nlohmann::json keeps object keys sorted, so dump() is canonical.
    return to_json(*this).dump(2);
}

std::string RunSpec::config_hash() const {
    const std::string s = canonical_json();
    return sha256_hex(s.data(), s.size());
}

} // namespace brainparc
