#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace brainparc {

// Encoder hyperparameters. Defaults are the desk-scale reduction of the
// ViT-B geometry (embed 768, 12 blocks); the full geometry is reachable
// through config.
struct EncoderConfig {
    int64_t embed_dim = 96;
    int64_t num_blocks = 8; // must be even: skips pair block i with N+1-i
    int64_t num_heads = 4;
    int64_t patch_size = 8;
    int64_t slab_depth = 5;
    int64_t adapter_bottleneck = 16;
    int64_t lora_rank = 4; // 0 disables the low-rank path
    double lora_scale = 1.0;
    std::string lora_targets = "qv"; // subset of "qkvo"
    int64_t input_h = 64;
    int64_t input_w = 64;
    int64_t mlp_ratio = 4;
    bool train_base = false; // unfreeze the backbone weights
    bool fuse_norm = false;  // layer-norm after the skip-fusion projection

    int64_t tokens_h() const { return input_h / patch_size; }
    int64_t tokens_w() const { return input_w / patch_size; }
    int64_t num_tokens() const { return tokens_h() * tokens_w(); }

    void validate() const; // throws ConfigError
};

struct DecoderConfig {
    int64_t in_channels = 96; // equals encoder embed_dim
    int64_t aspp_channels = 128;
    std::vector<int64_t> dilation_rates = {1, 6, 12, 18};
    int64_t num_classes = 11; // desk default: 10 foreground regions + background
    int64_t spatial_kernel = 7;
    int64_t reduction = 8; // channel-attention bottleneck ratio
    int64_t gn_groups = 8;
    int64_t upsample_factor = 8; // equals encoder patch_size
    bool deconv_upsample = false; // transposed conv instead of bilinear

    void validate() const;
};

struct LossConfig {
    double alpha = 0.2; // cross-entropy weight
    double beta = 0.8;  // soft-Dice weight
    double edge_weight = 0.1;
    double smooth_eps = 1e-5;
    bool include_background_in_dice = false;

    void validate() const;
};

// Four independent wiring switches; (true,true,true,true) is the full model.
struct AblationSwitches {
    bool use_unet_skips = true;
    bool use_aspp = true;
    bool use_csa = true;
    bool use_br = true;
};

struct AugmentParams {
    double flip_lr_prob = 0.5;
    double flip_ud_prob = 0.0;
    double noise_sigma = 0.05; // in z-scored intensity units
};

struct TrainConfig {
    double base_lr = 1e-3;
    double base_lr_scale = 0.1; // multiplier for unfrozen backbone params
    int64_t warmup_steps = 100;
    double decay_gamma = 0.9;
    int64_t batch_size = 8;
    int64_t epochs = 20;
    int64_t seed = 42;
    double val_fraction = 0.2; // share of train volumes held out for validation
    int axis = 0;              // slab sweep axis, 0 = sagittal (X)
    AblationSwitches switches;
    LossConfig loss;
    AugmentParams augment;

    void validate() const;
};

struct DataConfig {
    std::string data_dir;
    std::vector<int64_t> crop; // empty = no crop, else target [X,Y,Z]
};

// Everything a run needs, merged from built-in defaults, a JSON config file
// and command-line flags (later sources win).
struct RunSpec {
    EncoderConfig encoder;
    DecoderConfig decoder;
    TrainConfig train;
    DataConfig data;

    // Ties derived fields together and validates all sections.
    void finalize();
    std::string canonical_json() const;
    std::string config_hash() const; // sha256 of canonical_json
};

// Strict parsers: unknown keys are rejected with a ConfigError naming the key.
EncoderConfig parse_encoder_config(const nlohmann::json& j);
DecoderConfig parse_decoder_config(const nlohmann::json& j);
LossConfig parse_loss_config(const nlohmann::json& j);
AblationSwitches parse_switches(const nlohmann::json& j);
AugmentParams parse_augment_params(const nlohmann::json& j);
TrainConfig parse_train_config(const nlohmann::json& j);
RunSpec parse_run_spec(const nlohmann::json& j);
RunSpec load_run_spec(const std::string& path);

nlohmann::json to_json(const RunSpec& spec);

} // namespace brainparc
