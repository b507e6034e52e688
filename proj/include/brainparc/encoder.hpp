#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "brainparc/config.hpp"

namespace brainparc {

// y = x·W_base (+ scale·(x·A)·B when rank > 0). The base projection is frozen
// unless train_base; A/B are always trainable. B starts at zero so the
// low-rank path is inert at init.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(int64_t in_features, int64_t out_features, int64_t rank, double scale,
                   bool train_base);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Linear base{nullptr};
    torch::Tensor lora_a; // (in, rank)
    torch::Tensor lora_b; // (rank, out)
    int64_t rank = 0;
    double scale = 1.0;
};
TORCH_MODULE(LoraLinear);

// Residual bottleneck that mixes information across the slice-depth axis at a
// fixed token position. Zero-init up-projection keeps it inert at init.
class DepthAdapterImpl : public torch::nn::Module {
public:
    DepthAdapterImpl(int64_t channels, int64_t bottleneck);
    torch::Tensor forward(const torch::Tensor& x); // (B,D,N,C) -> same shape

    torch::nn::Linear down{nullptr}, up{nullptr};
    torch::nn::Conv1d depth_mix{nullptr};
};
TORCH_MODULE(DepthAdapter);

// Shared-weight patchification of each slice plus positional and slice-index
// embeddings. (B,D,H,W) -> (B,D,N,C).
class PatchEmbedImpl : public torch::nn::Module {
public:
    explicit PatchEmbedImpl(const EncoderConfig& cfg);
    torch::Tensor forward(const torch::Tensor& slab);

    EncoderConfig cfg;
    torch::nn::Conv2d proj{nullptr};
    torch::Tensor pos_embed;   // (1,1,N,C), frozen with the backbone
    torch::Tensor slice_embed; // (1,D,1,C), trainable volumetric add-on
};
TORCH_MODULE(PatchEmbed);

// Multi-head self-attention over the token axis with slices folded into the
// batch; q/v carry low-rank factors per cfg.lora_targets.
class SlabAttentionImpl : public torch::nn::Module {
public:
    explicit SlabAttentionImpl(const EncoderConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x); // (M,N,C) -> (M,N,C)

    void record_attention(bool on) { record_ = on; }
    const torch::Tensor& last_attention() const { return last_attn_; }

    LoraLinear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};
    int64_t heads = 1;
    int64_t head_dim = 1;

private:
    bool record_ = false;
    torch::Tensor last_attn_; // (M,heads,N,N), detached
};
TORCH_MODULE(SlabAttention);

// Pre-norm ViT block: attention (slices folded into batch), then the depth
// adapter, then the MLP. Residual connections throughout.
class EncoderBlockImpl : public torch::nn::Module {
public:
    explicit EncoderBlockImpl(const EncoderConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x); // (B,D,N,C)

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    SlabAttention attn{nullptr};
    DepthAdapter adapter{nullptr};
    torch::nn::Linear mlp_fc1{nullptr}, mlp_fc2{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Long-skip fusion: concat along embed dim, project 2C -> C with a map
// initialized [I | 0] (skip ignored at init); optional layer norm after.
class SkipFuseImpl : public torch::nn::Module {
public:
    SkipFuseImpl(int64_t channels, bool norm_after);
    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& skip);

    torch::nn::Linear proj{nullptr};
    torch::nn::LayerNorm norm{nullptr}; // registered only when norm_after
};
TORCH_MODULE(SkipFuse);

// ViT encoder with symmetric U-Net long skips: block i of the first half
// feeds block N+1-i of the second half. Output tokens are averaged over the
// slice axis and reshaped to a (B,C,h,w) feature map.
class SlabViTEncoderImpl : public torch::nn::Module {
public:
    SlabViTEncoderImpl(const EncoderConfig& cfg, bool use_skips);
    torch::Tensor forward(const torch::Tensor& slab); // (B,D,H,W) -> (B,C,h,w)

    // 1-based (consumer, producer) pairs, e.g. N=8: (5,4) (6,3) (7,2) (8,1).
    std::vector<std::pair<int64_t, int64_t>> skip_pairs() const;

    EncoderConfig cfg;
    bool use_skips = true;
    PatchEmbed patch_embed{nullptr};
    torch::nn::ModuleList blocks;
    torch::nn::ModuleList fuses; // empty unless use_skips
};
TORCH_MODULE(SlabViTEncoder);

} // namespace brainparc
