#pragma once

#include <torch/torch.h>

#include <optional>
#include <vector>

#include "brainparc/config.hpp"

namespace brainparc {

// Dual atrous spatial pyramid: a 1x1 branch (rate 1), 3x3 dilated branches,
// a pooled-context branch, and a second pooled vector broadcast-added to the
// input of the last ("bottom") dilated branch. Branch outputs concatenate
// into a 1x1 fusion conv + GroupNorm + ReLU.
class DualAsppImpl : public torch::nn::Module {
public:
    DualAsppImpl(int64_t in_channels, int64_t out_channels, std::vector<int64_t> rates,
                 int64_t gn_groups);
    torch::Tensor forward(const torch::Tensor& x); // (B,in,h,w) -> (B,out,h,w)

    std::vector<int64_t> rates;
    torch::nn::ModuleList branches; // one conv per rate
    torch::nn::Conv2d pool_proj{nullptr};
    torch::nn::Conv2d fuse{nullptr};
    torch::nn::GroupNorm fuse_norm{nullptr};
};
TORCH_MODULE(DualAspp);

// sigmoid(MLP(avgpool) + MLP(maxpool)) with a shared C -> C/r -> C MLP.
class ChannelAttentionImpl : public torch::nn::Module {
public:
    ChannelAttentionImpl(int64_t channels, int64_t reduction);
    torch::Tensor forward(const torch::Tensor& x); // (B,C,h,w) -> (B,C,1,1)

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ChannelAttention);

// sigmoid(conv_k([channel-mean ; channel-max])).
class SpatialAttentionImpl : public torch::nn::Module {
public:
    explicit SpatialAttentionImpl(int64_t kernel);
    torch::Tensor forward(const torch::Tensor& x); // (B,C,h,w) -> (B,1,h,w)

    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(SpatialAttention);

// Channel gate then spatial gate, applied multiplicatively.
class CsaImpl : public torch::nn::Module {
public:
    CsaImpl(int64_t channels, int64_t reduction, int64_t kernel);
    torch::Tensor forward(const torch::Tensor& x);

    ChannelAttention channel{nullptr};
    SpatialAttention spatial{nullptr};
};
TORCH_MODULE(Csa);

// Boundary refinement core: a shallow edge head predicts a sigmoid edge map,
// which is concatenated back and refined by two [3x3 conv, GroupNorm, ReLU]
// blocks. Returns refined features plus the edge map.
class BoundaryRefineImpl : public torch::nn::Module {
public:
    BoundaryRefineImpl(int64_t channels, int64_t gn_groups);
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

    torch::nn::Conv2d edge1{nullptr}, edge2{nullptr};
    torch::nn::Conv2d refine1{nullptr}, refine2{nullptr};
    torch::nn::GroupNorm gn1{nullptr}, gn2{nullptr};
};
TORCH_MODULE(BoundaryRefine);

struct DecodeOut {
    torch::Tensor logits;                  // (B,K,H,W), input resolution
    torch::Tensor logits_coarse;           // (B,K,h,w), pre-upsample
    std::optional<torch::Tensor> edge_map; // (B,1,h,w); absent without BR
};

// Multi-scale attention decoder. input_proj (1x1 channel match) and the
// per-pixel classifier head are always present so every ablation variant's
// parameter manifest is the full manifest minus the disabled stage's names.
class AttentionDecoderImpl : public torch::nn::Module {
public:
    AttentionDecoderImpl(const DecoderConfig& cfg, const AblationSwitches& switches);
    DecodeOut forward(const torch::Tensor& features); // (B,in,h,w)

    DecoderConfig cfg;
    AblationSwitches switches;
    torch::nn::Conv2d input_proj{nullptr};
    DualAspp aspp{nullptr};
    Csa csa{nullptr};
    BoundaryRefine br{nullptr};
    torch::nn::Conv2d head1{nullptr}, head2{nullptr};
    torch::nn::ConvTranspose2d deconv{nullptr}; // only when cfg.deconv_upsample
};
TORCH_MODULE(AttentionDecoder);

} // namespace brainparc
