#include "brainparc/encoder.hpp"

#include <cmath>

#include "brainparc/errors.hpp"

namespace brainparc {

// ---------------------------------------------------------------------------
// LoraLinear
// ---------------------------------------------------------------------------

LoraLinearImpl::LoraLinearImpl(int64_t in_features, int64_t out_features, int64_t rank_,
                               double scale_, bool train_base)
    : rank(rank_), scale(scale_) {
    if (rank < 0) throw ConfigError("lora rank must be >= 0, got " + std::to_string(rank));
    base = register_module("base", torch::nn::Linear(in_features, out_features));
    base->weight.set_requires_grad(train_base);
    base->bias.set_requires_grad(train_base);
    if (rank > 0) {
        lora_a = register_parameter("lora_a", torch::empty({in_features, rank}));
        torch::nn::init::kaiming_uniform_(lora_a, std::sqrt(5.0));
        lora_b = register_parameter("lora_b", torch::zeros({rank, out_features}));
    }
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
    auto y = base->forward(x);
    if (rank > 0) y = y + scale * x.matmul(lora_a).matmul(lora_b);
    return y;
}

// ---------------------------------------------------------------------------
// DepthAdapter
// ---------------------------------------------------------------------------

DepthAdapterImpl::DepthAdapterImpl(int64_t channels, int64_t bottleneck) {
    if (bottleneck < 1)
        throw ConfigError("adapter bottleneck must be positive, got " +
                          std::to_string(bottleneck));
    down = register_module("down", torch::nn::Linear(channels, bottleneck));
    depth_mix = register_module(
        "depth_mix", torch::nn::Conv1d(torch::nn::Conv1dOptions(bottleneck, bottleneck, 3)
                                           .padding(1)
                                           .groups(bottleneck)));
    up = register_module("up", torch::nn::Linear(bottleneck, channels));
    torch::nn::init::zeros_(up->weight);
    torch::nn::init::zeros_(up->bias);
}

torch::Tensor DepthAdapterImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "adapter expects (B,D,N,C), got dim ", x.dim());
    const int64_t b = x.size(0), d = x.size(1), n = x.size(2);
    auto h = down->forward(x); // (B,D,N,b)
    const int64_t bott = h.size(3);
    // Depth-wise mixing over the slice axis at fixed token index.
    h = h.permute({0, 2, 3, 1}).reshape({b * n, bott, d});
    h = depth_mix->forward(h);
    h = h.reshape({b, n, bott, d}).permute({0, 3, 1, 2});
    h = torch::gelu(h);
    return x + up->forward(h);
}

// ---------------------------------------------------------------------------
// PatchEmbed
// ---------------------------------------------------------------------------

PatchEmbedImpl::PatchEmbedImpl(const EncoderConfig& cfg_) : cfg(cfg_) {
    proj = register_module(
        "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, cfg.embed_dim, cfg.patch_size)
                                      .stride(cfg.patch_size)));
    torch::nn::init::zeros_(proj->bias);
    pos_embed =
        register_parameter("pos_embed", torch::randn({1, 1, cfg.num_tokens(), cfg.embed_dim}) *
                                            0.02);
    slice_embed = register_parameter(
        "slice_embed", torch::randn({1, cfg.slab_depth, 1, cfg.embed_dim}) * 0.02);
    if (!cfg.train_base) {
        proj->weight.set_requires_grad(false);
        proj->bias.set_requires_grad(false);
        pos_embed.set_requires_grad(false);
        // slice_embed stays trainable: it is a volumetric add-on, not part of
        // an importable 2D backbone.
    }
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& slab) {
    if (slab.dim() != 4)
        throw ConfigError("slab must be (B,D,H,W), got " + std::to_string(slab.dim()) +
                          " dims");
    if (slab.size(1) != cfg.slab_depth)
        throw ConfigError("slab depth " + std::to_string(slab.size(1)) +
                          " does not match configured depth " + std::to_string(cfg.slab_depth));
    if (slab.size(2) % cfg.patch_size != 0)
        throw ConfigError("input height " + std::to_string(slab.size(2)) +
                          " is not divisible by patch size " + std::to_string(cfg.patch_size));
    if (slab.size(3) % cfg.patch_size != 0)
        throw ConfigError("input width " + std::to_string(slab.size(3)) +
                          " is not divisible by patch size " + std::to_string(cfg.patch_size));
    if (slab.size(2) != cfg.input_h)
        throw ConfigError("input height " + std::to_string(slab.size(2)) +
                          " does not match configured height " + std::to_string(cfg.input_h));
    if (slab.size(3) != cfg.input_w)
        throw ConfigError("input width " + std::to_string(slab.size(3)) +
                          " does not match configured width " + std::to_string(cfg.input_w));

    const int64_t b = slab.size(0), d = slab.size(1);
    auto x = proj->forward(slab.reshape({b * d, 1, slab.size(2), slab.size(3)}));
    x = x.flatten(2).transpose(1, 2); // (B*D, N, C)
    x = x.reshape({b, d, x.size(1), x.size(2)});
    return x + pos_embed + slice_embed;
}

// ---------------------------------------------------------------------------
// SlabAttention
// ---------------------------------------------------------------------------

namespace {

int64_t rank_for(char target, const EncoderConfig& cfg) {
    return cfg.lora_targets.find(target) != std::string::npos ? cfg.lora_rank : 0;
}

} // namespace

SlabAttentionImpl::SlabAttentionImpl(const EncoderConfig& cfg) {
    heads = cfg.num_heads;
    head_dim = cfg.embed_dim / cfg.num_heads;
    const int64_t c = cfg.embed_dim;
    q = register_module(
        "q", LoraLinear(c, c, rank_for('q', cfg), cfg.lora_scale, cfg.train_base));
    k = register_module(
        "k", LoraLinear(c, c, rank_for('k', cfg), cfg.lora_scale, cfg.train_base));
    v = register_module(
        "v", LoraLinear(c, c, rank_for('v', cfg), cfg.lora_scale, cfg.train_base));
    o = register_module(
        "o", LoraLinear(c, c, rank_for('o', cfg), cfg.lora_scale, cfg.train_base));
}

torch::Tensor SlabAttentionImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 3, "attention expects (M,N,C), got dim ", x.dim());
    const int64_t m = x.size(0), n = x.size(1);

    auto split = [&](torch::Tensor t) {
        return t.reshape({m, n, heads, head_dim}).transpose(1, 2); // (M,heads,N,hd)
    };
    auto qs = split(q->forward(x));
    auto ks = split(k->forward(x));
    auto vs = split(v->forward(x));

    auto attn = torch::softmax(
        qs.matmul(ks.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
    if (record_) last_attn_ = attn.detach();

    auto out = attn.matmul(vs).transpose(1, 2).reshape({m, n, heads * head_dim});
    return o->forward(out);
}

// ---------------------------------------------------------------------------
// EncoderBlock
// ---------------------------------------------------------------------------

EncoderBlockImpl::EncoderBlockImpl(const EncoderConfig& cfg) {
    const int64_t c = cfg.embed_dim;
    norm1 = register_module("norm1",
                            torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    norm2 = register_module("norm2",
                            torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    attn = register_module("attn", SlabAttention(cfg));
    adapter = register_module("adapter", DepthAdapter(c, cfg.adapter_bottleneck));
    mlp_fc1 = register_module("mlp_fc1", torch::nn::Linear(c, c * cfg.mlp_ratio));
    mlp_fc2 = register_module("mlp_fc2", torch::nn::Linear(c * cfg.mlp_ratio, c));
    if (!cfg.train_base) {
        for (auto* lin : {&mlp_fc1, &mlp_fc2}) {
            (*lin)->weight.set_requires_grad(false);
            (*lin)->bias.set_requires_grad(false);
        }
        for (auto* ln : {&norm1, &norm2}) {
            (*ln)->weight.set_requires_grad(false);
            (*ln)->bias.set_requires_grad(false);
        }
    }
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "block expects (B,D,N,C), got dim ", x.dim());
    const int64_t b = x.size(0), d = x.size(1), n = x.size(2), c = x.size(3);

    auto folded = x.reshape({b * d, n, c});
    folded = folded + attn->forward(norm1->forward(folded));
    auto tokens = folded.reshape({b, d, n, c});

    tokens = adapter->forward(tokens);
    tokens = tokens + mlp_fc2->forward(torch::gelu(mlp_fc1->forward(norm2->forward(tokens))));
    return tokens;
}

// ---------------------------------------------------------------------------
// SkipFuse
// ---------------------------------------------------------------------------

SkipFuseImpl::SkipFuseImpl(int64_t channels, bool norm_after) {
    proj = register_module("proj", torch::nn::Linear(2 * channels, channels));
    {
        torch::NoGradGuard no_grad;
        proj->weight.zero_();
        proj->weight.slice(1, 0, channels).copy_(torch::eye(channels));
        proj->bias.zero_();
    }
    if (norm_after)
        norm = register_module(
            "norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
}

torch::Tensor SkipFuseImpl::forward(const torch::Tensor& tokens, const torch::Tensor& skip) {
    if (!tokens.sizes().equals(skip.sizes()))
        throw WiringError("skip fusion shape mismatch: tokens " +
                          std::to_string(tokens.numel()) + " elements vs skip " +
                          std::to_string(skip.numel()) + " — pairing bug");
    auto fused = proj->forward(torch::cat({tokens, skip}, -1));
    if (norm) fused = norm->forward(fused);
    return fused;
}

// ---------------------------------------------------------------------------
// SlabViTEncoder
// ---------------------------------------------------------------------------

SlabViTEncoderImpl::SlabViTEncoderImpl(const EncoderConfig& cfg_, bool use_skips_)
    : cfg(cfg_), use_skips(use_skips_) {
    cfg.validate();
    patch_embed = register_module("patch_embed", PatchEmbed(cfg));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.num_blocks; ++i) blocks->push_back(EncoderBlock(cfg));
    fuses = register_module("fuses", torch::nn::ModuleList());
    if (use_skips)
        for (int64_t i = 0; i < cfg.num_blocks / 2; ++i)
            fuses->push_back(SkipFuse(cfg.embed_dim, cfg.fuse_norm));
}

std::vector<std::pair<int64_t, int64_t>> SlabViTEncoderImpl::skip_pairs() const {
    std::vector<std::pair<int64_t, int64_t>> pairs;
    for (int64_t j = cfg.num_blocks / 2 + 1; j <= cfg.num_blocks; ++j)
        pairs.emplace_back(j, cfg.num_blocks + 1 - j);
    return pairs;
}

torch::Tensor SlabViTEncoderImpl::forward(const torch::Tensor& slab) {
    auto tokens = patch_embed->forward(slab);
    const int64_t n = cfg.num_blocks;
    std::vector<torch::Tensor> store;
    store.reserve(static_cast<size_t>(n / 2));

    for (int64_t i = 0; i < n; ++i) {
        if (use_skips && i >= n / 2) {
            // Block i+1 (1-based) consumes the output of block n-i (1-based),
            // stored at index n-i-1.
            auto& skip = store[static_cast<size_t>(n - 1 - i)];
            tokens = fuses[static_cast<size_t>(i - n / 2)]->as<SkipFuseImpl>()->forward(tokens,
                                                                                        skip);
        }
        tokens = blocks[static_cast<size_t>(i)]->as<EncoderBlockImpl>()->forward(tokens);
        if (i < n / 2) store.push_back(tokens);
    }

    auto pooled = tokens.mean(1); // (B,N,C): slice axis averaged out
    const int64_t b = pooled.size(0);
    return pooled.transpose(1, 2).reshape({b, cfg.embed_dim, cfg.tokens_h(), cfg.tokens_w()});
}

} // namespace brainparc
