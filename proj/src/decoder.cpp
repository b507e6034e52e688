#include "brainparc/decoder.hpp"

#include "brainparc/errors.hpp"

namespace brainparc {

namespace {

// Replicate padding keeps spatially constant inputs exactly constant through
// the spatial convs, which zero padding would break at the borders.
torch::nn::Conv2d make_conv(int64_t in, int64_t out, int64_t kernel, int64_t dilation = 1) {
    const int64_t pad = dilation * (kernel - 1) / 2;
    auto opts = torch::nn::Conv2dOptions(in, out, kernel).dilation(dilation).padding(pad);
    if (pad > 0) opts = opts.padding_mode(torch::kReplicate);
    return torch::nn::Conv2d(opts);
}

} // namespace

// ---------------------------------------------------------------------------
// DualAspp
// ---------------------------------------------------------------------------

DualAsppImpl::DualAsppImpl(int64_t in_channels, int64_t out_channels,
                           std::vector<int64_t> rates_, int64_t gn_groups)
    : rates(std::move(rates_)) {
    if (rates.empty()) throw ConfigError("dilation rates must be non-empty");
    branches = register_module("branches", torch::nn::ModuleList());
    for (const int64_t rate : rates) {
        if (rate == 1)
            branches->push_back(make_conv(in_channels, out_channels, 1));
        else
            branches->push_back(make_conv(in_channels, out_channels, 3, rate));
    }
    pool_proj = register_module("pool_proj", make_conv(in_channels, out_channels, 1));
    const auto width = static_cast<int64_t>(rates.size() + 1) * out_channels;
    fuse = register_module("fuse", make_conv(width, out_channels, 1));
    fuse_norm = register_module("fuse_norm", torch::nn::GroupNorm(gn_groups, out_channels));
}

torch::Tensor DualAsppImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "aspp expects (B,C,h,w), got dim ", x.dim());
    const int64_t h = x.size(2), w = x.size(3);

    // Second pooled vector feeding the bottom (last-rate) branch input.
    auto bottom_context = torch::adaptive_avg_pool2d(x, {1, 1});

    std::vector<torch::Tensor> outs;
    outs.reserve(rates.size() + 1);
    for (size_t i = 0; i < rates.size(); ++i) {
        auto input = x;
        if (i + 1 == rates.size()) input = x + bottom_context;
        outs.push_back(branches[i]->as<torch::nn::Conv2dImpl>()->forward(input));
    }

    // Standard pooled-context branch, broadcast back to (h,w).
    auto pooled = pool_proj->forward(torch::adaptive_avg_pool2d(x, {1, 1}));
    outs.push_back(pooled.expand({x.size(0), pooled.size(1), h, w}));

    auto fused = fuse->forward(torch::cat(outs, 1));
    return torch::relu(fuse_norm->forward(fused));
}

// ---------------------------------------------------------------------------
// Channel / spatial attention
// ---------------------------------------------------------------------------

ChannelAttentionImpl::ChannelAttentionImpl(int64_t channels, int64_t reduction) {
    if (reduction < 1 || channels % reduction != 0)
        throw ConfigError("channel count " + std::to_string(channels) +
                          " not divisible by attention reduction " + std::to_string(reduction));
    fc1 = register_module("fc1", torch::nn::Linear(channels, channels / reduction));
    fc2 = register_module("fc2", torch::nn::Linear(channels / reduction, channels));
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "channel attention expects (B,C,h,w), got dim ", x.dim());
    auto mlp = [this](torch::Tensor pooled) {
        return fc2->forward(torch::relu(fc1->forward(pooled.flatten(1))));
    };
    auto avg = mlp(torch::adaptive_avg_pool2d(x, {1, 1}));
    auto max = mlp(std::get<0>(torch::adaptive_max_pool2d(x, {1, 1})));
    return torch::sigmoid(avg + max).view({x.size(0), x.size(1), 1, 1});
}

SpatialAttentionImpl::SpatialAttentionImpl(int64_t kernel) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ConfigError("spatial attention kernel must be odd, got " +
                          std::to_string(kernel));
    conv = register_module("conv", make_conv(2, 1, kernel));
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "spatial attention expects (B,C,h,w), got dim ", x.dim());
    auto mean = x.mean(1, /*keepdim=*/true);
    auto max = std::get<0>(x.max(1, /*keepdim=*/true));
    return torch::sigmoid(conv->forward(torch::cat({mean, max}, 1)));
}

CsaImpl::CsaImpl(int64_t channels, int64_t reduction, int64_t kernel) {
    channel = register_module("channel", ChannelAttention(channels, reduction));
    spatial = register_module("spatial", SpatialAttention(kernel));
}

torch::Tensor CsaImpl::forward(const torch::Tensor& x) {
    auto weighted = x * channel->forward(x);
    return weighted * spatial->forward(weighted);
}

// ---------------------------------------------------------------------------
// Boundary refinement
// ---------------------------------------------------------------------------

BoundaryRefineImpl::BoundaryRefineImpl(int64_t channels, int64_t gn_groups) {
    const int64_t mid = std::max<int64_t>(channels / 2, 1);
    edge1 = register_module("edge1", make_conv(channels, mid, 3));
    edge2 = register_module("edge2", make_conv(mid, 1, 3));
    refine1 = register_module("refine1", make_conv(channels + 1, channels, 3));
    refine2 = register_module("refine2", make_conv(channels, channels, 3));
    gn1 = register_module("gn1", torch::nn::GroupNorm(gn_groups, channels));
    gn2 = register_module("gn2", torch::nn::GroupNorm(gn_groups, channels));
}

std::pair<torch::Tensor, torch::Tensor> BoundaryRefineImpl::forward(const torch::Tensor& x) {
    auto edge = torch::sigmoid(edge2->forward(torch::relu(edge1->forward(x))));
    auto refined = torch::cat({x, edge}, 1);
    refined = torch::relu(gn1->forward(refine1->forward(refined)));
    refined = torch::relu(gn2->forward(refine2->forward(refined)));
    return {refined, edge};
}

// ---------------------------------------------------------------------------
// AttentionDecoder
// ---------------------------------------------------------------------------

AttentionDecoderImpl::AttentionDecoderImpl(const DecoderConfig& cfg_,
                                           const AblationSwitches& switches_)
    : cfg(cfg_), switches(switches_) {
    cfg.validate();
    input_proj = register_module("input_proj",
                                 make_conv(cfg.in_channels, cfg.aspp_channels, 1));
    if (switches.use_aspp)
        aspp = register_module("aspp", DualAspp(cfg.aspp_channels, cfg.aspp_channels,
                                                cfg.dilation_rates, cfg.gn_groups));
    if (switches.use_csa)
        csa = register_module("csa",
                              Csa(cfg.aspp_channels, cfg.reduction, cfg.spatial_kernel));
    if (switches.use_br)
        br = register_module("br", BoundaryRefine(cfg.aspp_channels, cfg.gn_groups));
    head1 = register_module("head1", make_conv(cfg.aspp_channels, cfg.aspp_channels, 1));
    head2 = register_module("head2", make_conv(cfg.aspp_channels, cfg.num_classes, 1));
    if (cfg.deconv_upsample) {
        // Overlapping kernel initialized to bilinear interpolation: starts as
        // the fixed upsampler and learns boundary sharpening from there.
        const int64_t f = cfg.upsample_factor;
        deconv = register_module(
            "deconv", torch::nn::ConvTranspose2d(
                          torch::nn::ConvTranspose2dOptions(cfg.num_classes, cfg.num_classes,
                                                            2 * f)
                              .stride(f)
                              .padding(f / 2)));
        torch::NoGradGuard ng;
        deconv->weight.zero_();
        deconv->bias.zero_();
        const double c = (2.0 * static_cast<double>(f) - 1 - (f % 2)) /
                         (2.0 * static_cast<double>(f));
        for (int64_t i = 0; i < 2 * f; ++i)
            for (int64_t j = 0; j < 2 * f; ++j) {
                const double w =
                    (1 - std::abs(static_cast<double>(i) / static_cast<double>(f) - c)) *
                    (1 - std::abs(static_cast<double>(j) / static_cast<double>(f) - c));
                for (int64_t ch = 0; ch < cfg.num_classes; ++ch)
                    deconv->weight.index_put_({ch, ch, i, j}, w);
            }
    }
}

DecodeOut AttentionDecoderImpl::forward(const torch::Tensor& features) {
    TORCH_CHECK(features.dim() == 4, "decoder expects (B,C,h,w), got dim ", features.dim());
    TORCH_CHECK(features.size(1) == cfg.in_channels, "decoder got ", features.size(1),
                " channels, configured for ", cfg.in_channels);

    auto x = input_proj->forward(features);
    if (switches.use_aspp) x = aspp->forward(x);
    if (switches.use_csa) x = csa->forward(x);

    DecodeOut out;
    if (switches.use_br) {
        auto [refined, edge] = br->forward(x);
        x = refined;
        out.edge_map = edge;
    }

    out.logits_coarse = head2->forward(torch::relu(head1->forward(x)));
    if (cfg.deconv_upsample) {
        out.logits = deconv->forward(out.logits_coarse);
    } else {
        namespace F = torch::nn::functional;
        out.logits = F::interpolate(
            out.logits_coarse,
            F::InterpolateFuncOptions()
                .scale_factor(std::vector<double>{static_cast<double>(cfg.upsample_factor),
                                                  static_cast<double>(cfg.upsample_factor)})
                .mode(torch::kBilinear)
                .align_corners(false));
    }
    return out;
}

} // namespace brainparc
