#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.h"

#include <brainparc/encoder.hpp>
#include <brainparc/errors.hpp>
#include <brainparc/model.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

using namespace brainparc;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.embed_dim = 32;
    cfg.num_blocks = 4;
    cfg.num_heads = 2;
    cfg.patch_size = 8;
    cfg.slab_depth = 5;
    cfg.adapter_bottleneck = 8;
    cfg.lora_rank = 2;
    cfg.input_h = 32;
    cfg.input_w = 32;
    return cfg;
}

bool close_abs(const torch::Tensor& a, const torch::Tensor& b, double atol) {
    return torch::allclose(a, b, /*rtol=*/0.0, atol);
}

} // namespace

TEST_CASE("patch embed: shapes, zero-input linearity, divisibility errors") {
    torch::manual_seed(0);
    EncoderConfig cfg;
    cfg.embed_dim = 96;
    cfg.patch_size = 8;
    cfg.input_h = 64;
    cfg.input_w = 64;

    PatchEmbed pe(cfg);

    SUBCASE("(2,5,64,64) patch 8 embed 96 -> (2,5,64,96)") {
        auto tokens = pe->forward(torch::randn({2, 5, 64, 64}));
        CHECK(tokens.sizes() == torch::IntArrayRef({2, 5, 64, 96}));
        CHECK(tokens.isfinite().all().item<bool>());
    }

    SUBCASE("all-zero slab with zero projection bias -> positional + slice embeddings") {
        // The projection bias is zero-initialized, so conv(0) == 0 and the
        // output must be exactly the broadcast sum of the two embeddings.
        auto tokens = pe->forward(torch::zeros({2, 5, 64, 64}));
        auto want = (pe->pos_embed + pe->slice_embed).expand({2, 5, 64, 96});
        CHECK(torch::equal(tokens, want));
    }

    SUBCASE("H=63 not divisible by patch 8 -> configuration error") {
        CHECK_THROWS_WITH_AS(pe->forward(torch::randn({2, 5, 63, 64})),
                             doctest::Contains("not divisible by patch size"), ConfigError);
    }

    SUBCASE("width mismatch against the configured geometry names the axis") {
        CHECK_THROWS_WITH_AS(pe->forward(torch::randn({2, 5, 64, 48})),
                             doctest::Contains("width"), ConfigError);
    }

    SUBCASE("wrong slab depth -> configuration error") {
        CHECK_THROWS_WITH_AS(pe->forward(torch::randn({2, 3, 64, 64})),
                             doctest::Contains("depth"), ConfigError);
    }

    SUBCASE("positional embedding frozen, slice embedding trainable") {
        CHECK_FALSE(pe->pos_embed.requires_grad());
        CHECK(pe->slice_embed.requires_grad());
        CHECK_FALSE(pe->proj->weight.requires_grad());
    }
}

TEST_CASE("lora linear: hand example, oracle, inert init, disabled rank") {
    torch::manual_seed(1);

    SUBCASE("x=ones(1,2), W=I, A=[[1],[1]], B=[[1,1]], scale=1 -> [3,3]") {
        LoraLinear lin(2, 2, /*rank=*/1, /*scale=*/1.0, /*train_base=*/false);
        {
            torch::NoGradGuard ng;
            lin->base->weight.copy_(torch::eye(2));
            lin->base->bias.zero_();
            lin->lora_a.copy_(torch::tensor({{1.0f}, {1.0f}}));
            lin->lora_b.copy_(torch::tensor({{1.0f, 1.0f}}));
        }
        auto y = lin->forward(torch::ones({1, 2}));
        // x.W + (x.A).B = [1,1] + [2].[1,1] = [3,3]
        CHECK(close_abs(y, torch::tensor({{3.0f, 3.0f}}), 1e-6));
    }

    SUBCASE("brute-force matmul oracle on random factors") {
        LoraLinear lin(8, 6, /*rank=*/3, /*scale=*/0.7, /*train_base=*/false);
        {
            torch::NoGradGuard ng;
            lin->lora_a.copy_(torch::randn({8, 3}));
            lin->lora_b.copy_(torch::randn({3, 6}));
        }
        auto x = torch::randn({4, 8});
        auto want = torch::addmm(lin->base->bias, x, lin->base->weight.t()) +
                    0.7 * x.matmul(lin->lora_a).matmul(lin->lora_b);
        CHECK(close_abs(lin->forward(x), want, 1e-5));
    }

    SUBCASE("B starts at zero so the fresh module equals its base projection") {
        LoraLinear lin(16, 16, /*rank=*/4, /*scale=*/2.0, /*train_base=*/false);
        CHECK(torch::equal(lin->lora_b, torch::zeros({4, 16})));
        auto x = torch::randn({3, 16});
        auto base_only = torch::addmm(lin->base->bias, x, lin->base->weight.t());
        CHECK(torch::equal(lin->forward(x), base_only));
    }

    SUBCASE("rank 0 disables the low-rank path entirely") {
        LoraLinear lin(16, 16, /*rank=*/0, /*scale=*/1.0, /*train_base=*/false);
        auto x = torch::randn({3, 16});
        auto base_only = torch::addmm(lin->base->bias, x, lin->base->weight.t());
        CHECK(torch::equal(lin->forward(x), base_only));
        // No factor parameters are registered when the path is disabled.
        CHECK(lin->named_parameters().size() == 2);
    }

    SUBCASE("negative rank -> configuration error") {
        CHECK_THROWS_AS(LoraLinear(8, 8, -1, 1.0, false), ConfigError);
    }

    SUBCASE("base frozen, factors trainable") {
        LoraLinear lin(8, 8, /*rank=*/2, /*scale=*/1.0, /*train_base=*/false);
        CHECK_FALSE(lin->base->weight.requires_grad());
        CHECK_FALSE(lin->base->bias.requires_grad());
        CHECK(lin->lora_a.requires_grad());
        CHECK(lin->lora_b.requires_grad());
    }
}

TEST_CASE("depth adapter: inert init, shape contract, cross-slice mixing") {
    torch::manual_seed(2);

    SUBCASE("freshly initialized adapter is the identity") {
        DepthAdapter ad(32, 8);
        auto x = torch::randn({2, 5, 16, 32});
        CHECK(torch::equal(ad->forward(x), x));
    }

    SUBCASE("output shape equals input shape") {
        DepthAdapter ad(24, 6);
        auto x = torch::randn({3, 5, 9, 24});
        CHECK(ad->forward(x).sizes() == x.sizes());
    }

    SUBCASE("after one training step a slice perturbation leaks to its neighbors") {
        DepthAdapter ad(16, 4);
        torch::optim::Adam opt(ad->parameters(), torch::optim::AdamOptions(1e-2));
        auto train_x = torch::randn({1, 5, 8, 16});
        auto loss = ad->forward(train_x).square().sum();
        loss.backward();
        opt.step();

        torch::NoGradGuard ng;
        auto x = torch::randn({1, 5, 8, 16});
        auto base = ad->forward(x);
        auto xp = x.clone();
        xp.select(1, 2) += 0.5; // perturb the center slice
        auto pert = ad->forward(xp);
        // The depth-wise mixer has receptive field +/-1 slice, so both
        // neighbors of the perturbed slice must move.
        auto diff = (pert - base).abs();
        CHECK(diff.select(1, 1).max().item<double>() > 1e-7);
        CHECK(diff.select(1, 3).max().item<double>() > 1e-7);
    }

    SUBCASE("non-positive bottleneck -> configuration error") {
        CHECK_THROWS_AS(DepthAdapter(16, 0), ConfigError);
    }
}

TEST_CASE("slab attention: shape and softmax row normalization") {
    torch::manual_seed(3);
    auto cfg = tiny_cfg();
    SlabAttention attn(cfg);
    auto x = torch::randn({6, 16, 32}); // (M,N,C) with slices folded into M

    SUBCASE("shape preserved") { CHECK(attn->forward(x).sizes() == x.sizes()); }

    SUBCASE("attention rows sum to 1 within 1e-6") {
        attn->record_attention(true);
        attn->forward(x);
        auto a = attn->last_attention();
        REQUIRE(a.defined());
        CHECK(a.sizes() == torch::IntArrayRef({6, 2, 16, 16}));
        auto rows = a.sum(-1);
        CHECK((rows - 1.0).abs().max().item<double>() < 1e-6);
        attn->record_attention(false);
    }
}

TEST_CASE("transformer block: shape and identity-preserving fine-tune inits") {
    torch::manual_seed(4);
    auto cfg = tiny_cfg();

    SUBCASE("output shape equals input shape") {
        EncoderBlock block(cfg);
        auto x = torch::randn({2, 5, 16, 32});
        CHECK(block->forward(x).sizes() == x.sizes());
    }

    SUBCASE("fresh LoRA + fresh adapter == plain base-weight block") {
        EncoderBlock with_lora(cfg);
        auto plain_cfg = cfg;
        plain_cfg.lora_rank = 0;
        EncoderBlock plain(plain_cfg);
        // Share every base parameter; the LoRA factors exist only on one side.
        int64_t copied = copy_matching_params(*with_lora, *plain);
        CHECK(copied > 0);
        auto x = torch::randn({2, 5, 16, 32});
        torch::NoGradGuard ng;
        CHECK(close_abs(with_lora->forward(x), plain->forward(x), 1e-6));
    }
}

TEST_CASE("skip fusion: identity init, averaging projection, pairing-bug error") {
    torch::manual_seed(5);
    const int64_t c = 32;
    auto tokens = torch::randn({2, 5, 16, c});
    auto skip = torch::randn({2, 5, 16, c});

    SUBCASE("[I | 0] init ignores the skip entirely") {
        SkipFuse fuse(c, /*norm_after=*/false);
        CHECK(close_abs(fuse->forward(tokens, skip), tokens, 1e-6));
    }

    SUBCASE("with norm_after the init output is the layer-normed tokens") {
        SkipFuse fuse(c, /*norm_after=*/true);
        auto want = torch::nn::functional::layer_norm(
            tokens, torch::nn::functional::LayerNormFuncOptions({c}));
        CHECK(close_abs(fuse->forward(tokens, skip), want, 1e-5));
    }

    SUBCASE("projection [I/2 | I/2] with skip == tokens reproduces tokens") {
        SkipFuse fuse(c, /*norm_after=*/false);
        {
            torch::NoGradGuard ng;
            fuse->proj->weight.copy_(torch::cat({0.5 * torch::eye(c), 0.5 * torch::eye(c)}, 1));
            fuse->proj->bias.zero_();
        }
        CHECK(close_abs(fuse->forward(tokens, tokens), tokens, 1e-6));
    }

    SUBCASE("shape mismatch -> wiring error flagging a pairing bug") {
        SkipFuse fuse(c, false);
        auto bad = torch::randn({2, 5, 8, c});
        CHECK_THROWS_WITH_AS(fuse->forward(tokens, bad), doctest::Contains("pairing bug"),
                             WiringError);
    }
}

TEST_CASE("skip pairing rule (consumer, producer) = (i, N+1-i)") {
    auto cfg = tiny_cfg();

    SUBCASE("N=8: 5<-4, 6<-3, 7<-2, 8<-1") {
        cfg.num_blocks = 8;
        SlabViTEncoder enc(cfg, true);
        std::vector<std::pair<int64_t, int64_t>> want = {{5, 4}, {6, 3}, {7, 2}, {8, 1}};
        CHECK(enc->skip_pairs() == want);
    }

    SUBCASE("N=12: block 9 consumes block 4's output") {
        cfg.num_blocks = 12;
        SlabViTEncoder enc(cfg, true);
        auto pairs = enc->skip_pairs();
        REQUIRE(pairs.size() == 6);
        bool found = false;
        for (auto& [consumer, producer] : pairs)
            if (consumer == 9 && producer == 4) found = true;
        CHECK(found);
        // Full multiset {(N/2+k, N/2+1-k)}.
        for (int64_t k = 1; k <= 6; ++k) {
            CHECK(pairs[static_cast<size_t>(k - 1)].first == 6 + k);
            CHECK(pairs[static_cast<size_t>(k - 1)].second == 7 - k);
        }
    }

    SUBCASE("odd block count -> configuration error") {
        cfg.num_blocks = 3;
        CHECK_THROWS_AS(SlabViTEncoder(cfg, true), ConfigError);
    }
}

TEST_CASE("encoder: output geometry, identity-at-init, live skips, determinism") {
    torch::manual_seed(6);
    auto cfg = tiny_cfg();

    SUBCASE("(B,D,H,W) -> (B,C,H/p,W/p)") {
        SlabViTEncoder enc(cfg, true);
        auto out = enc->forward(torch::randn({2, 5, 32, 32}));
        CHECK(out.sizes() == torch::IntArrayRef({2, 32, 4, 4}));
        CHECK(out.isfinite().all().item<bool>());
    }

    SUBCASE("skips on == skips off at init, and they diverge once a fuse moves") {
        SlabViTEncoder with_skips(cfg, true);
        SlabViTEncoder without(cfg, false);
        int64_t copied = copy_matching_params(*with_skips, *without);
        CHECK(copied > 0);

        auto x = torch::randn({1, 5, 32, 32});
        torch::Tensor a, b;
        {
            torch::NoGradGuard ng;
            a = with_skips->forward(x);
            b = without->forward(x);
        }
        CHECK(close_abs(a, b, 1e-6));

        // Nudge the first fusion projection off [I|0]: the skip path must now
        // actually contribute.
        {
            torch::NoGradGuard ng;
            auto fuse = with_skips->fuses[0]->as<SkipFuseImpl>();
            fuse->proj->weight += 0.05 * torch::randn_like(fuse->proj->weight);
        }
        torch::NoGradGuard ng;
        auto a2 = with_skips->forward(x);
        CHECK((a2 - b).abs().max().item<double>() > 1e-4);
    }

    SUBCASE("two forward passes agree bitwise") {
        SlabViTEncoder enc(cfg, true);
        auto x = torch::randn({1, 5, 32, 32});
        torch::NoGradGuard ng;
        CHECK(torch::equal(enc->forward(x), enc->forward(x)));
    }
}

TEST_CASE("encoder finite-difference check: directional derivative vs autodiff") {
    torch::manual_seed(7);
    auto cfg = tiny_cfg();
    SlabViTEncoder enc(cfg, true);
    enc->to(torch::kFloat64);
    enc->eval();

    auto x = torch::randn({1, 5, 32, 32}, torch::kFloat64).set_requires_grad(true);
    auto y = enc->forward(x).sum();
    y.backward();
    auto grad = x.grad().clone();

    auto d = torch::randn({1, 5, 32, 32}, torch::kFloat64);
    d /= d.norm();
    const double h = 1e-3;
    torch::NoGradGuard ng;
    auto xd = x.detach();
    double fp = enc->forward(xd + h * d).sum().item<double>();
    double fm = enc->forward(xd - h * d).sum().item<double>();
    double fd = (fp - fm) / (2 * h);
    double ad = grad.mul(d).sum().item<double>();
    CHECK(std::abs(fd - ad) / std::max(1.0, std::abs(ad)) < 1e-3);
}

TEST_CASE("gradient flow: base attention frozen, factors and adapters live") {
    torch::manual_seed(8);
    auto cfg = tiny_cfg();
    SlabViTEncoder enc(cfg, true);

    auto x = torch::randn({1, 5, 32, 32});
    enc->forward(x).square().sum().backward();

    int64_t base_attn = 0, factors = 0, adapters = 0;
    for (auto& p : enc->named_parameters()) {
        const std::string& name = p.key();
        const auto& t = p.value();
        if (name.find("attn.") != std::string::npos &&
            name.find(".base.") != std::string::npos) {
            ++base_attn;
            CHECK_FALSE(t.requires_grad());
            // Frozen: no gradient tensor is ever materialized.
            CHECK_FALSE(t.grad().defined());
        } else if (name.find("lora_") != std::string::npos) {
            ++factors;
            REQUIRE(t.grad().defined());
            CHECK(t.grad().isfinite().all().item<bool>());
        } else if (name.find("adapter.") != std::string::npos) {
            ++adapters;
            REQUIRE(t.grad().defined());
            CHECK(t.grad().isfinite().all().item<bool>());
        }
    }
    CHECK(base_attn == 4 * 2 * cfg.num_blocks); // q,k,v,o weight+bias per block
    CHECK(factors == 2 * 2 * cfg.num_blocks);   // A,B on q and v per block
    CHECK(adapters > 0);
}
