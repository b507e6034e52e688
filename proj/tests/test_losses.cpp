#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.h"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "brainparc/errors.hpp"
#include "brainparc/losses.hpp"

using namespace brainparc;

namespace {

// Independent scalar-softmax oracle: mean over pixels of -log p_true.
double ce_oracle(const torch::Tensor& logits, const torch::Tensor& labels) {
    auto lg = logits.to(torch::kFloat64);
    const int64_t B = lg.size(0), K = lg.size(1), H = lg.size(2), W = lg.size(3);
    auto la = labels.accessor<int64_t, 3>();
    double sum = 0.0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double mx = -1e300, z = 0.0;
                for (int64_t k = 0; k < K; ++k)
                    mx = std::max(mx, lg[b][k][y][x].item<double>());
                for (int64_t k = 0; k < K; ++k)
                    z += std::exp(lg[b][k][y][x].item<double>() - mx);
                const double true_logit = lg[b][la[b][y][x]][y][x].item<double>();
                sum += -(true_logit - mx - std::log(z));
            }
    return sum / static_cast<double>(B * H * W);
}

// Brute-force 4-neighbor scan.
torch::Tensor edge_oracle(const torch::Tensor& labels) {
    const int64_t B = labels.size(0), H = labels.size(1), W = labels.size(2);
    auto out = torch::zeros({B, 1, H, W});
    auto la = labels.accessor<int64_t, 3>();
    auto oa = out.accessor<float, 4>();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t v = la[b][y][x];
                const int64_t dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int n = 0; n < 4; ++n) {
                    const int64_t ny = y + dy[n], nx = x + dx[n];
                    if (ny < 0 || nx < 0 || ny >= H || nx >= W) continue;
                    if (la[b][ny][nx] != v) {
                        oa[b][0][y][x] = 1.f;
                        break;
                    }
                }
            }
    return out;
}

torch::Tensor onehot_logits(const torch::Tensor& labels, int64_t K, double margin) {
    return torch::one_hot(labels, K).permute({0, 3, 1, 2}).to(torch::kFloat32) *
           static_cast<float>(margin);
}

} // namespace

TEST_CASE("cross entropy matches the scalar oracle") {
    torch::manual_seed(0);
    auto logits = torch::randn({2, 5, 6, 7});
    auto labels = torch::randint(0, 5, {2, 6, 7}, torch::kInt64);
    const double got = pixelwise_cross_entropy(logits, labels).item<double>();
    CHECK(got == doctest::Approx(ce_oracle(logits, labels)).epsilon(1e-6));
    CHECK(got >= 0.0);
}

TEST_CASE("cross entropy pinned values") {
    SUBCASE("uniform logits, 96 classes -> ln 96") {
        auto logits = torch::zeros({1, 96, 4, 4});
        auto labels = torch::randint(0, 96, {1, 4, 4}, torch::kInt64);
        CHECK(pixelwise_cross_entropy(logits, labels).item<double>() ==
              doctest::Approx(std::log(96.0)).epsilon(1e-6));
        CHECK(std::log(96.0) == doctest::Approx(4.5643).epsilon(1e-4));
    }
    SUBCASE("two pixels with margin 2") {
        // logits [[2,0],[0,2]] per pixel, labels [0,1]: p_true = e^2/(e^2+1).
        auto logits = torch::zeros({1, 2, 1, 2});
        logits.index_put_({0, 0, 0, 0}, 2.0);
        logits.index_put_({0, 1, 0, 1}, 2.0);
        auto labels = torch::tensor({{{0, 1}}}, torch::kInt64);
        const double want = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
        CHECK(want == doctest::Approx(0.126928).epsilon(1e-4));
        CHECK(pixelwise_cross_entropy(logits, labels).item<double>() ==
              doctest::Approx(want).epsilon(1e-6));
    }
    SUBCASE("huge true-class margin -> 0") {
        auto labels = torch::randint(0, 3, {1, 4, 4}, torch::kInt64);
        auto logits = onehot_logits(labels, 3, 60.0);
        CHECK(pixelwise_cross_entropy(logits, labels).item<double>() < 1e-8);
    }
    SUBCASE("out-of-range label names the voxel") {
        auto logits = torch::zeros({1, 3, 2, 2});
        auto labels = torch::zeros({1, 2, 2}, torch::kInt64);
        labels.index_put_({0, 1, 0}, 3);
        try {
            pixelwise_cross_entropy(logits, labels);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("label 3") != std::string::npos);
            CHECK(msg.find("b=0") != std::string::npos);
            CHECK(msg.find("y=1") != std::string::npos);
            CHECK(msg.find("x=0") != std::string::npos);
        }
    }
}

TEST_CASE("soft dice pinned values") {
    LossConfig cfg;

    SUBCASE("disjoint masses of 4") {
        // gt class 1 on pixels 0..3, prediction class 1 on pixels 4..7.
        auto gt = torch::zeros({1, 4, 4}, torch::kInt64);
        gt.view({-1}).slice(0, 0, 4).fill_(1);
        auto pred = torch::zeros({1, 4, 4}, torch::kInt64);
        pred.view({-1}).slice(0, 4, 8).fill_(1);
        auto logits = onehot_logits(pred, 2, 60.0);
        const double loss = soft_dice_loss(logits, gt, cfg).item<double>();
        const double d = 1e-5 / (8.0 + 1e-5); // ~1.25e-6
        CHECK(loss == doctest::Approx(1.0 - d).epsilon(1e-9));
    }
    SUBCASE("half-overlap gives dice 0.5") {
        auto gt = torch::zeros({1, 4, 4}, torch::kInt64);
        gt.view({-1}).slice(0, 0, 4).fill_(1);
        auto pred = torch::zeros({1, 4, 4}, torch::kInt64);
        pred.view({-1}).slice(0, 2, 6).fill_(1);
        auto logits = onehot_logits(pred, 2, 60.0);
        const double loss = soft_dice_loss(logits, gt, cfg).item<double>();
        CHECK(loss == doctest::Approx(0.5).epsilon(1e-5));
    }
    SUBCASE("perfect prediction -> loss -> 0") {
        auto gt = torch::randint(0, 3, {1, 8, 8}, torch::kInt64);
        auto logits = onehot_logits(gt, 3, 60.0);
        CHECK(soft_dice_loss(logits, gt, cfg).item<double>() < 1e-4);
    }
    SUBCASE("loss stays in [0, 1]") {
        torch::manual_seed(1);
        for (int t = 0; t < 5; ++t) {
            auto logits = torch::randn({2, 4, 6, 6}) * 3;
            auto labels = torch::randint(0, 4, {2, 6, 6}, torch::kInt64);
            const double loss = soft_dice_loss(logits, labels, cfg).item<double>();
            CHECK(loss >= 0.0);
            CHECK(loss <= 1.0);
        }
    }
}

TEST_CASE("soft dice on one-hot probabilities matches hard dice") {
    torch::manual_seed(2);
    LossConfig cfg;
    auto gt = torch::randint(0, 4, {1, 32, 32}, torch::kInt64);
    auto pred = torch::randint(0, 4, {1, 32, 32}, torch::kInt64);
    auto logits = onehot_logits(pred, 4, 60.0);

    const double soft = soft_dice_loss(logits, gt, cfg).item<double>();
    auto report = mean_dice({pred.squeeze(0)}, {gt.squeeze(0)}, 4, {"s"});
    CHECK(soft == doctest::Approx(1.0 - report.per_subject_mean[0]).epsilon(1e-4));
}

TEST_CASE("hybrid loss recombines exactly") {
    torch::manual_seed(3);
    LossConfig cfg; // alpha 0.2, beta 0.8, edge_weight 0.1
    auto logits = torch::randn({2, 4, 8, 8});
    auto labels = torch::randint(0, 4, {2, 8, 8}, torch::kInt64);

    SUBCASE("no edge terms") {
        auto out = hybrid_loss(logits, labels, std::nullopt, std::nullopt, cfg);
        const double want = 0.2 * out.components.at("ce") + 0.8 * out.components.at("dice");
        CHECK(std::abs(out.total.item<double>() - want) < 1e-12);
        CHECK(out.components.count("edge") == 0);

        // Components match the standalone ops exactly.
        CHECK(out.components.at("ce") ==
              doctest::Approx(pixelwise_cross_entropy(logits, labels).item<double>())
                  .epsilon(1e-12));
        CHECK(out.components.at("dice") ==
              doctest::Approx(soft_dice_loss(logits, labels, cfg).item<double>())
                  .epsilon(1e-12));
    }
    SUBCASE("with edge supervision") {
        auto edge_map = torch::sigmoid(torch::randn({2, 1, 8, 8}));
        auto edge_target = edge_target_from_labels(labels);
        auto out = hybrid_loss(logits, labels, edge_map, edge_target, cfg);
        const double want = 0.2 * out.components.at("ce") +
                            0.8 * out.components.at("dice") +
                            0.1 * out.components.at("edge");
        CHECK(std::abs(out.total.item<double>() - want) < 1e-12);
    }
    SUBCASE("edge_weight 0 equals the no-edge total") {
        auto edge_map = torch::sigmoid(torch::randn({2, 1, 8, 8}));
        auto edge_target = edge_target_from_labels(labels);
        LossConfig zero = cfg;
        zero.edge_weight = 0.0;
        auto with_edge = hybrid_loss(logits, labels, edge_map, edge_target, zero);
        auto without = hybrid_loss(logits, labels, std::nullopt, std::nullopt, zero);
        CHECK(with_edge.total.item<double>() ==
              doctest::Approx(without.total.item<double>()).epsilon(1e-12));
    }
    SUBCASE("one-sided edge arguments are a caller bug") {
        auto edge_map = torch::sigmoid(torch::randn({2, 1, 8, 8}));
        CHECK_THROWS_AS(hybrid_loss(logits, labels, edge_map, std::nullopt, cfg),
                        WiringError);
        CHECK_THROWS_AS(hybrid_loss(logits, labels, std::nullopt,
                                    edge_target_from_labels(labels), cfg),
                        WiringError);
    }
    SUBCASE("coarse edge map triggers max-pool downsampling") {
        auto edge_map = torch::sigmoid(torch::randn({2, 1, 4, 4}));
        auto edge_target = edge_target_from_labels(labels); // (2,1,8,8)
        auto out = hybrid_loss(logits, labels, edge_map, edge_target, cfg);
        auto down = downsample_edge_target(edge_target, 4, 4);
        const double bce =
            torch::binary_cross_entropy(edge_map.to(torch::kFloat64), down.to(torch::kFloat64))
                .item<double>();
        CHECK(out.components.at("edge") == doctest::Approx(bce).epsilon(1e-6));
    }
}

TEST_CASE("edge target from labels") {
    SUBCASE("constant map has no edges") {
        auto labels = torch::full({1, 5, 5}, 3, torch::kInt64);
        CHECK(edge_target_from_labels(labels).sum().item<double>() == 0.0);
    }
    SUBCASE("vertical half-split marks the two middle columns") {
        auto labels = torch::zeros({1, 4, 4}, torch::kInt64);
        labels.slice(2, 2, 4).fill_(1);
        auto edge = edge_target_from_labels(labels).squeeze();
        auto want = torch::zeros({4, 4});
        want.slice(1, 1, 3).fill_(1.0);
        CHECK(torch::equal(edge, want));
    }
    SUBCASE("single differing pixel marks itself and its 4 neighbors") {
        auto labels = torch::zeros({1, 4, 4}, torch::kInt64);
        labels.index_put_({0, 1, 1}, 7);
        auto edge = edge_target_from_labels(labels).squeeze();
        auto want = torch::zeros({4, 4});
        for (auto [y, x] : std::vector<std::pair<int64_t, int64_t>>{
                 {1, 1}, {0, 1}, {2, 1}, {1, 0}, {1, 2}})
            want.index_put_({y, x}, 1.0);
        CHECK(torch::equal(edge, want));
    }
    SUBCASE("random maps match the brute-force scan") {
        torch::manual_seed(4);
        for (int t = 0; t < 10; ++t) {
            auto labels = torch::randint(0, 3, {2, 9, 7}, torch::kInt64);
            CHECK(torch::equal(edge_target_from_labels(labels), edge_oracle(labels)));
        }
    }
    SUBCASE("max-pool downsampling marks any covered edge") {
        auto target = torch::zeros({1, 1, 8, 8});
        target.index_put_({0, 0, 3, 5}, 1.0);
        auto down = downsample_edge_target(target, 4, 4);
        CHECK(down.sizes() == torch::IntArrayRef({1, 1, 4, 4}));
        CHECK(down.index({0, 0, 1, 2}).item<float>() == 1.0f);
        CHECK(down.sum().item<double>() == 1.0);
    }
}

TEST_CASE("mean dice identities") {
    torch::manual_seed(5);
    auto x = torch::randint(0, 5, {6, 6, 6}, torch::kInt64);
    auto y = torch::randint(0, 5, {6, 6, 6}, torch::kInt64);

    SUBCASE("self comparison is exactly 1") {
        auto report = mean_dice({x}, {x}, 5, {"s"});
        CHECK(report.grand_mean == 1.0);
        for (const auto& e : report.entries) CHECK(e.dice == 1.0);
    }
    SUBCASE("symmetric in prediction and truth") {
        auto a = mean_dice({x}, {y}, 5, {"s"});
        auto b = mean_dice({y}, {x}, 5, {"s"});
        CHECK(a.grand_mean == doctest::Approx(b.grand_mean).epsilon(1e-15));
    }
    SUBCASE("two classes at 0.5 and 1.0 average to 0.75") {
        auto gt = torch::zeros({1, 4, 4}, torch::kInt64);
        gt.view({-1}).slice(0, 0, 4).fill_(1);  // class 1: pixels 0..3
        gt.view({-1}).slice(0, 8, 12).fill_(2); // class 2: pixels 8..11
        auto pred = gt.clone();
        pred.view({-1}).slice(0, 0, 2).fill_(0); // lose 2 of 4
        pred.view({-1}).slice(0, 4, 6).fill_(1); // gain 2 elsewhere -> dice 0.5
        auto report = mean_dice({pred}, {gt}, 3, {"s"});
        CHECK(report.per_subject_mean[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(report.grand_mean == doctest::Approx(0.75).epsilon(1e-12));
    }
}

TEST_CASE("mean dice matches brute-force set intersection") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const int64_t K = 4;
        auto pred = torch::randint(0, K, {8, 8, 8}, torch::kInt64);
        auto gt = torch::randint(0, K, {8, 8, 8}, torch::kInt64);
        auto report = mean_dice({pred}, {gt}, K, {"s"});

        auto pa = pred.reshape({-1});
        auto ga = gt.reshape({-1});
        double sum = 0.0;
        int64_t n = 0;
        for (int64_t c = 1; c < K; ++c) {
            const auto inter = (pa.eq(c) & ga.eq(c)).sum().item<int64_t>();
            const auto p = pa.eq(c).sum().item<int64_t>();
            const auto g = ga.eq(c).sum().item<int64_t>();
            if (p + g == 0) continue;
            sum += 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
            ++n;
        }
        CHECK(std::abs(report.per_subject_mean[0] - sum / static_cast<double>(n)) < 1e-12);
    }
}

TEST_CASE("mean dice bookkeeping across subjects") {
    auto a_pred = torch::zeros({4, 4, 4}, torch::kInt64);
    auto a_gt = torch::zeros({4, 4, 4}, torch::kInt64);
    a_pred.index_put_({0}, 1);
    a_gt.index_put_({0}, 1); // subject a: class 1 perfect
    auto b_pred = torch::zeros({4, 4, 4}, torch::kInt64);
    auto b_gt = torch::zeros({4, 4, 4}, torch::kInt64);
    b_gt.index_put_({0}, 2); // subject b: class 2 fully missed

    auto report = mean_dice({a_pred, b_pred}, {a_gt, b_gt}, 3, {"a", "b"});
    CHECK(report.per_subject_mean[0] == 1.0);
    CHECK(report.per_subject_mean[1] == 0.0);
    CHECK(report.grand_mean == doctest::Approx(0.5).epsilon(1e-15));
    // Class 1 was never scored for subject b (absent from both) and vice versa.
    CHECK(report.per_class.size() == 3);

    SUBCASE("csv and json emission") {
        const std::string csv = "/tmp/bp_dice.csv", js = "/tmp/bp_dice.json";
        report.write_csv(csv);
        report.write_json(js);
        std::ifstream in(csv);
        std::string header;
        std::getline(in, header);
        CHECK(header == "subject,class,dice");
        nlohmann::json j;
        std::ifstream(js) >> j;
        CHECK(j.at("grand_mean").get<double>() == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(j.at("per_subject_mean").contains("a"));
    }
}

TEST_CASE("mean dice input validation") {
    auto x = torch::zeros({4, 4, 4}, torch::kInt64);
    CHECK_THROWS_AS(mean_dice({x}, {x, x}, 3, {"a"}), DataError);
    CHECK_THROWS_AS(mean_dice({}, {}, 3, {}), DataError);
    CHECK_THROWS_AS(mean_dice({x}, {x}, 1, {"a"}), ConfigError);
    auto y = torch::zeros({4, 4, 5}, torch::kInt64);
    try {
        mean_dice({x}, {y}, 3, {"subj7"});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("subj7") != std::string::npos);
    }
    auto big = torch::full({4, 4, 4}, 9, torch::kInt64);
    CHECK_THROWS_AS(mean_dice({big}, {x}, 3, {"a"}), DataError);
}
