#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>

#include "brainparc/config.hpp"
#include "brainparc/errors.hpp"

using namespace brainparc;
using nlohmann::json;

TEST_CASE("defaults form a valid spec") {
    RunSpec spec;
    CHECK_NOTHROW(spec.finalize());
    CHECK(spec.decoder.in_channels == spec.encoder.embed_dim);
    CHECK(spec.decoder.upsample_factor == spec.encoder.patch_size);
}

TEST_CASE("encoder validation") {
    EncoderConfig c;
    CHECK_NOTHROW(c.validate());

    SUBCASE("odd block count") {
        c.num_blocks = 7;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("heads must divide embed dim") {
        c.num_heads = 5;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("input must be patch-divisible") {
        c.input_h = 63;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("lora targets restricted to qkvo") {
        c.lora_targets = "qx";
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("rank zero is legal") {
        c.lora_rank = 0;
        CHECK_NOTHROW(c.validate());
    }
}

TEST_CASE("decoder validation") {
    DecoderConfig c;
    CHECK_NOTHROW(c.validate());

    SUBCASE("rates strictly increasing") {
        c.dilation_rates = {1, 6, 6};
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("at least two classes") {
        c.num_classes = 1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("spatial kernel odd") {
        c.spatial_kernel = 4;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("reduction divides width") {
        c.reduction = 7;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}

TEST_CASE("loss and train validation") {
    LossConfig loss;
    CHECK_NOTHROW(loss.validate());
    loss.alpha = 0;
    loss.beta = 0;
    CHECK_THROWS_AS(loss.validate(), ConfigError);

    TrainConfig train;
    CHECK_NOTHROW(train.validate());
    train.decay_gamma = 1.0;
    CHECK_THROWS_AS(train.validate(), ConfigError);
    train.decay_gamma = 0.9;
    train.axis = 3;
    CHECK_THROWS_AS(train.validate(), ConfigError);
}

TEST_CASE("unknown keys are rejected by name") {
    json j = {{"encoder", {{"embed_dims", 96}}}};
    try {
        parse_run_spec(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("embed_dims") != std::string::npos);
    }

    json top = {{"encodr", json::object()}};
    CHECK_THROWS_AS(parse_run_spec(top), ConfigError);
}

TEST_CASE("parse round-trips through to_json") {
    RunSpec spec;
    spec.encoder.embed_dim = 48;
    spec.encoder.lora_targets = "qkv";
    spec.decoder.num_classes = 7;
    spec.train.loss.alpha = 0.3;
    spec.train.switches.use_csa = false;
    spec.data.data_dir = "/tmp/ds";
    spec.data.crop = {32, 32, 32};

    auto parsed = parse_run_spec(to_json(spec));
    CHECK(parsed.encoder.embed_dim == 48);
    CHECK(parsed.encoder.lora_targets == "qkv");
    CHECK(parsed.decoder.num_classes == 7);
    CHECK(parsed.train.loss.alpha == doctest::Approx(0.3));
    CHECK_FALSE(parsed.train.switches.use_csa);
    CHECK(parsed.data.data_dir == "/tmp/ds");
    CHECK(parsed.data.crop == std::vector<int64_t>{32, 32, 32});
    CHECK(parsed.config_hash() == spec.config_hash());
}

TEST_CASE("config hash tracks semantic content only") {
    RunSpec a, b;
    CHECK(a.config_hash() == b.config_hash());
    b.train.seed = 43;
    CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("load_run_spec reads files and rejects bad JSON") {
    const std::string good = "/tmp/brainparc_cfg_good.json";
    {
        std::ofstream out(good);
        out << R"({"train": {"epochs": 3}})";
    }
    auto spec = load_run_spec(good);
    CHECK(spec.train.epochs == 3);

    const std::string bad = "/tmp/brainparc_cfg_bad.json";
    {
        std::ofstream out(bad);
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_run_spec(bad), ConfigError);
    CHECK_THROWS_AS(load_run_spec("/tmp/does_not_exist_cfg.json"), IoError);
}
