#include <CLI11.hpp>

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "brainparc/config.hpp"
#include "brainparc/data.hpp"
#include "brainparc/errors.hpp"
#include "brainparc/model.hpp"
#include "brainparc/overlay.hpp"
#include "brainparc/trainer.hpp"
#include "brainparc/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace brainparc;

namespace {

// Deferred flag application so precedence is defaults < config file < flags.
struct SpecBinder {
    std::vector<std::pair<CLI::Option*, std::function<void(RunSpec&)>>> appliers;

    template <typename T>
    void add(CLI::App* cmd, const std::string& flag, T default_value,
             std::function<void(RunSpec&, const T&)> setter, const std::string& desc) {
        auto holder = std::make_shared<T>(std::move(default_value));
        auto* opt = cmd->add_option(flag, *holder, desc)->capture_default_str();
        appliers.emplace_back(opt, [holder, setter](RunSpec& s) { setter(s, *holder); });
    }

    void apply(RunSpec& spec) const {
        for (const auto& [opt, fn] : appliers)
            if (opt->count() > 0) fn(spec);
    }
};

void add_spec_flags(CLI::App* cmd, SpecBinder& b) {
    const RunSpec d; // built-in defaults, shown in --help
    using S = RunSpec;

#define BIND(flag, type, expr, desc) \
    b.add<type>(cmd, flag, d.expr, [](S& s, const type& v) { s.expr = v; }, desc)

    BIND("--encoder.embed_dim", int64_t, encoder.embed_dim, "token embedding width");
    BIND("--encoder.num_blocks", int64_t, encoder.num_blocks,
         "transformer depth (even; long skips pair block i with N+1-i)");
    BIND("--encoder.num_heads", int64_t, encoder.num_heads, "attention heads");
    BIND("--encoder.patch_size", int64_t, encoder.patch_size, "square patch edge in pixels");
    BIND("--encoder.slab_depth", int64_t, encoder.slab_depth, "slices per input slab");
    BIND("--encoder.adapter_bottleneck", int64_t, encoder.adapter_bottleneck,
         "3D-adapter bottleneck width");
    BIND("--encoder.lora_rank", int64_t, encoder.lora_rank, "low-rank update rank (0 = off)");
    BIND("--encoder.lora_scale", double, encoder.lora_scale, "low-rank update scale");
    BIND("--encoder.lora_targets", std::string, encoder.lora_targets,
         "projections carrying low-rank updates, subset of qkvo");
    BIND("--encoder.input_h", int64_t, encoder.input_h, "slice height fed to the encoder");
    BIND("--encoder.input_w", int64_t, encoder.input_w, "slice width fed to the encoder");
    BIND("--encoder.mlp_ratio", int64_t, encoder.mlp_ratio, "MLP hidden/embed ratio");
    BIND("--encoder.train_base", bool, encoder.train_base,
         "unfreeze the backbone weights (true/false)");
    BIND("--encoder.fuse_norm", bool, encoder.fuse_norm,
         "layer-norm after skip fusion (true/false)");

    BIND("--decoder.in_channels", int64_t, decoder.in_channels,
         "decoder input channels (tied to embed_dim)");
    BIND("--decoder.aspp_channels", int64_t, decoder.aspp_channels, "decoder working width");
    BIND("--decoder.dilation_rates", std::vector<int64_t>, decoder.dilation_rates,
         "ASPP dilation rates");
    BIND("--decoder.num_classes", int64_t, decoder.num_classes,
         "label classes including background");
    BIND("--decoder.spatial_kernel", int64_t, decoder.spatial_kernel,
         "spatial-attention kernel (odd)");
    BIND("--decoder.reduction", int64_t, decoder.reduction,
         "channel-attention bottleneck ratio");
    BIND("--decoder.gn_groups", int64_t, decoder.gn_groups, "group-norm groups");
    BIND("--decoder.upsample_factor", int64_t, decoder.upsample_factor,
         "logit upsampling factor (tied to patch_size)");
    BIND("--decoder.deconv_upsample", bool, decoder.deconv_upsample,
         "transposed conv instead of bilinear upsampling (true/false)");

    BIND("--train.base_lr", double, train.base_lr, "peak learning rate");
    BIND("--train.base_lr_scale", double, train.base_lr_scale,
         "lr multiplier for unfrozen backbone params");
    BIND("--train.warmup_steps", int64_t, train.warmup_steps, "linear warmup steps");
    BIND("--train.decay_gamma", double, train.decay_gamma, "exponential decay base");
    BIND("--train.batch_size", int64_t, train.batch_size, "slabs per step");
    BIND("--train.epochs", int64_t, train.epochs, "sweeps over the training slices");
    BIND("--train.seed", int64_t, train.seed, "run seed");
    BIND("--train.val_fraction", double, train.val_fraction,
         "share of train subjects held out for validation");
    BIND("--train.axis", int, train.axis, "slab sweep axis, 0 = sagittal");
    BIND("--train.switches.use_unet_skips", bool, train.switches.use_unet_skips,
         "encoder long skips on/off (true/false)");
    BIND("--train.switches.use_aspp", bool, train.switches.use_aspp,
         "dual-ASPP stage on/off (true/false)");
    BIND("--train.switches.use_csa", bool, train.switches.use_csa,
         "channel+spatial attention stage on/off (true/false)");
    BIND("--train.switches.use_br", bool, train.switches.use_br,
         "boundary-refinement stage on/off (true/false)");
    BIND("--train.loss.alpha", double, train.loss.alpha, "cross-entropy weight");
    BIND("--train.loss.beta", double, train.loss.beta, "soft-Dice weight");
    BIND("--train.loss.edge_weight", double, train.loss.edge_weight, "edge-BCE weight");
    BIND("--train.loss.smooth_eps", double, train.loss.smooth_eps, "Dice smoothing epsilon");
    BIND("--train.loss.include_background_in_dice", bool,
         train.loss.include_background_in_dice, "score class 0 in soft Dice (true/false)");
    BIND("--train.augment.flip_lr_prob", double, train.augment.flip_lr_prob,
         "left-right flip probability");
    BIND("--train.augment.flip_ud_prob", double, train.augment.flip_ud_prob,
         "up-down flip probability");
    BIND("--train.augment.noise_sigma", double, train.augment.noise_sigma,
         "Gaussian intensity noise sigma");

    BIND("--data.data_dir", std::string, data.data_dir,
         "dataset root holding bundle dirs + split.json");
    BIND("--data.crop", std::vector<int64_t>, data.crop,
         "center-crop target dims X Y Z (empty = no crop)");
#undef BIND
}

struct GlobalArgs {
    std::string config_path;
    int64_t seed = 42;
    std::string out_dir;
    bool deterministic = false;
    CLI::Option* seed_opt = nullptr;
};

RunSpec build_spec(const GlobalArgs& g, const SpecBinder& binder) {
    RunSpec spec;
    if (!g.config_path.empty()) spec = load_run_spec(g.config_path);
    if (g.seed_opt != nullptr && g.seed_opt->count() > 0) spec.train.seed = g.seed;
    binder.apply(spec);
    spec.finalize();
    return spec;
}

void require_data_dir(const RunSpec& spec) {
    if (spec.data.data_dir.empty())
        throw ConfigError("data.data_dir is required (set --data.data_dir or the config file)");
}

std::vector<std::string> split_ids(const SplitManifest& split, const std::string& which) {
    if (which == "train") return split.train_ids;
    if (which == "test") return split.test_ids;
    std::vector<std::string> all = split.train_ids;
    all.insert(all.end(), split.test_ids.begin(), split.test_ids.end());
    return all;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

int cmd_generate(const GlobalArgs& g, int64_t count, const std::vector<int64_t>& dims,
                 int64_t classes, double train_fraction) {
    std::error_code ec;
    fs::create_directories(g.out_dir, ec);
    if (ec) throw IoError("cannot create output dir " + g.out_dir + ": " + ec.message());

    std::vector<std::string> ids;
    for (int64_t i = 0; i < count; ++i) {
        auto vol = make_phantom(static_cast<uint64_t>(g.seed + i),
                                {dims[0], dims[1], dims[2]}, classes);
        save_volume_bundle(vol, (fs::path(g.out_dir) / vol.subject_id).string());
        ids.push_back(vol.subject_id);
    }
    auto split = make_split(ids, train_fraction, static_cast<uint64_t>(g.seed));
    split.save((fs::path(g.out_dir) / "split.json").string());

    json j{{"out", g.out_dir},
           {"count", count},
           {"train", split.train_ids.size()},
           {"test", split.test_ids.size()}};
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_train(const GlobalArgs& g, const SpecBinder& binder) {
    auto spec = build_spec(g, binder);
    require_data_dir(spec);
    if (g.deterministic) configure_determinism(true);

    auto split = SplitManifest::load((fs::path(spec.data.data_dir) / "split.json").string());
    auto train_ids = split.train_ids;
    std::vector<std::string> val_ids;
    if (spec.train.val_fraction > 0.0 && train_ids.size() >= 2) {
        auto holdout = make_split(train_ids, 1.0 - spec.train.val_fraction,
                                  static_cast<uint64_t>(spec.train.seed));
        train_ids = holdout.train_ids;
        val_ids = holdout.test_ids;
    }
    auto train_vols = load_dataset(spec.data, train_ids);
    auto val_vols = load_dataset(spec.data, val_ids);

    torch::manual_seed(static_cast<uint64_t>(spec.train.seed));
    ParcModel model(spec);
    auto rec = train_model(model, train_vols, val_vols, spec.train, g.out_dir, g.deterministic);
    write_text((fs::path(g.out_dir) / "config.json").string(), to_json(spec).dump(2) + "\n");

    json j{{"steps", rec.steps},
           {"best_epoch", rec.best_epoch},
           {"best_val_dice", rec.best_val_dice},
           {"final_val_dice", rec.final_val_dice},
           {"config_hash", rec.config_hash}};
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_eval(const GlobalArgs& g, const SpecBinder& binder, const std::string& ckpt,
             const std::string& which_split) {
    auto cli_spec = build_spec(g, binder);
    require_data_dir(cli_spec);
    if (g.deterministic) configure_determinism(true);

    auto model_spec = checkpoint_spec(ckpt);
    torch::manual_seed(static_cast<uint64_t>(model_spec.train.seed));
    ParcModel model(model_spec);
    load_checkpoint(model, ckpt);

    auto split =
        SplitManifest::load((fs::path(cli_spec.data.data_dir) / "split.json").string());
    auto vols = load_dataset(cli_spec.data, split_ids(split, which_split));
    auto report = evaluate_volumes(model, vols, cli_spec.train.axis);

    std::error_code ec;
    fs::create_directories(g.out_dir, ec);
    if (ec) throw IoError("cannot create output dir " + g.out_dir + ": " + ec.message());
    report.write_csv((fs::path(g.out_dir) / "dice.csv").string());
    report.write_json((fs::path(g.out_dir) / "dice.json").string());

    json j{{"grand_mean", report.grand_mean}, {"subjects", report.subjects.size()},
           {"split", which_split}};
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_predict(const GlobalArgs& g, const SpecBinder& binder, const std::string& ckpt,
                const std::string& volume_dir, bool overlays, int64_t overlay_stride) {
    auto cli_spec = build_spec(g, binder);
    if (g.deterministic) configure_determinism(true);

    auto model_spec = checkpoint_spec(ckpt);
    torch::manual_seed(static_cast<uint64_t>(model_spec.train.seed));
    ParcModel model(model_spec);
    load_checkpoint(model, ckpt);

    auto vol = load_volume_bundle(volume_dir);
    if (!cli_spec.data.crop.empty()) {
        if (cli_spec.data.crop.size() != 3)
            throw ConfigError("crop must have exactly 3 entries, got " +
                              std::to_string(cli_spec.data.crop.size()));
        vol = center_crop(vol, {cli_spec.data.crop[0], cli_spec.data.crop[1],
                                cli_spec.data.crop[2]});
    }
    auto pred = infer_volume(model, normalize(vol), cli_spec.train.axis);

    VolumeBundle out_vol = vol;
    out_vol.labels = pred;
    out_vol.num_classes = model_spec.decoder.num_classes;
    out_vol.subject_id = vol.subject_id + "_pred";
    const auto bundle_dir = (fs::path(g.out_dir) / out_vol.subject_id).string();
    save_volume_bundle(out_vol, bundle_dir);

    json j{{"output", bundle_dir},
           {"dims", {vol.dims()[0], vol.dims()[1], vol.dims()[2]}}};
    if (overlays) {
        auto paths = save_prediction_overlays(vol, pred, cli_spec.train.axis,
                                              (fs::path(bundle_dir) / "overlays").string(),
                                              overlay_stride);
        j["overlays"] = paths.size();
    }
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_ablate(const GlobalArgs& g, const SpecBinder& binder) {
    auto spec = build_spec(g, binder);
    require_data_dir(spec);
    if (g.deterministic) configure_determinism(true);

    auto split = SplitManifest::load((fs::path(spec.data.data_dir) / "split.json").string());
    auto train_vols = load_dataset(spec.data, split.train_ids);
    auto test_vols = load_dataset(spec.data, split.test_ids);

    auto rows = run_ablation_suite(train_vols, test_vols, spec, g.out_dir, g.deterministic);
    json j = json::array();
    for (const auto& row : rows)
        j.push_back({{"variant", row.variant},
                     {"test_dice", row.test_dice},
                     {"best_val_dice", row.best_val_dice}});
    std::cout << j.dump() << "\n";
    return 0;
}

int emit_error(const char* kind, const std::string& message) {
    json j{{"error", message}, {"kind", kind}};
    std::cerr << j.dump() << "\n";
    return std::string(kind) == "usage" || std::string(kind) == "config" ? 2 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Slab-based brain parcellation: phantom generation, adapter fine-tuning, "
                 "evaluation, ablation, and inference"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run config (defaults < file < flags)");
    g.seed_opt = app.add_option("--seed", g.seed, "run seed")->capture_default_str();
    auto* out_opt = app.add_option("--out", g.out_dir, "output directory");
    app.add_flag("--deterministic", g.deterministic,
                 "single-thread, bit-reproducible artifacts");

    SpecBinder binder;

    auto* gen = app.add_subcommand("generate", "Write phantom volume bundles plus split.json");
    gen->fallthrough();
    int64_t count = 10, classes = 10;
    std::vector<int64_t> dims = {64, 64, 64};
    double train_fraction = 0.8;
    gen->add_option("--count", count, "number of phantoms (one bundle each)")
        ->capture_default_str()
        ->check(CLI::Range(static_cast<int64_t>(2), static_cast<int64_t>(1000000)));
    gen->add_option("--dims", dims, "volume dims X Y Z")
        ->expected(3)
        ->capture_default_str();
    gen->add_option("--classes", classes, "foreground region count")
        ->capture_default_str()
        ->check(CLI::Range(static_cast<int64_t>(1), static_cast<int64_t>(65534)));
    gen->add_option("--train-fraction", train_fraction, "share of subjects in the train split")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));

    auto* train = app.add_subcommand("train", "Fine-tune on the train split of a dataset");
    train->fallthrough();
    add_spec_flags(train, binder);

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
    eval->fallthrough();
    add_spec_flags(eval, binder);
    std::string eval_ckpt, eval_split = "test";
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval->add_option("--split", eval_split, "subjects to score")
        ->capture_default_str()
        ->check(CLI::IsMember({"train", "test", "all"}));

    auto* predict = app.add_subcommand("predict", "Segment one volume bundle");
    predict->fallthrough();
    add_spec_flags(predict, binder);
    std::string pred_ckpt, pred_volume;
    bool overlays = false;
    int64_t overlay_stride = 8;
    predict->add_option("--checkpoint", pred_ckpt, "checkpoint directory")->required();
    predict->add_option("--volume", pred_volume, "input volume bundle directory")->required();
    predict->add_flag("--overlays", overlays,
                      "write prediction-vs-truth slice PNGs along the sweep axis");
    predict->add_option("--overlay-stride", overlay_stride, "sample every Nth slice")
        ->capture_default_str()
        ->check(CLI::Range(static_cast<int64_t>(1), static_cast<int64_t>(1 << 20)));

    auto* ablate = app.add_subcommand("ablate", "Train the full model and the four ablations");
    ablate->fallthrough();
    add_spec_flags(ablate, binder);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        json j{{"error", e.what()}, {"kind", "usage"}};
        std::cerr << j.dump() << "\n";
        return 2;
    }

    try {
        if (g.out_dir.empty())
            throw ConfigError("--out is required");
        (void)out_opt;
        if (gen->parsed()) return cmd_generate(g, count, dims, classes, train_fraction);
        if (train->parsed()) return cmd_train(g, binder);
        if (eval->parsed()) return cmd_eval(g, binder, eval_ckpt, eval_split);
        if (predict->parsed())
            return cmd_predict(g, binder, pred_ckpt, pred_volume, overlays, overlay_stride);
        if (ablate->parsed()) return cmd_ablate(g, binder);
        return emit_error("usage", "no subcommand given");
    } catch (const ConfigError& e) {
        return emit_error("config", e.what());
    } catch (const WiringError& e) {
        return emit_error("wiring", e.what());
    } catch (const DataError& e) {
        return emit_error("data", e.what());
    } catch (const IoError& e) {
        return emit_error("io", e.what());
    } catch (const std::exception& e) {
        return emit_error("internal", e.what());
    }
}
