#include "brainparc/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "brainparc/errors.hpp"
#include "brainparc/sha256.hpp"

namespace brainparc {

namespace fs = std::filesystem;
using nlohmann::json;

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw ConfigError("lr_at step must be >= 0, got " + std::to_string(step));
    const auto w = static_cast<double>(cfg.warmup_steps);
    if (step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step + 1) / w;
    return cfg.base_lr *
           std::pow(cfg.decay_gamma, static_cast<double>(step - cfg.warmup_steps) / w);
}

void configure_determinism(bool on) {
    if (on) {
        at::set_num_threads(1);
        at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/false);
    } else {
        at::globalContext().setDeterministicAlgorithms(false, /*warn_only=*/false);
    }
}

std::vector<VolumeBundle> load_dataset(const DataConfig& data,
                                       const std::vector<std::string>& ids) {
    std::vector<VolumeBundle> vols;
    vols.reserve(ids.size());
    for (const auto& id : ids) {
        auto vol = load_volume_bundle((fs::path(data.data_dir) / id).string());
        if (!data.crop.empty()) {
            if (data.crop.size() != 3)
                throw ConfigError("crop must have exactly 3 entries, got " +
                                  std::to_string(data.crop.size()));
            vol = center_crop(vol, {data.crop[0], data.crop[1], data.crop[2]});
        }
        vols.push_back(normalize(vol));
    }
    return vols;
}

namespace {

struct Item {
    size_t vol = 0;
    int64_t center = 0;
};

std::vector<Item> enumerate_items(const std::vector<VolumeBundle>& vols, int64_t axis) {
    std::vector<Item> items;
    for (size_t v = 0; v < vols.size(); ++v) {
        const int64_t extent = vols[v].dims()[static_cast<size_t>(axis)];
        for (int64_t c = 0; c < extent; ++c) items.push_back({v, c});
    }
    return items;
}

Batch assemble_batch(const std::vector<VolumeBundle>& vols, const std::vector<Item>& items,
                     int64_t axis, std::mt19937_64* aug_rng, const AugmentParams& params) {
    std::vector<torch::Tensor> slices, labels, edges;
    Batch batch;
    for (const auto& item : items) {
        auto slab = extract_slab(vols[item.vol], axis, item.center);
        if (aug_rng) slab = augment(slab, *aug_rng, params);
        slices.push_back(slab.slices);
        labels.push_back(slab.center_labels);
        edges.push_back(slab.center_edge);
        batch.subjects.push_back(slab.subject_id);
        batch.centers.push_back(slab.center_index);
    }
    batch.slices = torch::stack(slices, 0);
    batch.labels = torch::stack(labels, 0);
    batch.edge = torch::stack(edges, 0);
    return batch;
}

torch::optim::Adam make_optimizer(ParcModel& model, const TrainConfig& cfg) {
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(model->adaptation_parameters(),
                        std::make_unique<torch::optim::AdamOptions>(cfg.base_lr));
    if (model->spec.encoder.train_base)
        groups.emplace_back(
            model->base_parameters(),
            std::make_unique<torch::optim::AdamOptions>(cfg.base_lr * cfg.base_lr_scale));
    return torch::optim::Adam(groups, torch::optim::AdamOptions(cfg.base_lr));
}

void set_group_lrs(torch::optim::Adam& opt, const TrainConfig& cfg, int64_t step) {
    const double lr = lr_at(step, cfg);
    auto& groups = opt.param_groups();
    static_cast<torch::optim::AdamOptions&>(groups[0].options()).lr(lr);
    if (groups.size() > 1)
        static_cast<torch::optim::AdamOptions&>(groups[1].options())
            .lr(lr * cfg.base_lr_scale);
}

HybridLoss batch_loss(ParcModel& model, const Batch& batch, const LossConfig& loss_cfg) {
    auto out = model->forward(batch.slices);
    std::optional<torch::Tensor> edge_map, edge_target;
    if (out.edge_map.has_value()) {
        edge_map = out.edge_map;
        edge_target = batch.edge;
    }
    return hybrid_loss(out.logits, batch.labels, edge_map, edge_target, loss_cfg);
}

[[noreturn]] void abort_non_finite(const Batch& batch, int64_t step) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " on batch [";
    for (size_t i = 0; i < batch.subjects.size(); ++i) {
        if (i) msg << ", ";
        msg << batch.subjects[i] << ":" << batch.centers[i];
    }
    msg << "]";
    throw DataError(msg.str());
}

} // namespace

torch::Tensor infer_volume(ParcModel& model, const VolumeBundle& vol, int64_t axis) {
    vol.validate();
    if (axis < 0 || axis > 2)
        throw ConfigError("inference axis must be 0, 1, or 2, got " + std::to_string(axis));

    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard no_grad;

    const int64_t extent = vol.dims()[static_cast<size_t>(axis)];
    auto pred = torch::zeros({vol.dims()[0], vol.dims()[1], vol.dims()[2]}, torch::kInt64);

    const int64_t chunk = 8;
    for (int64_t start = 0; start < extent; start += chunk) {
        const int64_t stop = std::min<int64_t>(start + chunk, extent);
        std::vector<torch::Tensor> slices;
        for (int64_t c = start; c < stop; ++c)
            slices.push_back(extract_slab(vol, axis, c).slices);
        auto out = model->forward(torch::stack(slices, 0));
        auto hard = out.logits.argmax(1); // (B,H,W)
        for (int64_t c = start; c < stop; ++c)
            pred.select(axis, c).copy_(hard[c - start]);
    }

    if (was_training) model->train();
    return pred;
}

DiceReport evaluate_volumes(ParcModel& model, const std::vector<VolumeBundle>& vols,
                            int64_t axis) {
    std::vector<torch::Tensor> preds, gts;
    std::vector<std::string> subjects;
    for (const auto& vol : vols) {
        preds.push_back(infer_volume(model, vol, axis));
        gts.push_back(vol.labels);
        subjects.push_back(vol.subject_id);
    }
    return mean_dice(preds, gts, model->spec.decoder.num_classes, subjects);
}

RunRecord train_model(ParcModel& model, const std::vector<VolumeBundle>& train_vols,
                      const std::vector<VolumeBundle>& val_vols, const TrainConfig& cfg,
                      const std::string& out_dir, bool deterministic) {
    cfg.validate();
    if (train_vols.empty()) throw DataError("training set is empty");
    const auto& eval_vols = val_vols.empty() ? train_vols : val_vols;

    const auto t0 = std::chrono::steady_clock::now();
    auto opt = make_optimizer(model, cfg);
    model->train();

    RunRecord rec;
    rec.config_hash = model->spec.config_hash();
    rec.seed = static_cast<uint64_t>(cfg.seed);
    rec.deterministic = deterministic;

    auto items = enumerate_items(train_vols, cfg.axis);
    std::string order_log;
    int64_t step = 0;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 order_rng(static_cast<uint64_t>(cfg.seed) * 1000003u +
                                  static_cast<uint64_t>(epoch));
        for (size_t i = items.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(order_rng() % (i + 1));
            std::swap(items[i], items[j]);
        }
        std::mt19937_64 aug_rng(static_cast<uint64_t>(cfg.seed) ^
                                (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(epoch + 1)));

        double sum_total = 0, sum_ce = 0, sum_dice = 0, sum_edge = 0;
        int64_t batches = 0;
        double last_lr = 0;

        for (size_t pos = 0; pos < items.size(); pos += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(items.size(), pos + static_cast<size_t>(cfg.batch_size));
            std::vector<Item> chunk(items.begin() + static_cast<int64_t>(pos),
                                    items.begin() + static_cast<int64_t>(stop));
            auto batch = assemble_batch(train_vols, chunk, cfg.axis, &aug_rng, cfg.augment);
            for (size_t i = 0; i < batch.subjects.size(); ++i)
                order_log += batch.subjects[i] + ":" + std::to_string(batch.centers[i]) + ";";

            set_group_lrs(opt, cfg, step);
            last_lr = lr_at(step, cfg);
            opt.zero_grad();
            auto loss = batch_loss(model, batch, cfg.loss);
            const double total = loss.total.item<double>();
            if (!std::isfinite(total)) abort_non_finite(batch, step);
            loss.total.backward();
            opt.step();

            sum_total += total;
            sum_ce += loss.components.at("ce");
            sum_dice += loss.components.at("dice");
            sum_edge += loss.components.count("edge") ? loss.components.at("edge") : 0.0;
            ++batches;
            ++step;
        }

        rec.train_loss.push_back(sum_total / static_cast<double>(batches));
        rec.train_ce.push_back(sum_ce / static_cast<double>(batches));
        rec.train_dice.push_back(sum_dice / static_cast<double>(batches));
        rec.train_edge.push_back(sum_edge / static_cast<double>(batches));
        rec.lr.push_back(last_lr);

        auto report = evaluate_volumes(model, eval_vols, cfg.axis);
        rec.val_dice.push_back(report.grand_mean);
        model->train();

        if (!out_dir.empty()) save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "last").string());
        if (rec.best_epoch < 0 || report.grand_mean > rec.best_val_dice) {
            rec.best_epoch = epoch;
            rec.best_val_dice = report.grand_mean;
            if (!out_dir.empty())
                save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "best").string());
        }
    }

    rec.steps = step;
    rec.final_val_dice = rec.val_dice.empty() ? 0.0 : rec.val_dice.back();
    rec.data_order_digest = sha256_hex(order_log.data(), order_log.size());
    if (!deterministic) {
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    if (!out_dir.empty()) rec.write(out_dir);
    return rec;
}

std::vector<double> overfit_batch(ParcModel& model, const Batch& batch, const TrainConfig& cfg,
                                  int64_t steps) {
    auto opt = make_optimizer(model, cfg);
    model->train();
    std::vector<double> trace;
    trace.reserve(static_cast<size_t>(steps));
    for (int64_t step = 0; step < steps; ++step) {
        set_group_lrs(opt, cfg, step);
        opt.zero_grad();
        auto loss = batch_loss(model, batch, cfg.loss);
        const double total = loss.total.item<double>();
        if (!std::isfinite(total)) abort_non_finite(batch, step);
        loss.total.backward();
        opt.step();
        trace.push_back(total);
    }
    return trace;
}

void RunRecord::write(const std::string& out_dir) const {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());

    {
        std::ofstream csv(fs::path(out_dir) / "metrics.csv");
        if (!csv) throw IoError("cannot open for write: " + out_dir + "/metrics.csv");
        csv << "epoch,loss_total,loss_ce,loss_dice,loss_edge,val_dice,lr\n";
        csv.precision(12);
        for (size_t e = 0; e < train_loss.size(); ++e)
            csv << e << "," << train_loss[e] << "," << train_ce[e] << "," << train_dice[e]
                << "," << train_edge[e] << "," << val_dice[e] << "," << lr[e] << "\n";
        if (!csv) throw IoError("write failed: " + out_dir + "/metrics.csv");
    }

    json j;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["deterministic"] = deterministic;
    j["epochs_completed"] = train_loss.size();
    j["steps"] = steps;
    j["best_epoch"] = best_epoch;
    j["best_val_dice"] = best_val_dice;
    j["final_val_dice"] = final_val_dice;
    j["data_order_digest"] = data_order_digest;
    if (!deterministic) j["wall_seconds"] = wall_seconds;
    std::ofstream out(fs::path(out_dir) / "run.json");
    if (!out) throw IoError("cannot open for write: " + out_dir + "/run.json");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + out_dir + "/run.json");
}

std::vector<AblationRow> run_ablation_suite(const std::vector<VolumeBundle>& train_vols,
                                            const std::vector<VolumeBundle>& test_vols,
                                            const RunSpec& base_spec,
                                            const std::string& out_dir, bool deterministic) {
    struct Variant {
        const char* name;
        AblationSwitches switches;
    };
    const std::vector<Variant> variants = {
        {"full", {true, true, true, true}},
        {"no_unet_skips", {false, true, true, true}},
        {"no_aspp", {true, false, true, true}},
        {"no_csa", {true, true, false, true}},
        {"no_br", {true, true, true, false}},
    };

    std::vector<AblationRow> rows;
    for (const auto& variant : variants) {
        RunSpec spec = base_spec;
        spec.train.switches = variant.switches;
        spec.finalize();

        torch::manual_seed(static_cast<uint64_t>(spec.train.seed));
        ParcModel model(spec);
        const std::string variant_dir =
            out_dir.empty() ? std::string{} : (fs::path(out_dir) / variant.name).string();
        auto rec =
            train_model(model, train_vols, /*val_vols=*/{}, spec.train, variant_dir,
                        deterministic);

        auto report = evaluate_volumes(model, test_vols.empty() ? train_vols : test_vols,
                                       spec.train.axis);
        rows.push_back({variant.name, report.grand_mean, rec.best_val_dice});
    }

    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());
        std::ofstream csv(fs::path(out_dir) / "ablation.csv");
        if (!csv) throw IoError("cannot open for write: " + out_dir + "/ablation.csv");
        csv << "variant,test_dice,best_val_dice\n";
        csv.precision(12);
        for (const auto& row : rows)
            csv << row.variant << "," << row.test_dice << "," << row.best_val_dice << "\n";
        if (!csv) throw IoError("write failed: " + out_dir + "/ablation.csv");

        json j = json::array();
        for (const auto& row : rows)
            j.push_back({{"variant", row.variant},
                         {"test_dice", row.test_dice},
                         {"best_val_dice", row.best_val_dice}});
        std::ofstream jf(fs::path(out_dir) / "ablation.json");
        if (!jf) throw IoError("cannot open for write: " + out_dir + "/ablation.json");
        jf << j.dump(2) << "\n";
        if (!jf) throw IoError("write failed: " + out_dir + "/ablation.json");
    }
    return rows;
}

} // namespace brainparc
