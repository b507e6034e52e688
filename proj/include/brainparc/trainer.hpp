#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "brainparc/config.hpp"
#include "brainparc/data.hpp"
#include "brainparc/losses.hpp"
#include "brainparc/model.hpp"
#include "brainparc/volume.hpp"

namespace brainparc {

// Warm-up then exponential decay: step < W -> base*(step+1)/W, afterwards
// base * gamma^((step-W)/W). Continuous at the warmup boundary.
double lr_at(int64_t step, const TrainConfig& cfg);

// Single-thread + fixed algorithms so reruns with the same seed produce
// bit-identical artifacts.
void configure_determinism(bool on);

struct Batch {
    torch::Tensor slices; // (B,5,H,W) float32
    torch::Tensor labels; // (B,H,W) int64
    torch::Tensor edge;   // (B,1,H,W) float32
    std::vector<std::string> subjects;
    std::vector<int64_t> centers;
};

struct RunRecord {
    std::vector<double> train_loss, train_ce, train_dice, train_edge; // per epoch
    std::vector<double> val_dice;                                     // per epoch
    std::vector<double> lr;                                           // per epoch (last step)
    int64_t steps = 0;
    int64_t best_epoch = -1;
    double best_val_dice = 0.0;
    double final_val_dice = 0.0;
    std::string config_hash;
    uint64_t seed = 0;
    bool deterministic = false;
    double wall_seconds = 0.0;     // recorded only in non-deterministic runs
    std::string data_order_digest; // sha256 of the (subject, center) visit order

    void write(const std::string& out_dir) const; // run.json + metrics.csv
};

// Loads bundles <data_dir>/<id> for every id, applying the configured crop
// and per-volume normalization.
std::vector<VolumeBundle> load_dataset(const DataConfig& data,
                                       const std::vector<std::string>& ids);

// Adam training with the warmup/decay schedule, per-epoch validation by
// full-volume inference, and best/last checkpointing under
// <out_dir>/checkpoints/. Empty out_dir skips artifact emission. Falls back
// to validating on the train set when val_vols is empty.
RunRecord train_model(ParcModel& model, const std::vector<VolumeBundle>& train_vols,
                      const std::vector<VolumeBundle>& val_vols, const TrainConfig& cfg,
                      const std::string& out_dir, bool deterministic);

// Sweeps slab centers along `axis`, predicting every center slice; returns an
// int64 label volume aligned with the input dims.
torch::Tensor infer_volume(ParcModel& model, const VolumeBundle& vol, int64_t axis);

// infer_volume + mean_dice over a set of (normalized) volumes.
DiceReport evaluate_volumes(ParcModel& model, const std::vector<VolumeBundle>& vols,
                            int64_t axis);

// Fixed-batch optimization for overfit checks; returns the per-step total
// loss trace.
std::vector<double> overfit_batch(ParcModel& model, const Batch& batch, const TrainConfig& cfg,
                                  int64_t steps);

struct AblationRow {
    std::string variant;
    double test_dice = 0.0;
    double best_val_dice = 0.0;
};

// Trains the full model plus the four single-component ablations with shared
// seed and data order; evaluates each on the test set and writes
// ablation.csv/.json under out_dir.
std::vector<AblationRow> run_ablation_suite(const std::vector<VolumeBundle>& train_vols,
                                            const std::vector<VolumeBundle>& test_vols,
                                            const RunSpec& base_spec,
                                            const std::string& out_dir, bool deterministic);

} // namespace brainparc
