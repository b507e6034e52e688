#pragma once

#include <torch/torch.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "brainparc/config.hpp"

namespace brainparc {

// ---------------------------------------------------------------------------
// Training losses
// ---------------------------------------------------------------------------

// Mean over pixels of -log softmax probability of the true class.
// logits (B,K,H,W) float, labels (B,H,W) int64 in [0,K).
torch::Tensor pixelwise_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels);

// 1 - mean per-class soft Dice, d_c = (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps),
// accumulated batch-globally. Classes absent from both the ground truth and
// the hard prediction are treated as perfect and excluded from the mean;
// background participates only when cfg.include_background_in_dice is set.
torch::Tensor soft_dice_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                             const LossConfig& cfg);

struct HybridLoss {
    torch::Tensor total;                      // graph tensor, backward()-able
    std::map<std::string, double> components; // "ce", "dice", and "edge" when supervised
};

// total = alpha*CE + beta*Dice (+ edge_weight*BCE when both edge args given).
// Passing exactly one of edge_map / edge_target is a caller bug.
HybridLoss hybrid_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                       const std::optional<torch::Tensor>& edge_map,
                       const std::optional<torch::Tensor>& edge_target, const LossConfig& cfg);

// Supervision target for the auxiliary edge head: pixel is 1 iff any 4-neighbor
// carries a different label; border pixels compare in-bounds neighbors only.
// labels (B,H,W) int64 -> (B,1,H,W) float binary.
torch::Tensor edge_target_from_labels(const torch::Tensor& labels);

// Max-pool a binary edge target down to (h,w) so a boundary anywhere inside a
// pooling window marks the coarse cell.
torch::Tensor downsample_edge_target(const torch::Tensor& target, int64_t h, int64_t w);

// ---------------------------------------------------------------------------
// Evaluation metric
// ---------------------------------------------------------------------------

struct DiceReport {
    struct Entry {
        std::string subject;
        int64_t cls = 0;
        double dice = 0.0;
    };

    std::vector<std::string> subjects;
    std::vector<Entry> entries;            // one row per (subject, class) scored
    std::vector<double> per_class;         // size num_classes; classes never scored report 1.0
    std::vector<double> per_subject_mean;  // foreground mean per subject
    double grand_mean = 0.0;               // mean of per_subject_mean

    void write_csv(const std::string& path) const;
    void write_json(const std::string& path) const;
};

// Hard Dice on argmax label volumes, per subject and class. A class absent from
// both prediction and truth of a subject is excluded from that subject's mean;
// background (class 0) is scored in the rows but excluded from the means.
DiceReport mean_dice(const std::vector<torch::Tensor>& pred_labels,
                     const std::vector<torch::Tensor>& gt_labels, int64_t num_classes,
                     const std::vector<std::string>& subjects);

} // namespace brainparc
