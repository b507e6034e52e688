#include "brainparc/losses.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "brainparc/errors.hpp"

namespace brainparc {

namespace {

// Validates logits/labels shapes and label range; names the first offending
// voxel so data bugs are traceable to a location.
void check_logits_labels(const torch::Tensor& logits, const torch::Tensor& labels) {
    if (logits.dim() != 4)
        throw DataError("logits must be (B,K,H,W), got " + std::to_string(logits.dim()) +
                        " dims");
    if (labels.dim() != 3)
        throw DataError("labels must be (B,H,W), got " + std::to_string(labels.dim()) + " dims");
    if (labels.scalar_type() != torch::kInt64)
        throw DataError("labels must be int64");
    if (logits.size(0) != labels.size(0) || logits.size(2) != labels.size(1) ||
        logits.size(3) != labels.size(2))
        throw DataError("logits/labels shape mismatch");

    const int64_t k = logits.size(1);
    auto bad = labels.lt(0).logical_or_(labels.ge(k));
    if (bad.any().item<bool>()) {
        auto pos = bad.reshape({-1}).nonzero();
        const int64_t p = pos[0].item<int64_t>();
        const int64_t h = labels.size(1), w = labels.size(2);
        const int64_t b = p / (h * w), y = (p / w) % h, x = p % w;
        const int64_t v = labels.reshape({-1})[p].item<int64_t>();
        throw DataError("label " + std::to_string(v) + " at voxel (b=" + std::to_string(b) +
                        ", y=" + std::to_string(y) + ", x=" + std::to_string(x) +
                        ") outside [0, " + std::to_string(k) + ")");
    }
}

} // namespace

torch::Tensor pixelwise_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels) {
    check_logits_labels(logits, labels);
    auto log_probs = torch::log_softmax(logits, 1);
    auto picked = log_probs.gather(1, labels.unsqueeze(1)); // (B,1,H,W)
    return -picked.mean();
}

torch::Tensor soft_dice_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                             const LossConfig& cfg) {
    check_logits_labels(logits, labels);
    const int64_t k = logits.size(1);

    auto probs = torch::softmax(logits, 1);
    auto onehot =
        torch::one_hot(labels, k).permute({0, 3, 1, 2}).to(probs.scalar_type()); // (B,K,H,W)

    auto inter = (probs * onehot).sum({0, 2, 3}); // (K)
    auto p_sum = probs.sum({0, 2, 3});
    auto g_sum = onehot.sum({0, 2, 3});
    auto dice = (2.0 * inter + cfg.smooth_eps) / (p_sum + g_sum + cfg.smooth_eps);

    // A class counts when the truth contains it or the hard prediction claims
    // it — mirroring the exclusion rule of the hard evaluation metric.
    auto gt_counts = torch::bincount(labels.reshape({-1}), {}, k);
    auto pred_counts = torch::bincount(logits.argmax(1).reshape({-1}), {}, k);
    auto present = gt_counts.gt(0).logical_or(pred_counts.gt(0));
    if (!cfg.include_background_in_dice && k > 0) present[0] = false;

    if (!present.any().item<bool>())
        return torch::zeros({}, probs.options()) * probs.sum(); // degenerate: all perfect

    auto mean_dice = dice.masked_select(present).mean();
    return 1.0 - mean_dice;
}

HybridLoss hybrid_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                       const std::optional<torch::Tensor>& edge_map,
                       const std::optional<torch::Tensor>& edge_target, const LossConfig& cfg) {
    if (edge_map.has_value() != edge_target.has_value())
        throw WiringError("edge_map and edge_target must be passed together or not at all");

    HybridLoss out;
    auto ce = pixelwise_cross_entropy(logits, labels);
    auto dice = soft_dice_loss(logits, labels, cfg);
    // Accumulate in float64 so total recombines exactly from the reported
    // component values.
    out.total = cfg.alpha * ce.to(torch::kFloat64) + cfg.beta * dice.to(torch::kFloat64);
    out.components["ce"] = ce.item<double>();
    out.components["dice"] = dice.item<double>();

    if (edge_map.has_value()) {
        auto map = edge_map.value();
        if (map.dim() != 4 || map.size(1) != 1)
            throw DataError("edge_map must be (B,1,h,w)");
        auto target = edge_target.value().to(map.scalar_type());
        if (target.size(-2) != map.size(-2) || target.size(-1) != map.size(-1))
            target = downsample_edge_target(target, map.size(-2), map.size(-1));
        auto bce = torch::binary_cross_entropy(map, target);
        out.total = out.total + cfg.edge_weight * bce.to(torch::kFloat64);
        out.components["edge"] = bce.item<double>();
    }
    return out;
}

torch::Tensor edge_target_from_labels(const torch::Tensor& labels) {
    if (labels.dim() != 3) throw DataError("labels must be (B,H,W)");
    const int64_t h = labels.size(1), w = labels.size(2);
    auto edge = torch::zeros_like(labels, torch::kBool);

    auto dv = labels.slice(1, 0, h - 1).ne(labels.slice(1, 1, h));
    edge.slice(1, 0, h - 1).logical_or_(dv);
    edge.slice(1, 1, h).logical_or_(dv);

    auto dh = labels.slice(2, 0, w - 1).ne(labels.slice(2, 1, w));
    edge.slice(2, 0, w - 1).logical_or_(dh);
    edge.slice(2, 1, w).logical_or_(dh);

    return edge.unsqueeze(1).to(torch::kFloat32);
}

torch::Tensor downsample_edge_target(const torch::Tensor& target, int64_t h, int64_t w) {
    if (target.dim() != 4) throw DataError("edge target must be (B,1,H,W)");
    if (target.size(-2) == h && target.size(-1) == w) return target;
    return std::get<0>(torch::adaptive_max_pool2d(target, {h, w}));
}

DiceReport mean_dice(const std::vector<torch::Tensor>& pred_labels,
                     const std::vector<torch::Tensor>& gt_labels, int64_t num_classes,
                     const std::vector<std::string>& subjects) {
    if (pred_labels.size() != gt_labels.size())
        throw DataError("prediction/truth subject counts differ: " +
                        std::to_string(pred_labels.size()) + " vs " +
                        std::to_string(gt_labels.size()));
    if (subjects.size() != pred_labels.size())
        throw DataError("subject id count does not match volume count");
    if (pred_labels.empty()) throw DataError("mean_dice needs at least one subject");
    if (num_classes < 2) throw ConfigError("mean_dice needs num_classes >= 2");

    DiceReport report;
    report.subjects = subjects;
    report.per_class.assign(static_cast<size_t>(num_classes), 1.0);
    std::vector<double> class_sum(static_cast<size_t>(num_classes), 0.0);
    std::vector<int64_t> class_n(static_cast<size_t>(num_classes), 0);

    for (size_t s = 0; s < pred_labels.size(); ++s) {
        auto pred = pred_labels[s].to(torch::kInt64).reshape({-1});
        auto gt = gt_labels[s].to(torch::kInt64).reshape({-1});
        if (pred.numel() != gt.numel() ||
            !pred_labels[s].sizes().equals(gt_labels[s].sizes()))
            throw DataError("prediction/truth shape mismatch for subject " + subjects[s]);
        for (const auto& [name, t] :
             std::vector<std::pair<const char*, torch::Tensor>>{{"prediction", pred},
                                                                {"truth", gt}}) {
            if (t.numel() > 0 &&
                (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= num_classes))
                throw DataError(std::string(name) + " labels outside [0, " +
                                std::to_string(num_classes) + ") for subject " + subjects[s]);
        }

        auto conf = torch::bincount(gt * num_classes + pred, {}, num_classes * num_classes)
                        .reshape({num_classes, num_classes})
                        .to(torch::kDouble);
        auto gt_count = conf.sum(1);
        auto pred_count = conf.sum(0);
        auto tp = conf.diagonal();

        double fg_sum = 0.0;
        int64_t fg_n = 0;
        for (int64_t c = 0; c < num_classes; ++c) {
            const double denom = gt_count[c].item<double>() + pred_count[c].item<double>();
            if (denom <= 0.0) continue; // absent from both: not scored
            const double d = 2.0 * tp[c].item<double>() / denom;
            report.entries.push_back({subjects[s], c, d});
            if (c > 0) {
                fg_sum += d;
                fg_n += 1;
                class_sum[static_cast<size_t>(c)] += d;
                class_n[static_cast<size_t>(c)] += 1;
            } else {
                class_sum[0] += d;
                class_n[0] += 1;
            }
        }
        report.per_subject_mean.push_back(fg_n > 0 ? fg_sum / static_cast<double>(fg_n) : 1.0);
    }

    for (int64_t c = 0; c < num_classes; ++c) {
        if (class_n[static_cast<size_t>(c)] > 0)
            report.per_class[static_cast<size_t>(c)] =
                class_sum[static_cast<size_t>(c)] / static_cast<double>(class_n[static_cast<size_t>(c)]);
    }
    double total = 0.0;
    for (double v : report.per_subject_mean) total += v;
    report.grand_mean = total / static_cast<double>(report.per_subject_mean.size());
    return report;
}

void DiceReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << "subject,class,dice\n";
    std::ostringstream row;
    row.precision(12);
    for (const auto& e : entries) {
        row.str("");
        row << e.subject << "," << e.cls << "," << e.dice << "\n";
        out << row.str();
    }
    if (!out) throw IoError("write failed: " + path);
}

void DiceReport::write_json(const std::string& path) const {
    nlohmann::json j;
    j["per_class"] = per_class;
    j["grand_mean"] = grand_mean;
    nlohmann::json per_subj = nlohmann::json::object();
    for (size_t s = 0; s < subjects.size(); ++s) per_subj[subjects[s]] = per_subject_mean[s];
    j["per_subject_mean"] = per_subj;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

} // namespace brainparc
