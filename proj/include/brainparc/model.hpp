#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "brainparc/config.hpp"
#include "brainparc/decoder.hpp"
#include "brainparc/encoder.hpp"

namespace brainparc {

struct ModelOut {
    torch::Tensor logits;                  // (B,K,H,W)
    torch::Tensor logits_coarse;           // (B,K,h,w)
    std::optional<torch::Tensor> edge_map; // (B,1,h,w) when BR is wired
};

// Full pipeline: slab ViT encoder -> multi-scale attention decoder, wired per
// the run config's ablation switches.
class ParcModelImpl : public torch::nn::Module {
public:
    explicit ParcModelImpl(const RunSpec& spec);
    ModelOut forward(const torch::Tensor& slab); // (B,D,H,W)

    // Sorted (parameter name, shape) pairs: the checkpoint/ablation manifest.
    std::vector<std::pair<std::string, std::vector<int64_t>>> manifest() const;

    // Optimizer partition. Adaptation params (LoRA factors, adapters, skip
    // fusion, slice embedding, decoder) always train; base backbone params
    // train only when encoder.train_base is set.
    std::vector<torch::Tensor> adaptation_parameters() const;
    std::vector<torch::Tensor> base_parameters() const;
    static bool is_adaptation_param(const std::string& name);

    RunSpec spec;
    SlabViTEncoder encoder{nullptr};
    AttentionDecoder decoder{nullptr};
};
TORCH_MODULE(ParcModel);

// Checkpoint directory layout: manifest.json (format version, config, tensor
// index) + params.raw (concatenated little-endian float32 payloads).
void save_checkpoint(const ParcModel& model, const std::string& dir);

// Strict load: the parameter sets of model and checkpoint must match exactly.
void load_checkpoint(ParcModel& model, const std::string& dir);

// Weight-import hook: copies every tensor whose name and shape match; returns
// (copied, skipped) counts.
std::pair<int64_t, int64_t> load_matching(ParcModel& model, const std::string& dir);

// Reads back the RunSpec stored in a checkpoint manifest.
RunSpec checkpoint_spec(const std::string& dir);

// Copies parameters with matching name and shape from src to dst (test helper
// and in-process twin of load_matching). Returns the number copied.
int64_t copy_matching_params(const torch::nn::Module& src, torch::nn::Module& dst);

} // namespace brainparc
