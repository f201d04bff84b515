#pragma once

#include <torch/torch.h>

#include "mvrefine/codec.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::adversary {

// Three stride-2 stages: logits are (H/8, W/8) patches with a ~15 px
// receptive field at the input.
class PatchDiscriminatorImpl : public torch::nn::Module {
public:
    explicit PatchDiscriminatorImpl(int base_width = 32);

    torch::Tensor forward(const torch::Tensor& images);  // (N,3,H,W) -> (N,1,H/8,W/8)

private:
    torch::nn::Conv2d c1_{nullptr}, c2_{nullptr}, c3_{nullptr}, head_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Pixels covered by one logit and logits touched by one pixel, from the
// stride/kernel arithmetic of the three conv stages.
struct ReceptiveField {
    int64_t lo = 0;
    int64_t hi = 0;  // inclusive
};
ReceptiveField logit_receptive_field(int64_t logit_index, int64_t input_size);
ReceptiveField logits_touched_by_pixel(int64_t pixel_index, int64_t logit_grid_size);

struct LossWeights {
    double recon = 1.0;
    double perceptual = 0.1;
    double gan = 0.05;

    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
};

struct LossReport {
    double recon_l2 = 0.0;
    double perceptual = 0.0;
    double gan_g = 0.0;
    double gan_d = 0.0;
    double total_g = 0.0;
};

struct GeneratorLoss {
    torch::Tensor total;  // differentiable
    LossReport report;
};

// Hinge objectives; refined/ground-truth stacks cover novel-view slots only.
GeneratorLoss generator_loss(const torch::Tensor& refined, const torch::Tensor& ground_truth,
                             PatchDiscriminator& disc, codec::LatentCodec& codec,
                             const LossWeights& weights);

torch::Tensor discriminator_loss(const torch::Tensor& refined, const torch::Tensor& ground_truth,
                                 PatchDiscriminator& disc);

// Shared feature-space distance: mean squared error over both codec encoder
// stages. Also the LPIPS-style proxy used by the metrics suite.
torch::Tensor feature_distance(const torch::Tensor& a, const torch::Tensor& b,
                               codec::LatentCodec& codec);

}  // namespace mvr::adversary
