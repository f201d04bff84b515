#include "mvrefine/adversary.hpp"

#include <algorithm>

#include "mvrefine/common.hpp"

namespace mvr::adversary {

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int base_width) {
    namespace nn = torch::nn;
    const int w = base_width;
    c1_ = register_module("c1", nn::Conv2d(nn::Conv2dOptions(3, w, 3).stride(2).padding(1)));
    c2_ = register_module("c2", nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 3).stride(2).padding(1)));
    c3_ = register_module("c3",
                          nn::Conv2d(nn::Conv2dOptions(2 * w, 4 * w, 3).stride(2).padding(1)));
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(4 * w, 1, 1)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
    if (!images.defined() || (images.dim() != 3 && images.dim() != 4)) {
        throw ValidationError("discriminator expects (3,H,W) or (N,3,H,W)");
    }
    auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    if (x.size(1) != 3) throw ValidationError("discriminator expects 3 channels");
    if (x.size(2) % 8 != 0 || x.size(3) % 8 != 0) {
        throw ValidationError("discriminator requires resolution divisible by 8");
    }
    x = torch::leaky_relu(c1_->forward(x), 0.2);
    x = torch::leaky_relu(c2_->forward(x), 0.2);
    x = torch::leaky_relu(c3_->forward(x), 0.2);
    x = head_->forward(x);
    return images.dim() == 3 ? x.squeeze(0) : x;
}

ReceptiveField logit_receptive_field(int64_t logit_index, int64_t input_size) {
    // Each k3/s2/p1 stage maps output index o to inputs [2o-1, 2o+1];
    // composing three stages gives [8o-7, 8o+7].
    ReceptiveField rf;
    rf.lo = std::max<int64_t>(0, 8 * logit_index - 7);
    rf.hi = std::min<int64_t>(input_size - 1, 8 * logit_index + 7);
    return rf;
}

ReceptiveField logits_touched_by_pixel(int64_t pixel_index, int64_t logit_grid_size) {
    // ceil((p-7)/8) and floor((p+7)/8), clamped to the grid.
    auto ceil_div = [](int64_t a, int64_t b) {
        return a >= 0 ? (a + b - 1) / b : -((-a) / b);
    };
    ReceptiveField rf;
    rf.lo = std::max<int64_t>(0, ceil_div(pixel_index - 7, 8));
    rf.hi = std::min<int64_t>(logit_grid_size - 1, (pixel_index + 7) / 8);
    return rf;
}

nlohmann::json LossWeights::to_json() const {
    return {{"recon", recon}, {"perceptual", perceptual}, {"gan", gan}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
    LossWeights w;
    w.recon = j.at("recon").get<double>();
    w.perceptual = j.at("perceptual").get<double>();
    w.gan = j.at("gan").get<double>();
    return w;
}

torch::Tensor feature_distance(const torch::Tensor& a, const torch::Tensor& b,
                               codec::LatentCodec& codec) {
    auto fa = codec->encoder_features(a);
    auto fb = codec->encoder_features(b);
    torch::Tensor sum = torch::zeros({}, torch::kFloat32);
    for (size_t i = 0; i < fa.size(); ++i) {
        sum = sum + torch::mse_loss(fa[i], fb[i]);
    }
    return sum / static_cast<double>(fa.size());
}

GeneratorLoss generator_loss(const torch::Tensor& refined, const torch::Tensor& ground_truth,
                             PatchDiscriminator& disc, codec::LatentCodec& codec,
                             const LossWeights& weights) {
    if (!refined.sizes().equals(ground_truth.sizes())) {
        throw ValidationError("generator_loss requires shape-matched image stacks");
    }
    auto recon = torch::mse_loss(refined, ground_truth);
    auto perceptual = feature_distance(refined, ground_truth, codec);
    auto gan_g = -disc->forward(refined).mean();

    GeneratorLoss out;
    out.total = weights.recon * recon + weights.perceptual * perceptual + weights.gan * gan_g;
    out.report.recon_l2 = recon.item<double>();
    out.report.perceptual = perceptual.item<double>();
    out.report.gan_g = gan_g.item<double>();
    out.report.total_g = out.total.item<double>();
    return out;
}

torch::Tensor discriminator_loss(const torch::Tensor& refined, const torch::Tensor& ground_truth,
                                 PatchDiscriminator& disc) {
    if (!refined.sizes().equals(ground_truth.sizes())) {
        throw ValidationError("discriminator_loss requires shape-matched image stacks");
    }
    auto real = disc->forward(ground_truth);
    auto fake = disc->forward(refined.detach());
    return torch::relu(1.0 - real).mean() + torch::relu(1.0 + fake).mean();
}

}  // namespace mvr::adversary
