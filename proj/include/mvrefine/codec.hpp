#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mvrefine/synthdata.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::codec {

struct CodecConfig {
    int latent_channels = 8;
    int base_width = 32;

    std::string arch_string() const;
    nlohmann::json to_json() const;
    static CodecConfig from_json(const nlohmann::json& j);
};

// Small deterministic convolutional autoencoder; two stride-2 stages each way,
// so latents are (C_z, H/4, W/4).
class LatentCodecImpl : public torch::nn::Module {
public:
    explicit LatentCodecImpl(CodecConfig config = {});

    torch::Tensor encode(const torch::Tensor& images);
    torch::Tensor decode(const torch::Tensor& latents);
    std::vector<torch::Tensor> encoder_features(const torch::Tensor& images);

    const CodecConfig& config() const { return config_; }

private:
    CodecConfig config_;
    torch::nn::Conv2d enc1_{nullptr}, enc2_{nullptr}, enc_out_{nullptr};
    torch::nn::Conv2d dec_in_{nullptr}, dec_out_{nullptr};
    torch::nn::ConvTranspose2d dec1_{nullptr}, dec2_{nullptr};
};
TORCH_MODULE(LatentCodec);

struct CodecTrainConfig {
    int64_t steps = 5000;
    int batch_size = 16;
    double lr = 1e-3;
    uint64_t seed = 1;
    double holdout_fraction = 0.1;
    bool include_degraded = true;
    int64_t log_every = 100;

    nlohmann::json to_json() const;
    static CodecTrainConfig from_json(const nlohmann::json& j);
};

struct CodecCheckpoint {
    std::string directory;
    std::string arch_hash;
    int64_t step = 0;
    double holdout_psnr_db = 0.0;
};

// Returns the per-step loss curve alongside the persisted checkpoint.
CodecCheckpoint train_codec(const std::vector<synthdata::SceneBundle>& bundles,
                            const CodecTrainConfig& config, const CodecConfig& arch,
                            const std::string& out_dir, LatentCodec& codec,
                            std::vector<double>* loss_curve = nullptr);

void save_codec(const LatentCodec& codec, const CodecCheckpoint& meta,
                const std::string& directory);
LatentCodec load_codec(const std::string& directory, CodecCheckpoint* meta_out = nullptr);

// Held-out reconstruction quality, mean PSNR over images.
double holdout_psnr(LatentCodec& codec, const std::vector<torch::Tensor>& images);

// Images from bundles, plus degraded variants when requested; identity-split
// into train and held-out pools.
void build_image_pools(const std::vector<synthdata::SceneBundle>& bundles,
                       double holdout_fraction, bool include_degraded,
                       std::vector<torch::Tensor>& train_pool,
                       std::vector<torch::Tensor>& holdout_pool);

}  // namespace mvr::codec
