#pragma once

#include <torch/torch.h>

#include <atomic>
#include <string>
#include <vector>

#include "mvrefine/codec.hpp"
#include "mvrefine/coarse.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::refiner {

// Noise levels used during training; inference pins r = 0.1.
inline const std::vector<double> kTrainNoiseLevels = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr double kDefaultInferenceNoise = 0.1;
inline constexpr uint64_t kInferenceNoiseSeed = 0x5eed0120u;

struct NoiseLevel {
    double r = kDefaultInferenceNoise;
    NoiseLevel() = default;
    explicit NoiseLevel(double value);
};

// Latents for one training batch: slot 0 is the reference, slots 1..V are
// novel views.
struct ViewLatentBatch {
    torch::Tensor data;  // (B, V+1, C, H', W')

    int64_t batch_size() const { return data.size(0); }
    int64_t novel_views() const { return data.size(1) - 1; }
    void validate() const;
};

// (B, V+1, C, H, W) <-> ((B*(V+1)), C, H, W); slot (b, v) maps to row b*(V+1)+v.
torch::Tensor reshape_for_resblock(const torch::Tensor& latents);
torch::Tensor inverse_resblock_reshape(const torch::Tensor& folded, int64_t views_plus_ref);

// (B, V+1, C, H, W) <-> (B, C, (V+1)*H*W); token (v, h, w) sits at v*H*W + h*W + w.
torch::Tensor reshape_for_attention(const torch::Tensor& latents);
torch::Tensor inverse_attention_reshape(const torch::Tensor& tokens, int64_t views_plus_ref,
                                        int64_t height, int64_t width);

// Convex blend (1-r)*z + r*n on novel-view slots only; slot 0 passes through
// untouched.
ViewLatentBatch add_noise(const ViewLatentBatch& batch, NoiseLevel level, uint64_t rng_seed);

NoiseLevel sample_train_noise_level(at::Generator& gen,
                                    const std::vector<double>& levels = kTrainNoiseLevels);

torch::Tensor timestep_embedding(int64_t timestep, int64_t dim);

// 1x1 projection over the channel axis with a low-rank trainable delta on a
// frozen base matrix.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(std::string target_name, int64_t features, int rank, double scale = 1.0);

    torch::Tensor forward(const torch::Tensor& tokens);  // (B, C, T)
    void fold_into_base();

    const std::string& target_name() const { return target_name_; }
    int rank() const { return rank_; }
    double scale() const { return scale_; }
    torch::Tensor weight, down, up;

private:
    std::string target_name_;
    int rank_ = 0;
    double scale_ = 1.0;
};
TORCH_MODULE(LoraLinear);

class ViewAttentionImpl : public torch::nn::Module {
public:
    ViewAttentionImpl(std::string name, int64_t channels, int heads, int lora_rank);

    // Input stays in the folded ResBlock layout; attention internally spans
    // all views of a sample through the token reshape.
    torch::Tensor forward(const torch::Tensor& folded, int64_t views_plus_ref);

    std::vector<LoraLinear> lora_layers() { return {q_, k_, v_, o_}; }

private:
    torch::nn::GroupNorm norm_{nullptr};
    LoraLinear q_{nullptr}, k_{nullptr}, v_{nullptr}, o_{nullptr};
    int heads_ = 4;
};
TORCH_MODULE(ViewAttention);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear emb_proj_{nullptr};
    bool has_skip_ = false;
};
TORCH_MODULE(ResBlock);

struct RefinerConfig {
    int latent_channels = 8;
    int base_width = 32;
    int heads = 4;
    int lora_rank = 4;
    int fixed_timestep = 400;
    int emb_dim = 128;

    std::string arch_string() const;
    nlohmann::json to_json() const;
    static RefinerConfig from_json(const nlohmann::json& j);
};

// Two down / two up stages; ResBlocks run on the folded (B*(V+1)) layout and
// the attention blocks on the joint token layout, so reference content reaches
// every view in one forward pass.
class RefinerUNetImpl : public torch::nn::Module {
public:
    explicit RefinerUNetImpl(RefinerConfig config = {});

    torch::Tensor forward(const torch::Tensor& latents5d);

    const RefinerConfig& config() const { return config_; }
    int64_t forward_calls() const { return forward_calls_.load(); }
    std::vector<LoraLinear> lora_layers();

private:
    RefinerConfig config_;
    torch::nn::Linear temb1_{nullptr}, temb2_{nullptr};
    torch::nn::Conv2d stem_{nullptr}, down1_{nullptr}, down2_{nullptr}, out_conv_{nullptr};
    torch::nn::ConvTranspose2d up1_{nullptr}, up2_{nullptr};
    ResBlock enc1_{nullptr}, enc2_{nullptr}, mid1_{nullptr}, mid2_{nullptr}, dec2_{nullptr},
        dec1_{nullptr};
    ViewAttention attn_enc_{nullptr}, attn_mid_{nullptr}, attn_dec_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    std::atomic<int64_t> forward_calls_{0};
};
TORCH_MODULE(RefinerUNet);

struct RefinerModel {
    RefinerUNet unet{nullptr};
    int view_count = 2;

    bool defined() const { return !unet.is_empty(); }
};

RefinerModel make_refiner(const RefinerConfig& config, int view_count);

ViewLatentBatch unet_forward(const ViewLatentBatch& noisy, RefinerModel& model);

std::vector<torch::Tensor> refine(const torch::Tensor& reference,
                                  const std::vector<coarse::CoarseView>& coarse_views,
                                  RefinerModel& model, codec::LatentCodec& codec,
                                  NoiseLevel level = NoiseLevel{});

std::vector<torch::Tensor> lora_parameters(const RefinerModel& model);
std::vector<torch::Tensor> base_parameters(const RefinerModel& model);
int64_t lora_parameter_count(const RefinerModel& model);
int64_t base_parameter_count(const RefinerModel& model);
std::string base_hash(const RefinerModel& model);
void freeze_base(RefinerModel& model);

// Deep copy with every adapter folded into its base matrix; outputs match the
// adapted model up to float round-off.
RefinerModel merge_lora(const RefinerModel& model);

void save_refiner(const RefinerModel& model, const std::string& directory);
RefinerModel load_refiner(const std::string& directory);

}  // namespace mvr::refiner
