#include "mvrefine/refiner.hpp"

#include <cmath>
#include <filesystem>

#include "mvrefine/common.hpp"
#include "mvrefine/image_io.hpp"
#include "mvrefine/serialize.hpp"

namespace fs = std::filesystem;

namespace mvr::refiner {

NoiseLevel::NoiseLevel(double value) : r(value) {
    if (r < 0.0 || r > 0.5) throw ValidationError("noise level r must lie in [0, 0.5]");
}

void ViewLatentBatch::validate() const {
    if (!data.defined() || data.dim() != 5) {
        throw ValidationError("view latent batch must be a (B, V+1, C, H', W') tensor");
    }
    if (data.size(1) < 2) {
        throw ValidationError("view latent batch needs a reference slot and at least one view");
    }
    if (!data.isfinite().all().item<bool>()) {
        throw ValidationError("view latent batch contains non-finite values");
    }
}

torch::Tensor reshape_for_resblock(const torch::Tensor& latents) {
    if (latents.dim() != 5) throw ValidationError("reshape_for_resblock expects a 5-d tensor");
    const auto s = latents.sizes();
    return latents.reshape({s[0] * s[1], s[2], s[3], s[4]});
}

torch::Tensor inverse_resblock_reshape(const torch::Tensor& folded, int64_t views_plus_ref) {
    if (folded.dim() != 4) throw ValidationError("inverse_resblock_reshape expects a 4-d tensor");
    const auto s = folded.sizes();
    if (s[0] % views_plus_ref != 0) {
        throw ValidationError("folded batch size is not a multiple of V+1");
    }
    return folded.reshape({s[0] / views_plus_ref, views_plus_ref, s[1], s[2], s[3]});
}

torch::Tensor reshape_for_attention(const torch::Tensor& latents) {
    if (latents.dim() != 5) throw ValidationError("reshape_for_attention expects a 5-d tensor");
    const auto s = latents.sizes();
    // (B, V+1, C, H, W) -> (B, C, V+1, H, W) -> (B, C, (V+1)*H*W)
    return latents.permute({0, 2, 1, 3, 4}).reshape({s[0], s[2], s[1] * s[3] * s[4]});
}

torch::Tensor inverse_attention_reshape(const torch::Tensor& tokens, int64_t views_plus_ref,
                                        int64_t height, int64_t width) {
    if (tokens.dim() != 3) throw ValidationError("inverse_attention_reshape expects a 3-d tensor");
    const auto s = tokens.sizes();
    if (s[2] != views_plus_ref * height * width) {
        throw ValidationError("token count does not match (V+1)*H*W");
    }
    return tokens.reshape({s[0], s[1], views_plus_ref, height, width})
        .permute({0, 2, 1, 3, 4})
        .contiguous();
}

ViewLatentBatch add_noise(const ViewLatentBatch& batch, NoiseLevel level, uint64_t rng_seed) {
    batch.validate();
    auto out = batch.data.clone();
    if (level.r == 0.0) return ViewLatentBatch{out};

    const int64_t views = batch.novel_views();
    auto novel = out.narrow(1, 1, views);
    auto gen = at::detail::createCPUGenerator(rng_seed);
    auto noise = torch::randn(novel.sizes(), gen, novel.options());
    novel.copy_((1.0 - level.r) * novel + level.r * noise);
    return ViewLatentBatch{out};
}

NoiseLevel sample_train_noise_level(at::Generator& gen, const std::vector<double>& levels) {
    if (levels.empty()) throw ValidationError("noise level set must not be empty");
    const auto idx = torch::randint(0, static_cast<int64_t>(levels.size()), {1}, gen,
                                    torch::TensorOptions().dtype(torch::kLong))
                         .item<int64_t>();
    return NoiseLevel(levels[static_cast<size_t>(idx)]);
}

torch::Tensor timestep_embedding(int64_t timestep, int64_t dim) {
    const int64_t half = dim / 2;
    auto exponents = torch::arange(half, torch::kFloat32) *
                     static_cast<float>(-std::log(10000.0) / (half - 1));
    auto freqs = torch::exp(exponents) * static_cast<float>(timestep);
    return torch::cat({freqs.sin(), freqs.cos()});
}

LoraLinearImpl::LoraLinearImpl(std::string target_name, int64_t features, int rank, double scale)
    : target_name_(std::move(target_name)), rank_(rank), scale_(scale) {
    weight = register_parameter(
        "weight", torch::randn({features, features}) / std::sqrt(static_cast<double>(features)));
    if (rank_ > 0) {
        down = register_parameter("down", torch::randn({rank_, features}) * 0.02);
        up = register_parameter("up", torch::zeros({features, rank_}));
    }
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& tokens) {
    auto y = torch::matmul(weight, tokens);
    if (rank_ > 0) {
        y = y + scale_ * torch::matmul(up, torch::matmul(down, tokens));
    }
    return y;
}

void LoraLinearImpl::fold_into_base() {
    if (rank_ == 0) return;
    torch::NoGradGuard ng;
    weight.add_(scale_ * torch::matmul(up, down));
    up.zero_();
}

ViewAttentionImpl::ViewAttentionImpl(std::string name, int64_t channels, int heads, int lora_rank)
    : heads_(heads) {
    if (channels % heads != 0) throw ValidationError("attention channels must divide head count");
    norm_ = register_module("norm",
                            torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, channels)));
    q_ = register_module("q", LoraLinear(name + ".q", channels, lora_rank));
    k_ = register_module("k", LoraLinear(name + ".k", channels, lora_rank));
    v_ = register_module("v", LoraLinear(name + ".v", channels, lora_rank));
    o_ = register_module("o", LoraLinear(name + ".o", channels, lora_rank));
    // Zero out-projection: the residual attention path starts as a no-op.
    torch::NoGradGuard ng;
    o_->weight.zero_();
}

torch::Tensor ViewAttentionImpl::forward(const torch::Tensor& folded, int64_t views_plus_ref) {
    const int64_t n = folded.size(0);
    const int64_t c = folded.size(1);
    const int64_t h = folded.size(2);
    const int64_t w = folded.size(3);
    if (n % views_plus_ref != 0) throw ValidationError("attention input rows not divisible by V+1");

    auto x = norm_->forward(folded);
    auto tokens = reshape_for_attention(inverse_resblock_reshape(x, views_plus_ref));

    const int64_t b = tokens.size(0);
    const int64_t t = tokens.size(2);
    const int64_t hd = c / heads_;

    auto split = [&](const torch::Tensor& m) { return m.reshape({b, heads_, hd, t}); };
    auto q = split(q_->forward(tokens));
    auto k = split(k_->forward(tokens));
    auto v = split(v_->forward(tokens));

    auto logits = torch::einsum("bhdt,bhds->bhts", {q, k}) /
                  std::sqrt(static_cast<double>(hd));
    auto attn = torch::softmax(logits, -1);
    auto mixed = torch::einsum("bhts,bhds->bhdt", {attn, v}).reshape({b, c, t});
    auto out = o_->forward(mixed);

    auto back = reshape_for_resblock(inverse_attention_reshape(out, views_plus_ref, h, w));
    return folded + back;
}

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim) {
    namespace nn = torch::nn;
    norm1_ = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(8, in_channels)));
    conv1_ = register_module("conv1",
                             nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    emb_proj_ = register_module("emb_proj", nn::Linear(emb_dim, out_channels));
    norm2_ = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(8, out_channels)));
    conv2_ = register_module(
        "conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    has_skip_ = in_channels != out_channels;
    if (has_skip_) {
        skip_ = register_module("skip",
                                nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
    h = h + emb_proj_->forward(emb).view({1, -1, 1, 1});
    h = conv2_->forward(torch::silu(norm2_->forward(h)));
    return h + (has_skip_ ? skip_->forward(x) : x);
}

std::string RefinerConfig::arch_string() const {
    return "refiner/v1/cz=" + std::to_string(latent_channels) + "/w=" +
           std::to_string(base_width) + "/heads=" + std::to_string(heads) + "/rank=" +
           std::to_string(lora_rank) + "/t=" + std::to_string(fixed_timestep) + "/emb=" +
           std::to_string(emb_dim);
}

nlohmann::json RefinerConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"base_width", base_width},
            {"heads", heads},                     {"lora_rank", lora_rank},
            {"fixed_timestep", fixed_timestep},   {"emb_dim", emb_dim}};
}

RefinerConfig RefinerConfig::from_json(const nlohmann::json& j) {
    RefinerConfig c;
    c.latent_channels = j.at("latent_channels").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.heads = j.at("heads").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.fixed_timestep = j.at("fixed_timestep").get<int>();
    c.emb_dim = j.at("emb_dim").get<int>();
    return c;
}

RefinerUNetImpl::RefinerUNetImpl(RefinerConfig config) : config_(config) {
    namespace nn = torch::nn;
    const int w = config_.base_width;
    const int cz = config_.latent_channels;
    const int e = config_.emb_dim;

    temb1_ = register_module("temb1", nn::Linear(e, e));
    temb2_ = register_module("temb2", nn::Linear(e, e));

    stem_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(cz, w, 3).padding(1)));
    enc1_ = register_module("enc1", ResBlock(w, w, e));
    down1_ = register_module("down1", nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 3).stride(2).padding(1)));
    enc2_ = register_module("enc2", ResBlock(2 * w, 2 * w, e));
    attn_enc_ = register_module("attn_enc", ViewAttention("attn_enc", 2 * w, config_.heads,
                                                          config_.lora_rank));
    down2_ = register_module("down2",
                             nn::Conv2d(nn::Conv2dOptions(2 * w, 4 * w, 3).stride(2).padding(1)));
    mid1_ = register_module("mid1", ResBlock(4 * w, 4 * w, e));
    attn_mid_ = register_module("attn_mid", ViewAttention("attn_mid", 4 * w, config_.heads,
                                                          config_.lora_rank));
    mid2_ = register_module("mid2", ResBlock(4 * w, 4 * w, e));
    up1_ = register_module(
        "up1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(4 * w, 2 * w, 4).stride(2).padding(1)));
    dec2_ = register_module("dec2", ResBlock(4 * w, 2 * w, e));
    attn_dec_ = register_module("attn_dec", ViewAttention("attn_dec", 2 * w, config_.heads,
                                                          config_.lora_rank));
    up2_ = register_module(
        "up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * w, w, 4).stride(2).padding(1)));
    dec1_ = register_module("dec1", ResBlock(2 * w, w, e));
    out_norm_ = register_module("out_norm", nn::GroupNorm(nn::GroupNormOptions(8, w)));
    out_conv_ = register_module("out_conv", nn::Conv2d(nn::Conv2dOptions(w, cz, 3).padding(1)));
}

torch::Tensor RefinerUNetImpl::forward(const torch::Tensor& latents5d) {
    if (latents5d.dim() != 5) throw ValidationError("refiner expects a (B, V+1, C, H', W') tensor");
    if (latents5d.size(2) != config_.latent_channels) {
        throw ValidationError("latent channel count does not match refiner config");
    }
    if (latents5d.size(3) % 4 != 0 || latents5d.size(4) % 4 != 0) {
        throw ValidationError("latent spatial dims must be divisible by 4");
    }
    const int64_t vp1 = latents5d.size(1);

    auto emb = timestep_embedding(config_.fixed_timestep, config_.emb_dim)
                   .to(latents5d.options());
    emb = temb2_->forward(torch::silu(temb1_->forward(emb)));

    auto x = reshape_for_resblock(latents5d);
    auto s0 = stem_->forward(x);
    auto e1 = enc1_->forward(s0, emb);
    auto e2 = enc2_->forward(down1_->forward(e1), emb);
    e2 = attn_enc_->forward(e2, vp1);
    auto m = mid1_->forward(down2_->forward(e2), emb);
    m = attn_mid_->forward(m, vp1);
    m = mid2_->forward(m, emb);
    auto d2 = dec2_->forward(torch::cat({up1_->forward(m), e2}, 1), emb);
    d2 = attn_dec_->forward(d2, vp1);
    auto d1 = dec1_->forward(torch::cat({up2_->forward(d2), e1}, 1), emb);
    auto out = out_conv_->forward(torch::silu(out_norm_->forward(d1)));

    forward_calls_.fetch_add(1);
    return inverse_resblock_reshape(x + out, vp1);
}

std::vector<LoraLinear> RefinerUNetImpl::lora_layers() {
    std::vector<LoraLinear> out;
    ViewAttention blocks[] = {attn_enc_, attn_mid_, attn_dec_};
    for (auto& block : blocks) {
        for (auto& l : block->lora_layers()) out.push_back(l);
    }
    return out;
}

RefinerModel make_refiner(const RefinerConfig& config, int view_count) {
    if (view_count < 1) throw ValidationError("view count must be at least 1");
    RefinerModel m;
    m.unet = RefinerUNet(config);
    m.view_count = view_count;
    return m;
}

ViewLatentBatch unet_forward(const ViewLatentBatch& noisy, RefinerModel& model) {
    noisy.validate();
    return ViewLatentBatch{model.unet->forward(noisy.data)};
}

std::vector<torch::Tensor> refine(const torch::Tensor& reference,
                                  const std::vector<coarse::CoarseView>& coarse_views,
                                  RefinerModel& model, codec::LatentCodec& codec,
                                  NoiseLevel level) {
    validate_image(reference, "refine reference");
    if (static_cast<int>(coarse_views.size()) != model.view_count) {
        throw ValidationError("refine expects exactly " + std::to_string(model.view_count) +
                              " coarse views");
    }
    torch::NoGradGuard ng;

    std::vector<torch::Tensor> stack;
    stack.push_back(reference);
    for (const auto& cv : coarse_views) {
        validate_image(cv.image, "refine coarse view");
        stack.push_back(cv.image);
    }
    auto latents = codec->encode(torch::stack(stack)).unsqueeze(0);  // (1, V+1, C, H', W')

    auto noisy = add_noise(ViewLatentBatch{latents}, level, kInferenceNoiseSeed);
    auto refined = unet_forward(noisy, model);

    // Reference slot is dropped; only novel views are decoded.
    auto novel = refined.data.squeeze(0).narrow(0, 1, model.view_count);
    auto images = codec->decode(novel);

    std::vector<torch::Tensor> out;
    for (int64_t v = 0; v < model.view_count; ++v) {
        out.push_back(images[v].clamp(0, 1));
    }
    return out;
}

namespace {

bool is_lora_param_name(const std::string& name) {
    const auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(".down") || ends_with(".up");
}

}  // namespace

std::vector<torch::Tensor> lora_parameters(const RefinerModel& model) {
    std::vector<torch::Tensor> out;
    for (auto& p : model.unet->named_parameters()) {
        if (is_lora_param_name(p.key())) out.push_back(p.value());
    }
    return out;
}

std::vector<torch::Tensor> base_parameters(const RefinerModel& model) {
    std::vector<torch::Tensor> out;
    for (auto& p : model.unet->named_parameters()) {
        if (!is_lora_param_name(p.key())) out.push_back(p.value());
    }
    return out;
}

int64_t lora_parameter_count(const RefinerModel& model) {
    int64_t n = 0;
    for (const auto& p : lora_parameters(model)) n += p.numel();
    return n;
}

int64_t base_parameter_count(const RefinerModel& model) {
    int64_t n = 0;
    for (const auto& p : base_parameters(model)) n += p.numel();
    return n;
}

std::string base_hash(const RefinerModel& model) {
    std::map<std::string, torch::Tensor> base;
    for (auto& p : model.unet->named_parameters()) {
        if (!is_lora_param_name(p.key())) base.emplace(p.key(), p.value());
    }
    return weights_hash(base);
}

void freeze_base(RefinerModel& model) {
    for (auto& p : base_parameters(model)) p.set_requires_grad(false);
    for (auto& p : lora_parameters(model)) p.set_requires_grad(true);
}

RefinerModel merge_lora(const RefinerModel& model) {
    RefinerModel merged = make_refiner(model.unet->config(), model.view_count);
    load_into_module(*merged.unet, named_parameters_map(*model.unet));
    for (auto& layer : merged.unet->lora_layers()) layer->fold_into_base();
    return merged;
}

void save_refiner(const RefinerModel& model, const std::string& directory) {
    fs::create_directories(fs::path(directory) / "adapters");
    RefinerUNet unet = model.unet;  // shared handle; no mutation below

    std::map<std::string, torch::Tensor> base;
    for (auto& p : unet->named_parameters()) {
        if (!is_lora_param_name(p.key())) base.emplace(p.key(), p.value());
    }
    save_tensor_map(base, (fs::path(directory) / "base.bin").string());

    for (auto& layer : unet->lora_layers()) {
        save_tensor_map({{"down", layer->down}, {"up", layer->up}},
                        (fs::path(directory) / "adapters" / (layer->target_name() + ".bin")).string());
    }

    nlohmann::json meta = {{"arch", model.unet->config().to_json()},
                           {"arch_hash", hash_hex(model.unet->config().arch_string())},
                           {"view_count", model.view_count},
                           {"fixed_timestep", model.unet->config().fixed_timestep},
                           {"latent_channels", model.unet->config().latent_channels}};
    write_json(meta, (fs::path(directory) / "meta.json").string());
}

RefinerModel load_refiner(const std::string& directory) {
    const auto meta = read_json((fs::path(directory) / "meta.json").string());
    const auto config = RefinerConfig::from_json(meta.at("arch"));
    if (meta.at("arch_hash").get<std::string>() != hash_hex(config.arch_string())) {
        throw IntegrityError("refiner meta arch_hash does not match its architecture");
    }
    auto model = make_refiner(config, meta.at("view_count").get<int>());

    auto tensors = load_tensor_map((fs::path(directory) / "base.bin").string());
    for (auto& layer : model.unet->lora_layers()) {
        auto adapter = load_tensor_map(
            (fs::path(directory) / "adapters" / (layer->target_name() + ".bin")).string());
        torch::NoGradGuard ng;
        layer->down.copy_(adapter.at("down"));
        layer->up.copy_(adapter.at("up"));
    }
    // Base tensors are everything that is not an adapter.
    {
        torch::NoGradGuard ng;
        for (auto& p : model.unet->named_parameters()) {
            if (is_lora_param_name(p.key())) continue;
            auto it = tensors.find(p.key());
            if (it == tensors.end()) {
                throw IntegrityError("refiner base blob is missing tensor '" + p.key() + "'");
            }
            if (!p.value().sizes().equals(it->second.sizes())) {
                throw IntegrityError("shape mismatch for tensor '" + p.key() + "'");
            }
            p.value().copy_(it->second);
        }
    }
    return model;
}

}  // namespace mvr::refiner
