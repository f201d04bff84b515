#include "mvrefine/codec.hpp"

#include <filesystem>

#include "mvrefine/coarse.hpp"
#include "mvrefine/common.hpp"
#include "mvrefine/image_io.hpp"
#include "mvrefine/metrics.hpp"
#include "mvrefine/serialize.hpp"

namespace fs = std::filesystem;

namespace mvr::codec {

std::string CodecConfig::arch_string() const {
    return "codec/v1/cz=" + std::to_string(latent_channels) +
           "/w=" + std::to_string(base_width);
}

nlohmann::json CodecConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"base_width", base_width}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.latent_channels = j.at("latent_channels").get<int>();
    c.base_width = j.at("base_width").get<int>();
    return c;
}

LatentCodecImpl::LatentCodecImpl(CodecConfig config) : config_(config) {
    namespace nn = torch::nn;
    const int w = config_.base_width;
    const int cz = config_.latent_channels;
    enc1_ = register_module("enc1", nn::Conv2d(nn::Conv2dOptions(3, w, 3).stride(2).padding(1)));
    enc2_ = register_module("enc2",
                            nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 3).stride(2).padding(1)));
    enc_out_ = register_module("enc_out", nn::Conv2d(nn::Conv2dOptions(2 * w, cz, 3).padding(1)));
    dec_in_ = register_module("dec_in", nn::Conv2d(nn::Conv2dOptions(cz, 2 * w, 3).padding(1)));
    dec1_ = register_module(
        "dec1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * w, w, 4).stride(2).padding(1)));
    dec2_ = register_module(
        "dec2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(w, w, 4).stride(2).padding(1)));
    dec_out_ = register_module("dec_out", nn::Conv2d(nn::Conv2dOptions(w, 3, 3).padding(1)));
}

namespace {

torch::Tensor ensure_batched(const torch::Tensor& x, bool& was_single) {
    was_single = x.dim() == 3;
    return was_single ? x.unsqueeze(0) : x;
}

}  // namespace

torch::Tensor LatentCodecImpl::encode(const torch::Tensor& images) {
    if (!images.defined() || (images.dim() != 3 && images.dim() != 4)) {
        throw ValidationError("encode expects (3,H,W) or (N,3,H,W)");
    }
    bool single = false;
    auto x = ensure_batched(images, single);
    if (x.size(1) != 3) throw ValidationError("encode expects 3 channels");
    if (x.size(2) % 4 != 0 || x.size(3) % 4 != 0) {
        throw ValidationError("encode requires resolution divisible by 4");
    }
    x = torch::silu(enc1_->forward(x));
    x = torch::silu(enc2_->forward(x));
    x = enc_out_->forward(x);
    return single ? x.squeeze(0) : x;
}

torch::Tensor LatentCodecImpl::decode(const torch::Tensor& latents) {
    if (!latents.defined() || (latents.dim() != 3 && latents.dim() != 4)) {
        throw ValidationError("decode expects (C,H',W') or (N,C,H',W')");
    }
    bool single = false;
    auto x = ensure_batched(latents, single);
    if (x.size(1) != config_.latent_channels) {
        throw ValidationError("decode latent channel count does not match codec config");
    }
    x = torch::silu(dec_in_->forward(x));
    x = torch::silu(dec1_->forward(x));
    x = torch::silu(dec2_->forward(x));
    x = torch::sigmoid(dec_out_->forward(x));
    return single ? x.squeeze(0) : x;
}

std::vector<torch::Tensor> LatentCodecImpl::encoder_features(const torch::Tensor& images) {
    bool single = false;
    auto x = ensure_batched(images, single);
    auto f1 = torch::silu(enc1_->forward(x));
    auto f2 = torch::silu(enc2_->forward(f1));
    if (single) return {f1.squeeze(0), f2.squeeze(0)};
    return {f1, f2};
}

nlohmann::json CodecTrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch_size", batch_size},
            {"lr", lr},
            {"seed", seed},
            {"holdout_fraction", holdout_fraction},
            {"include_degraded", include_degraded},
            {"log_every", log_every}};
}

CodecTrainConfig CodecTrainConfig::from_json(const nlohmann::json& j) {
    CodecTrainConfig c;
    c.steps = j.at("steps").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.holdout_fraction = j.at("holdout_fraction").get<double>();
    c.include_degraded = j.at("include_degraded").get<bool>();
    c.log_every = j.at("log_every").get<int64_t>();
    return c;
}

void build_image_pools(const std::vector<synthdata::SceneBundle>& bundles,
                       double holdout_fraction, bool include_degraded,
                       std::vector<torch::Tensor>& train_pool,
                       std::vector<torch::Tensor>& holdout_pool) {
    if (bundles.empty()) throw ValidationError("codec training requires a non-empty dataset");
    const size_t holdout_count =
        std::max<size_t>(1, static_cast<size_t>(holdout_fraction * bundles.size()));
    const size_t train_count = bundles.size() - holdout_count;

    coarse::DegradationConfig deg;  // defaults mirror the training degradation
    for (size_t i = 0; i < bundles.size(); ++i) {
        auto& pool = i < train_count ? train_pool : holdout_pool;
        const auto& b = bundles[i];
        pool.push_back(b.reference);
        for (size_t k = 0; k < b.targets.size(); ++k) {
            pool.push_back(b.targets[k]);
            if (include_degraded) {
                const uint64_t seed =
                    static_cast<uint64_t>(b.identity.seed) * 1000003ull + k;
                pool.push_back(
                    coarse::degrade(b.targets[k], b.target_poses[k], deg, seed).image);
            }
        }
    }
}

double holdout_psnr(LatentCodec& codec, const std::vector<torch::Tensor>& images) {
    torch::NoGradGuard ng;
    double total = 0.0;
    for (const auto& img : images) {
        auto rec = codec->decode(codec->encode(img));
        total += metrics::psnr(rec, img);
    }
    return total / static_cast<double>(images.size());
}

CodecCheckpoint train_codec(const std::vector<synthdata::SceneBundle>& bundles,
                            const CodecTrainConfig& config, const CodecConfig& arch,
                            const std::string& out_dir, LatentCodec& codec,
                            std::vector<double>* loss_curve) {
    torch::manual_seed(config.seed);
    codec = LatentCodec(arch);

    std::vector<torch::Tensor> train_pool, holdout_pool;
    build_image_pools(bundles, config.holdout_fraction, config.include_degraded, train_pool,
                      holdout_pool);
    auto train_tensor = torch::stack(train_pool);

    auto gen = at::detail::createCPUGenerator(config.seed ^ 0x632be59bd9b4e019ull);
    std::vector<torch::Tensor> params;
    for (auto& p : codec->parameters()) params.push_back(p);

    // Plain Adam; state is kept local because codec training never resumes.
    std::vector<torch::Tensor> m(params.size()), v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i] = torch::zeros_like(params[i]);
        v[i] = torch::zeros_like(params[i]);
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    for (int64_t step = 1; step <= config.steps; ++step) {
        auto idx = torch::randint(0, train_tensor.size(0), {config.batch_size}, gen,
                                  torch::TensorOptions().dtype(torch::kLong));
        auto batch = train_tensor.index_select(0, idx);
        auto rec = codec->decode(codec->encode(batch));
        auto loss = torch::mse_loss(rec, batch);

        const double loss_val = loss.item<double>();
        if (!std::isfinite(loss_val)) {
            throw NumericalError("codec training diverged (non-finite loss) at step " +
                                 std::to_string(step));
        }
        if (loss_curve) loss_curve->push_back(loss_val);

        for (auto& p : params) {
            if (p.grad().defined()) p.mutable_grad().zero_();
        }
        loss.backward();
        {
            torch::NoGradGuard ng;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (size_t i = 0; i < params.size(); ++i) {
                auto g = params[i].grad();
                m[i].mul_(beta1).add_(g, 1.0 - beta1);
                v[i].mul_(beta2).addcmul_(g, g, 1.0 - beta2);
                params[i].addcdiv_(m[i] / bc1, (v[i] / bc2).sqrt() + eps, -config.lr);
            }
        }
    }

    CodecCheckpoint meta;
    meta.step = config.steps;
    meta.arch_hash = hash_hex(arch.arch_string());
    meta.holdout_psnr_db = holdout_psnr(codec, holdout_pool);
    meta.directory = out_dir;
    save_codec(codec, meta, out_dir);
    return meta;
}

void save_codec(const LatentCodec& codec, const CodecCheckpoint& meta,
                const std::string& directory) {
    fs::create_directories(directory);
    save_tensor_map(named_parameters_map(*codec), (fs::path(directory) / "codec.bin").string());
    nlohmann::json j = {{"arch_hash", meta.arch_hash},
                        {"step", meta.step},
                        {"holdout_psnr_db", meta.holdout_psnr_db},
                        {"arch", codec->config().to_json()}};
    write_json(j, (fs::path(directory) / "meta.json").string());
}

LatentCodec load_codec(const std::string& directory, CodecCheckpoint* meta_out) {
    const auto meta = read_json((fs::path(directory) / "meta.json").string());
    CodecConfig arch = CodecConfig::from_json(meta.at("arch"));
    if (meta.at("arch_hash").get<std::string>() != hash_hex(arch.arch_string())) {
        throw IntegrityError("codec meta arch_hash does not match its architecture");
    }
    LatentCodec codec(arch);
    load_into_module(*codec, load_tensor_map((fs::path(directory) / "codec.bin").string()));
    if (meta_out) {
        meta_out->directory = directory;
        meta_out->arch_hash = meta.at("arch_hash").get<std::string>();
        meta_out->step = meta.at("step").get<int64_t>();
        meta_out->holdout_psnr_db = meta.at("holdout_psnr_db").get<double>();
    }
    return codec;
}

}  // namespace mvr::codec
