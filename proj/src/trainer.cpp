#include "mvrefine/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mvrefine/common.hpp"
#include "mvrefine/metrics.hpp"
#include "mvrefine/serialize.hpp"
#include "mvrefine/synthdata.hpp"

namespace fs = std::filesystem;

namespace mvr::trainer {

void TrainConfig::validate() const {
    if (stage != "base" && stage != "pretrain" && stage != "finetune") {
        throw ValidationError("train stage must be one of base|pretrain|finetune");
    }
    if (steps < 0) throw ValidationError("steps must be non-negative");
    if (batch_size < 1) throw ValidationError("batch size must be positive");
    if (view_count < 1) throw ValidationError("view count must be at least 1");
    if (lr_g <= 0 || lr_d <= 0 || base_lr <= 0) {
        throw ValidationError("learning rates must be positive");
    }
    if (eval_every < 1) throw ValidationError("eval_every must be positive");
    if (noise_levels.empty()) throw ValidationError("noise level set must not be empty");
    for (double r : noise_levels) {
        bool member = false;
        for (double canon : refiner::kTrainNoiseLevels) {
            if (std::abs(r - canon) < 1e-9) member = true;
        }
        if (!member) {
            throw ValidationError("noise levels must be a subset of {0.0, 0.1, ..., 0.5}");
        }
    }
    if (inference_noise < 0.0 || inference_noise > 0.5) {
        throw ValidationError("inference noise must lie in [0, 0.5]");
    }
    degradation.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage", stage},
            {"steps", steps},
            {"batch_size", batch_size},
            {"view_count", view_count},
            {"lr_g", lr_g},
            {"lr_d", lr_d},
            {"base_lr", base_lr},
            {"grad_clip", grad_clip},
            {"weights", weights.to_json()},
            {"noise_levels", noise_levels},
            {"degradation", degradation.to_json()},
            {"seed", seed},
            {"eval_every", eval_every},
            {"inference_noise", inference_noise},
            {"refiner_arch", refiner_arch.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage = j.at("stage").get<std::string>();
    c.steps = j.at("steps").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.view_count = j.at("view_count").get<int>();
    c.lr_g = j.at("lr_g").get<double>();
    c.lr_d = j.at("lr_d").get<double>();
    c.base_lr = j.at("base_lr").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.weights = adversary::LossWeights::from_json(j.at("weights"));
    c.noise_levels = j.at("noise_levels").get<std::vector<double>>();
    c.degradation = coarse::DegradationConfig::from_json(j.at("degradation"));
    c.seed = j.at("seed").get<uint64_t>();
    c.eval_every = j.at("eval_every").get<int64_t>();
    c.inference_noise = j.at("inference_noise").get<double>();
    c.refiner_arch = refiner::RefinerConfig::from_json(j.at("refiner_arch"));
    c.validate();
    return c;
}

std::string TrainConfig::semantic_hash() const {
    auto j = to_json();
    j.erase("steps");
    return hash_hex(j.dump());
}

Adam::Adam(std::vector<torch::Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(torch::zeros_like(p));
        v_.push_back(torch::zeros_like(p));
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) {
        if (p.grad().defined()) p.mutable_grad().zero_();
    }
}

void Adam::step() {
    torch::NoGradGuard ng;
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].grad().defined()) continue;
        auto g = params_[i].grad();
        m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
        v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
        params_[i].addcdiv_(m_[i] / bc1, (v_[i] / bc2).sqrt() + eps_, -lr_);
    }
}

void Adam::export_state(std::map<std::string, torch::Tensor>& out,
                        const std::string& prefix) const {
    for (size_t i = 0; i < params_.size(); ++i) {
        out[prefix + ".m." + std::to_string(i)] = m_[i];
        out[prefix + ".v." + std::to_string(i)] = v_[i];
    }
    out[prefix + ".t"] = torch::tensor(t_, torch::kInt64);
}

void Adam::import_state(const std::map<std::string, torch::Tensor>& in,
                        const std::string& prefix) {
    torch::NoGradGuard ng;
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].copy_(in.at(prefix + ".m." + std::to_string(i)));
        v_[i].copy_(in.at(prefix + ".v." + std::to_string(i)));
    }
    t_ = in.at(prefix + ".t").item<int64_t>();
}

uint64_t step_seed(uint64_t seed, int64_t step, int64_t slot) {
    uint64_t z = seed ^ (static_cast<uint64_t>(step + 1) * 0x9e3779b97f4a7c15ull) ^
                 (static_cast<uint64_t>(slot + 1) * 0xbf58476d1ce4e5b9ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

nlohmann::json CheckpointManifest::to_json() const {
    return {{"stage", stage},
            {"step", step},
            {"config", config},
            {"config_hash", config_hash},
            {"files", file_hashes},
            {"codec_hash", codec_hash},
            {"base_hash", base_hash},
            {"train_manifest_hash", train_manifest_hash},
            {"eval_manifest_hash", eval_manifest_hash},
            {"train_seeds", train_seeds},
            {"metrics", metrics}};
}

CheckpointManifest CheckpointManifest::from_json(const nlohmann::json& j) {
    CheckpointManifest m;
    try {
        m.stage = j.at("stage").get<std::string>();
        m.step = j.at("step").get<int64_t>();
        m.config = j.at("config");
        m.config_hash = j.at("config_hash").get<std::string>();
        m.file_hashes = j.at("files").get<std::map<std::string, std::string>>();
        m.codec_hash = j.at("codec_hash").get<std::string>();
        m.base_hash = j.at("base_hash").get<std::string>();
        m.train_manifest_hash = j.at("train_manifest_hash").get<std::string>();
        m.eval_manifest_hash = j.at("eval_manifest_hash").get<std::string>();
        m.train_seeds = j.at("train_seeds").get<std::vector<int64_t>>();
        m.metrics = j.at("metrics");
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    return m;
}

CheckpointManifest read_checkpoint_manifest(const std::string& directory) {
    return CheckpointManifest::from_json(
        read_json((fs::path(directory) / "manifest.json").string()));
}

void verify_checkpoint_files(const std::string& directory, const CheckpointManifest& manifest) {
    for (const auto& [name, hash] : manifest.file_hashes) {
        const auto path = (fs::path(directory) / name).string();
        if (!fs::exists(path)) {
            throw IntegrityError("checkpoint file missing: " + name);
        }
        if (hex64(fnv1a64_file(path)) != hash) {
            throw IntegrityError("checkpoint file does not match its manifest hash: " + name);
        }
    }
}

namespace {

std::string dataset_manifest_hash(const std::string& dataset_dir) {
    return hex64(fnv1a64_file((fs::path(dataset_dir) / "manifest.json").string()));
}

void check_identity_disjoint(const synthdata::DatasetManifest& train,
                             const synthdata::DatasetManifest& eval) {
    std::set<int64_t> train_seeds(train.seeds().begin(), train.seeds().end());
    for (int64_t s : eval.seeds()) {
        if (train_seeds.count(s)) {
            throw ValidationError("train and eval datasets share identity seed " +
                                  std::to_string(s));
        }
    }
}

struct StepBatch {
    torch::Tensor inputs;   // (B*(V+1), 3, H, W): reference + coarse views
    torch::Tensor targets;  // (B*V, 3, H, W): ground-truth novel views
    refiner::NoiseLevel level;
    uint64_t noise_seed = 0;
};

StepBatch assemble_step_batch(const std::vector<synthdata::SceneBundle>& bundles,
                              const TrainConfig& cfg, int64_t step) {
    auto gen = at::detail::createCPUGenerator(step_seed(cfg.seed, step, 0));
    auto idx = torch::randint(0, static_cast<int64_t>(bundles.size()), {cfg.batch_size}, gen,
                              torch::TensorOptions().dtype(torch::kLong));
    StepBatch out;
    out.level = refiner::sample_train_noise_level(gen, cfg.noise_levels);
    out.noise_seed = step_seed(cfg.seed, step, 8);

    std::vector<torch::Tensor> inputs, targets;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& bundle = bundles[static_cast<size_t>(idx[b].item<int64_t>())];
        if (static_cast<int>(bundle.targets.size()) != cfg.view_count) {
            throw ValidationError("dataset view count does not match training config");
        }
        inputs.push_back(bundle.reference);
        for (int k = 0; k < cfg.view_count; ++k) {
            auto cv = coarse::degrade(bundle.targets[static_cast<size_t>(k)],
                                      bundle.target_poses[static_cast<size_t>(k)], cfg.degradation,
                                      step_seed(cfg.seed, step, 16 + b * cfg.view_count + k),
                                      bundle.identity.seed);
            inputs.push_back(cv.image);
            targets.push_back(bundle.targets[static_cast<size_t>(k)]);
        }
    }
    out.inputs = torch::stack(inputs);
    out.targets = torch::stack(targets);
    return out;
}

// Encode inputs (no grad), add noise, run the single U-Net pass, decode the
// novel-view slots with gradients flowing back through the frozen decoder.
torch::Tensor forward_refined(const StepBatch& batch, const TrainConfig& cfg,
                              codec::LatentCodec& codec, refiner::RefinerModel& model) {
    torch::Tensor latents;
    {
        torch::NoGradGuard ng;
        latents = codec->encode(batch.inputs);
    }
    const auto s = latents.sizes();
    auto batch5 = latents.reshape({cfg.batch_size, cfg.view_count + 1, s[1], s[2], s[3]});
    auto noisy = refiner::add_noise(refiner::ViewLatentBatch{batch5}, batch.level,
                                    batch.noise_seed);
    auto out5 = model.unet->forward(noisy.data);
    auto novel = out5.narrow(1, 1, cfg.view_count)
                     .reshape({static_cast<int64_t>(cfg.batch_size) * cfg.view_count, s[1], s[2],
                               s[3]});
    return codec->decode(novel);
}

nlohmann::json eval_snapshot(const std::vector<synthdata::SceneBundle>& eval_bundles,
                             const TrainConfig& cfg, codec::LatentCodec& codec,
                             refiner::RefinerModel& model) {
    torch::NoGradGuard ng;
    double refined_psnr = 0, refined_ssim = 0, coarse_psnr = 0, coarse_ssim = 0;
    int64_t count = 0;
    const size_t limit = std::min<size_t>(eval_bundles.size(), 8);
    for (size_t i = 0; i < limit; ++i) {
        const auto& bundle = eval_bundles[i];
        std::vector<coarse::CoarseView> views;
        for (size_t k = 0; k < bundle.targets.size(); ++k) {
            views.push_back(coarse::degrade(
                bundle.targets[k], bundle.target_poses[k], cfg.degradation,
                metrics::eval_degrade_seed(bundle.identity.seed, static_cast<int>(k) + 1),
                bundle.identity.seed));
        }
        auto refined = refiner::refine(bundle.reference, views, model, codec,
                                       refiner::NoiseLevel(cfg.inference_noise));
        for (size_t v = 0; v < refined.size(); ++v) {
            refined_psnr += metrics::psnr(refined[v], bundle.targets[v]);
            refined_ssim += metrics::ssim(refined[v], bundle.targets[v]);
            coarse_psnr += metrics::psnr(views[v].image, bundle.targets[v]);
            coarse_ssim += metrics::ssim(views[v].image, bundle.targets[v]);
            ++count;
        }
    }
    const double n = static_cast<double>(std::max<int64_t>(1, count));
    return {{"refined_psnr", refined_psnr / n},
            {"refined_ssim", refined_ssim / n},
            {"coarse_psnr", coarse_psnr / n},
            {"coarse_ssim", coarse_ssim / n}};
}

std::map<std::string, std::string> hash_checkpoint_files(const std::string& directory) {
    std::map<std::string, std::string> hashes;
    for (const auto& entry : fs::recursive_directory_iterator(directory)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), directory).generic_string();
        if (rel == "manifest.json" || rel == "log.jsonl") continue;
        hashes[rel] = hex64(fnv1a64_file(entry.path().string()));
    }
    return hashes;
}

void append_log(const std::string& out_dir, const nlohmann::json& line) {
    std::ofstream log((fs::path(out_dir) / "log.jsonl").string(), std::ios::app);
    log << line.dump() << "\n";
}

}  // namespace

CheckpointManifest train_base(const TrainConfig& config, const std::string& train_data_dir,
                              const std::string& eval_data_dir, const std::string& codec_dir,
                              const std::string& out_dir) {
    config.validate();
    auto train_manifest = synthdata::read_manifest(train_data_dir);
    auto eval_manifest = synthdata::read_manifest(eval_data_dir);
    check_identity_disjoint(train_manifest, eval_manifest);
    auto train_bundles = synthdata::read_dataset(train_data_dir);
    auto eval_bundles = synthdata::read_dataset(eval_data_dir);

    auto codec = codec::load_codec(codec_dir);
    for (auto& p : codec->parameters()) p.set_requires_grad(false);
    const auto codec_hash = module_hash(*codec);

    torch::manual_seed(config.seed);
    auto model = refiner::make_refiner(config.refiner_arch, config.view_count);

    Adam adam(refiner::base_parameters(model), config.base_lr);
    fs::create_directories(out_dir);

    nlohmann::json last_eval;
    for (int64_t step = 1; step <= config.steps; ++step) {
        auto batch = assemble_step_batch(train_bundles, config, step);
        auto refined = forward_refined(batch, config, codec, model);

        torch::Tensor gt_latents;
        {
            torch::NoGradGuard ng;
            gt_latents = codec->encode(batch.targets);
        }
        auto refined_latents = codec->encode(refined);
        auto loss = torch::mse_loss(refined, batch.targets) +
                    0.25 * torch::mse_loss(refined_latents, gt_latents);

        const double loss_val = loss.item<double>();
        if (!std::isfinite(loss_val)) {
            throw NumericalError("base training loss became non-finite at step " +
                                 std::to_string(step) + "; no checkpoint was written");
        }
        adam.zero_grad();
        loss.backward();
        if (config.grad_clip > 0) {
            torch::nn::utils::clip_grad_norm_(refiner::base_parameters(model), config.grad_clip);
        }
        adam.step();

        if (step % config.eval_every == 0 || step == config.steps) {
            last_eval = eval_snapshot(eval_bundles, config, codec, model);
            append_log(out_dir, {{"step", step}, {"loss", loss_val}, {"eval", last_eval}});
        } else if (step % 50 == 0) {
            append_log(out_dir, {{"step", step}, {"loss", loss_val}});
        }
    }

    refiner::save_refiner(model, out_dir);
    CheckpointManifest manifest;
    manifest.stage = config.stage;
    manifest.step = config.steps;
    manifest.config = config.to_json();
    manifest.config_hash = config.semantic_hash();
    manifest.codec_hash = codec_hash;
    manifest.base_hash = refiner::base_hash(model);
    manifest.train_manifest_hash = dataset_manifest_hash(train_data_dir);
    manifest.eval_manifest_hash = dataset_manifest_hash(eval_data_dir);
    manifest.train_seeds = train_manifest.seeds();
    manifest.metrics = last_eval;
    manifest.file_hashes = hash_checkpoint_files(out_dir);
    write_json(manifest.to_json(), (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

CheckpointManifest train_stage(const TrainConfig& config, const std::string& train_data_dir,
                               const std::string& eval_data_dir, const std::string& codec_dir,
                               const std::string& init_dir, const std::string& out_dir,
                               bool resume) {
    config.validate();
    if (config.stage == "base") {
        throw ValidationError("use train_base for the base stage");
    }
    auto train_manifest = synthdata::read_manifest(train_data_dir);
    auto eval_manifest = synthdata::read_manifest(eval_data_dir);
    check_identity_disjoint(train_manifest, eval_manifest);
    auto train_bundles = synthdata::read_dataset(train_data_dir);
    auto eval_bundles = synthdata::read_dataset(eval_data_dir);

    if (codec_dir.empty() || !fs::exists(fs::path(codec_dir) / "codec.bin")) {
        throw ValidationError("LoRA training requires a trained codec checkpoint (configuration)");
    }
    auto codec = codec::load_codec(codec_dir);
    for (auto& p : codec->parameters()) p.set_requires_grad(false);
    const auto codec_hash = module_hash(*codec);

    torch::manual_seed(config.seed);

    refiner::RefinerModel model;
    adversary::PatchDiscriminator disc{nullptr};
    int64_t start_step = 0;

    if (resume) {
        auto manifest = read_checkpoint_manifest(init_dir);
        if (manifest.config_hash != config.semantic_hash()) {
            throw IntegrityError("resume refused: training config hash does not match checkpoint");
        }
        if (manifest.codec_hash != codec_hash) {
            throw IntegrityError("resume refused: codec weights differ from checkpoint");
        }
        if (manifest.train_manifest_hash != dataset_manifest_hash(train_data_dir) ||
            manifest.eval_manifest_hash != dataset_manifest_hash(eval_data_dir)) {
            throw IntegrityError("resume refused: dataset manifests differ from checkpoint");
        }
        verify_checkpoint_files(init_dir, manifest);
        model = refiner::load_refiner(init_dir);
        disc = adversary::PatchDiscriminator(32);
        load_into_module(*disc,
                         load_tensor_map((fs::path(init_dir) / "disc.bin").string()));
        start_step = manifest.step;
    } else {
        model = refiner::load_refiner(init_dir);
        disc = adversary::PatchDiscriminator(32);
    }
    refiner::freeze_base(model);
    if (model.view_count != config.view_count) {
        model.view_count = config.view_count;
    }

    const std::string frozen_base_hash = refiner::base_hash(model);

    Adam adam_g(refiner::lora_parameters(model), config.lr_g);
    std::vector<torch::Tensor> disc_params;
    for (auto& p : disc->parameters()) disc_params.push_back(p);
    Adam adam_d(disc_params, config.lr_d);

    if (resume) {
        auto optim = load_tensor_map((fs::path(init_dir) / "optim.bin").string());
        adam_g.import_state(optim, "adam_g");
        adam_d.import_state(optim, "adam_d");
    }

    fs::create_directories(out_dir);
    nlohmann::json last_eval;
    std::string last_good_checkpoint = resume ? init_dir : "";

    auto write_checkpoint = [&](int64_t step) {
        refiner::save_refiner(model, out_dir);
        save_tensor_map(named_parameters_map(*disc), (fs::path(out_dir) / "disc.bin").string());
        std::map<std::string, torch::Tensor> optim;
        adam_g.export_state(optim, "adam_g");
        adam_d.export_state(optim, "adam_d");
        save_tensor_map(optim, (fs::path(out_dir) / "optim.bin").string());

        CheckpointManifest manifest;
        manifest.stage = config.stage;
        manifest.step = step;
        manifest.config = config.to_json();
        manifest.config_hash = config.semantic_hash();
        manifest.codec_hash = codec_hash;
        manifest.base_hash = refiner::base_hash(model);
        manifest.train_manifest_hash = dataset_manifest_hash(train_data_dir);
        manifest.eval_manifest_hash = dataset_manifest_hash(eval_data_dir);
        manifest.train_seeds = train_manifest.seeds();
        manifest.metrics = last_eval;
        manifest.file_hashes = hash_checkpoint_files(out_dir);
        write_json(manifest.to_json(), (fs::path(out_dir) / "manifest.json").string());
        return manifest;
    };

    CheckpointManifest manifest = write_checkpoint(start_step);

    for (int64_t step = start_step + 1; step <= config.steps; ++step) {
        auto batch = assemble_step_batch(train_bundles, config, step);
        auto refined = forward_refined(batch, config, codec, model);

        auto gloss = adversary::generator_loss(refined, batch.targets, disc, codec,
                                               config.weights);
        adam_g.zero_grad();
        adam_d.zero_grad();
        gloss.total.backward();
        if (config.grad_clip > 0) {
            torch::nn::utils::clip_grad_norm_(refiner::lora_parameters(model), config.grad_clip);
        }
        adam_g.step();

        auto dloss = adversary::discriminator_loss(refined.detach(), batch.targets, disc);
        const double dloss_val = dloss.item<double>();
        adam_d.zero_grad();
        dloss.backward();
        adam_d.step();

        if (!std::isfinite(gloss.report.total_g) || !std::isfinite(dloss_val)) {
            throw NumericalError(
                "training loss became non-finite at step " + std::to_string(step) +
                "; last good checkpoint: " +
                (last_good_checkpoint.empty() ? "none" : last_good_checkpoint));
        }

        if (step % config.eval_every == 0 || step == config.steps) {
            last_eval = eval_snapshot(eval_bundles, config, codec, model);
            append_log(out_dir, {{"step", step},
                                 {"loss_g", gloss.report.total_g},
                                 {"recon", gloss.report.recon_l2},
                                 {"perceptual", gloss.report.perceptual},
                                 {"gan_g", gloss.report.gan_g},
                                 {"gan_d", dloss_val},
                                 {"eval", last_eval}});
            manifest = write_checkpoint(step);
            last_good_checkpoint = out_dir;
        } else if (step % 50 == 0) {
            append_log(out_dir, {{"step", step},
                                 {"loss_g", gloss.report.total_g},
                                 {"recon", gloss.report.recon_l2},
                                 {"gan_d", dloss_val}});
        }
    }

    if (refiner::base_hash(model) != frozen_base_hash) {
        throw IntegrityError("frozen base weights changed during LoRA training");
    }
    if (module_hash(*codec) != codec_hash) {
        throw IntegrityError("frozen codec weights changed during LoRA training");
    }

    if (manifest.step != config.steps) {
        manifest = write_checkpoint(config.steps);
    }
    return manifest;
}

LoadedCheckpoint load_checkpoint(const std::string& directory) {
    LoadedCheckpoint out;
    out.manifest = read_checkpoint_manifest(directory);
    verify_checkpoint_files(directory, out.manifest);
    out.model = refiner::load_refiner(directory);
    const auto disc_path = fs::path(directory) / "disc.bin";
    if (fs::exists(disc_path)) {
        out.disc = adversary::PatchDiscriminator(32);
        load_into_module(*out.disc, load_tensor_map(disc_path.string()));
    }
    return out;
}

}  // namespace mvr::trainer
