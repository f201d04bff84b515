#include "mvrefine/config.hpp"

#include <filesystem>
#include <set>

#include "mvrefine/common.hpp"
#include "mvrefine/serialize.hpp"

namespace fs = std::filesystem;

namespace mvr::config {

namespace {

void require_object(const nlohmann::json& j, const std::string& ctx) {
    if (!j.is_object()) throw ValidationError("config section '" + ctx + "' must be an object");
}

void reject_unknown_keys(const nlohmann::json& j, const std::string& ctx,
                         const std::set<std::string>& allowed) {
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ValidationError("unknown config key '" + ctx + "." + key + "'");
        }
    }
}

template <typename T>
void patch(const nlohmann::json& j, const char* key, T& value) {
    if (j.contains(key)) value = j.at(key).get<T>();
}

synthdata::IdentityRegime parse_regime(const nlohmann::json& j, const std::string& ctx,
                                       synthdata::IdentityRegime base) {
    require_object(j, ctx);
    reject_unknown_keys(j, ctx, {"geometry_lo", "geometry_hi", "texture_freq_scale"});
    patch(j, "geometry_lo", base.geometry_lo);
    patch(j, "geometry_hi", base.geometry_hi);
    patch(j, "texture_freq_scale", base.texture_freq_scale);
    return base;
}

DataConfig parse_data(const nlohmann::json& j, DataConfig base) {
    require_object(j, "data");
    reject_unknown_keys(j, "data",
                        {"resolution", "view_count", "train_identities", "eval_identities",
                         "train_seed_base", "eval_seed_base", "yaw_range", "pitch_range", "regime",
                         "finetune_regime"});
    patch(j, "resolution", base.resolution);
    patch(j, "view_count", base.view_count);
    patch(j, "train_identities", base.train_identities);
    patch(j, "eval_identities", base.eval_identities);
    patch(j, "train_seed_base", base.train_seed_base);
    patch(j, "eval_seed_base", base.eval_seed_base);
    patch(j, "yaw_range", base.yaw_range);
    patch(j, "pitch_range", base.pitch_range);
    if (j.contains("regime")) base.regime = parse_regime(j.at("regime"), "data.regime", base.regime);
    if (j.contains("finetune_regime")) {
        base.finetune_regime =
            parse_regime(j.at("finetune_regime"), "data.finetune_regime", base.finetune_regime);
    }
    return base;
}

codec::CodecConfig parse_codec_arch(const nlohmann::json& j, codec::CodecConfig base) {
    require_object(j, "codec.arch");
    reject_unknown_keys(j, "codec.arch", {"latent_channels", "base_width"});
    patch(j, "latent_channels", base.latent_channels);
    patch(j, "base_width", base.base_width);
    return base;
}

codec::CodecTrainConfig parse_codec_train(const nlohmann::json& j, codec::CodecTrainConfig base) {
    require_object(j, "codec.train");
    reject_unknown_keys(j, "codec.train",
                        {"steps", "batch_size", "lr", "seed", "holdout_fraction",
                         "include_degraded", "log_every"});
    patch(j, "steps", base.steps);
    patch(j, "batch_size", base.batch_size);
    patch(j, "lr", base.lr);
    patch(j, "seed", base.seed);
    patch(j, "holdout_fraction", base.holdout_fraction);
    patch(j, "include_degraded", base.include_degraded);
    patch(j, "log_every", base.log_every);
    return base;
}

metrics::EmbedderTrainConfig parse_embedder(const nlohmann::json& j,
                                            metrics::EmbedderTrainConfig base) {
    require_object(j, "embedder");
    reject_unknown_keys(j, "embedder", {"steps", "batch_size", "lr", "seed", "embed_dim"});
    patch(j, "steps", base.steps);
    patch(j, "batch_size", base.batch_size);
    patch(j, "lr", base.lr);
    patch(j, "seed", base.seed);
    patch(j, "embed_dim", base.embed_dim);
    return base;
}

coarse::DegradationConfig parse_degradation(const nlohmann::json& j,
                                            coarse::DegradationConfig base) {
    require_object(j, "train.degradation");
    reject_unknown_keys(j, "train.degradation",
                        {"base_blur_sigma", "yaw_blur_gain", "noise_sigma", "desaturation"});
    patch(j, "base_blur_sigma", base.base_blur_sigma);
    patch(j, "yaw_blur_gain", base.yaw_blur_gain);
    patch(j, "noise_sigma", base.noise_sigma);
    patch(j, "desaturation", base.desaturation);
    return base;
}

adversary::LossWeights parse_weights(const nlohmann::json& j, adversary::LossWeights base) {
    require_object(j, "train.weights");
    reject_unknown_keys(j, "train.weights", {"recon", "perceptual", "gan"});
    patch(j, "recon", base.recon);
    patch(j, "perceptual", base.perceptual);
    patch(j, "gan", base.gan);
    return base;
}

refiner::RefinerConfig parse_refiner_arch(const nlohmann::json& j, refiner::RefinerConfig base) {
    require_object(j, "train.refiner_arch");
    reject_unknown_keys(j, "train.refiner_arch",
                        {"latent_channels", "base_width", "heads", "lora_rank", "fixed_timestep",
                         "emb_dim"});
    patch(j, "latent_channels", base.latent_channels);
    patch(j, "base_width", base.base_width);
    patch(j, "heads", base.heads);
    patch(j, "lora_rank", base.lora_rank);
    patch(j, "fixed_timestep", base.fixed_timestep);
    patch(j, "emb_dim", base.emb_dim);
    return base;
}

trainer::TrainConfig parse_train(const nlohmann::json& j, trainer::TrainConfig base) {
    require_object(j, "train");
    reject_unknown_keys(j, "train",
                        {"stage", "steps", "batch_size", "view_count", "lr_g", "lr_d", "base_lr",
                         "grad_clip", "weights", "noise_levels", "degradation", "seed",
                         "eval_every", "inference_noise", "refiner_arch"});
    patch(j, "stage", base.stage);
    patch(j, "steps", base.steps);
    patch(j, "batch_size", base.batch_size);
    patch(j, "view_count", base.view_count);
    patch(j, "lr_g", base.lr_g);
    patch(j, "lr_d", base.lr_d);
    patch(j, "base_lr", base.base_lr);
    patch(j, "grad_clip", base.grad_clip);
    if (j.contains("weights")) base.weights = parse_weights(j.at("weights"), base.weights);
    patch(j, "noise_levels", base.noise_levels);
    if (j.contains("degradation")) {
        base.degradation = parse_degradation(j.at("degradation"), base.degradation);
    }
    patch(j, "seed", base.seed);
    patch(j, "eval_every", base.eval_every);
    patch(j, "inference_noise", base.inference_noise);
    if (j.contains("refiner_arch")) {
        base.refiner_arch = parse_refiner_arch(j.at("refiner_arch"), base.refiner_arch);
    }
    return base;
}

EvalConfig parse_eval(const nlohmann::json& j, EvalConfig base) {
    require_object(j, "eval");
    reject_unknown_keys(j, "eval", {"timing_trials", "noise_levels", "angles"});
    patch(j, "timing_trials", base.timing_trials);
    patch(j, "noise_levels", base.noise_levels);
    patch(j, "angles", base.angles);
    return base;
}

}  // namespace

nlohmann::json DataConfig::to_json() const {
    return {{"resolution", resolution},
            {"view_count", view_count},
            {"train_identities", train_identities},
            {"eval_identities", eval_identities},
            {"train_seed_base", train_seed_base},
            {"eval_seed_base", eval_seed_base},
            {"yaw_range", yaw_range},
            {"pitch_range", pitch_range},
            {"regime", regime.to_json()},
            {"finetune_regime", finetune_regime.to_json()}};
}

nlohmann::json EvalConfig::to_json() const {
    return {{"timing_trials", timing_trials}, {"noise_levels", noise_levels}, {"angles", angles}};
}

nlohmann::json RunConfig::to_json() const {
    return {{"seed", seed},
            {"data", data.to_json()},
            {"codec", {{"arch", codec_arch.to_json()}, {"train", codec_train.to_json()}}},
            {"embedder", embedder.to_json()},
            {"train", train.to_json()},
            {"eval", eval.to_json()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    require_object(j, "<root>");
    reject_unknown_keys(j, "<root>", {"seed", "data", "codec", "embedder", "train", "eval"});
    RunConfig c;
    patch(j, "seed", c.seed);
    if (j.contains("data")) c.data = parse_data(j.at("data"), c.data);
    if (j.contains("codec")) {
        require_object(j.at("codec"), "codec");
        reject_unknown_keys(j.at("codec"), "codec", {"arch", "train"});
        if (j.at("codec").contains("arch")) {
            c.codec_arch = parse_codec_arch(j.at("codec").at("arch"), c.codec_arch);
        }
        if (j.at("codec").contains("train")) {
            c.codec_train = parse_codec_train(j.at("codec").at("train"), c.codec_train);
        }
    }
    if (j.contains("embedder")) c.embedder = parse_embedder(j.at("embedder"), c.embedder);
    if (j.contains("train")) c.train = parse_train(j.at("train"), c.train);
    if (j.contains("eval")) c.eval = parse_eval(j.at("eval"), c.eval);

    if (c.data.view_count < 1 || c.data.view_count > 16) {
        throw ValidationError("data.view_count must lie in [1, 16]");
    }
    if (c.data.resolution != 32 && c.data.resolution != 64 && c.data.resolution != 128 &&
        c.data.resolution != 256) {
        throw ValidationError("data.resolution must be one of {32, 64, 128, 256}");
    }
    c.train.validate();
    return c;
}

std::string RunConfig::hash() const { return hash_hex(to_json().dump()); }

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValidationError("override must have the form key.path=value: " + assignment);
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // plain string
    }

    nlohmann::json* node = &doc;
    size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ValidationError("override path has an empty segment: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    nlohmann::json doc = nlohmann::json::object();
    if (!config_path.empty()) doc = read_json(config_path);
    for (const auto& ov : overrides) apply_override(doc, ov);
    return RunConfig::from_json(doc);
}

void write_resolved_snapshot(const RunConfig& config, const std::string& command,
                             const std::vector<std::string>& overrides,
                             const std::string& out_dir) {
    fs::create_directories(out_dir);
    nlohmann::json snap = {{"command", command},
                           {"overrides", overrides},
                           {"config", config.to_json()},
                           {"config_hash", config.hash()}};
    write_json(snap, (fs::path(out_dir) / "config.resolved.json").string());
}

}  // namespace mvr::config
