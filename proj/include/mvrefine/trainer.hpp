#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

#include "mvrefine/adversary.hpp"
#include "mvrefine/coarse.hpp"
#include "mvrefine/codec.hpp"
#include "mvrefine/refiner.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::trainer {

// Stages: "base" does the brief full-network reconstruction pretraining that
// is frozen afterwards; "pretrain" and "finetune" train LoRA adapters (and the
// discriminator) on the wide and narrowed data regimes respectively.
struct TrainConfig {
    std::string stage = "pretrain";
    int64_t steps = 20000;
    int batch_size = 4;
    int view_count = 2;
    double lr_g = 1e-4;
    double lr_d = 2e-4;
    double base_lr = 2e-4;
    double grad_clip = 0.0;
    adversary::LossWeights weights;
    std::vector<double> noise_levels = refiner::kTrainNoiseLevels;
    coarse::DegradationConfig degradation;
    uint64_t seed = 1234;
    int64_t eval_every = 500;
    double inference_noise = refiner::kDefaultInferenceNoise;
    refiner::RefinerConfig refiner_arch;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    // Hash over every semantically binding field; the step budget may differ
    // between a checkpoint and a resumed run.
    std::string semantic_hash() const;
};

// Adam with explicitly serializable state, so a resumed run is bit-identical
// to an uninterrupted one.
class Adam {
public:
    Adam(std::vector<torch::Tensor> params, double lr);

    void zero_grad();
    void step();

    void export_state(std::map<std::string, torch::Tensor>& out, const std::string& prefix) const;
    void import_state(const std::map<std::string, torch::Tensor>& in, const std::string& prefix);

private:
    std::vector<torch::Tensor> params_, m_, v_;
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

// Every stochastic choice of a training step derives from (seed, step, slot),
// which makes resume trivially stream-exact.
uint64_t step_seed(uint64_t seed, int64_t step, int64_t slot);

struct CheckpointManifest {
    std::string stage;
    int64_t step = 0;
    nlohmann::json config;
    std::string config_hash;
    std::map<std::string, std::string> file_hashes;
    std::string codec_hash;
    std::string base_hash;
    std::string train_manifest_hash;
    std::string eval_manifest_hash;
    std::vector<int64_t> train_seeds;
    nlohmann::json metrics;

    nlohmann::json to_json() const;
    static CheckpointManifest from_json(const nlohmann::json& j);
};

CheckpointManifest read_checkpoint_manifest(const std::string& directory);
void verify_checkpoint_files(const std::string& directory, const CheckpointManifest& manifest);

// Full-network reconstruction pretraining; writes a refiner checkpoint that
// later stages load and freeze.
CheckpointManifest train_base(const TrainConfig& config, const std::string& train_data_dir,
                              const std::string& eval_data_dir, const std::string& codec_dir,
                              const std::string& out_dir);

// One LoRA stage (pretrain or finetune). init_dir points at the checkpoint to
// start from (base checkpoint, or the previous stage); when resume is true,
// init_dir must be a mid-stage checkpoint with matching config hash.
CheckpointManifest train_stage(const TrainConfig& config, const std::string& train_data_dir,
                               const std::string& eval_data_dir, const std::string& codec_dir,
                               const std::string& init_dir, const std::string& out_dir,
                               bool resume = false);

struct LoadedCheckpoint {
    refiner::RefinerModel model;
    adversary::PatchDiscriminator disc{nullptr};
    CheckpointManifest manifest;
};
LoadedCheckpoint load_checkpoint(const std::string& directory);

}  // namespace mvr::trainer
