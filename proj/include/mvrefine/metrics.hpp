#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <vector>

#include "mvrefine/coarse.hpp"
#include "mvrefine/codec.hpp"
#include "mvrefine/synthdata.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::refiner {
struct RefinerModel;
}

namespace mvr::metrics {

double psnr_from_mse(double mse);  // -10*log10(mse), capped at 99 dB
double psnr(const torch::Tensor& a, const torch::Tensor& b);
double ssim(const torch::Tensor& a, const torch::Tensor& b);
double l2_error(const torch::Tensor& a, const torch::Tensor& b);

// Feature-space distance in the trained codec's encoder; a stand-in for a
// pretrained perceptual metric, not comparable to published LPIPS numbers.
double lpips_proxy(const torch::Tensor& a, const torch::Tensor& b, codec::LatentCodec& codec);

// Small identity classifier; the penultimate layer (L2-normalized) is the
// embedding used for the identity and distribution metrics.
class IdentityEmbedderNetImpl : public torch::nn::Module {
public:
    IdentityEmbedderNetImpl(int embed_dim, int num_classes);
    torch::Tensor embed(const torch::Tensor& images);   // (N,3,H,W) -> (N,D), unit norm
    torch::Tensor logits(const torch::Tensor& images);  // (N,3,H,W) -> (N,K)

private:
    torch::nn::Conv2d c1_{nullptr}, c2_{nullptr}, c3_{nullptr};
    torch::nn::Linear fc_embed_{nullptr}, fc_cls_{nullptr};
};
TORCH_MODULE(IdentityEmbedderNet);

struct IdentityEmbedder {
    IdentityEmbedderNet net{nullptr};
    bool trained = false;
    double holdout_accuracy = 0.0;
    int num_classes = 0;
    int embed_dim = 64;

    torch::Tensor embed(const torch::Tensor& images) const;
};

struct EmbedderTrainConfig {
    int64_t steps = 800;
    int batch_size = 32;
    double lr = 1e-3;
    uint64_t seed = 7;
    int embed_dim = 64;

    nlohmann::json to_json() const;
    static EmbedderTrainConfig from_json(const nlohmann::json& j);
};

IdentityEmbedder train_embedder(const std::vector<synthdata::SceneBundle>& bundles,
                                const EmbedderTrainConfig& config);
void save_embedder(const IdentityEmbedder& embedder, const std::string& directory);
IdentityEmbedder load_embedder(const std::string& directory);

double id_consistency(const torch::Tensor& a, const torch::Tensor& b,
                      const IdentityEmbedder& embedder);

double fid_from_embeddings(const torch::Tensor& set_a, const torch::Tensor& set_b);
double fid_proxy(const std::vector<torch::Tensor>& set_a, const std::vector<torch::Tensor>& set_b,
                 const IdentityEmbedder& embedder);

struct EvalReport {
    std::map<std::string, double> scalars;
    struct Row {
        double key = 0.0;
        std::map<std::string, double> values;
    };
    std::vector<Row> noise_table;  // key: noise level r
    std::vector<Row> angle_table;  // key: yaw degrees
    double registration_ms = 0.0;
    double generation_ms = 0.0;
    std::string config_hash;
    std::map<std::string, std::string> notes;

    nlohmann::json to_json() const;
    void write_csv(const std::vector<Row>& table, const std::string& key_name,
                   const std::string& path) const;
};

struct EvalContext {
    codec::LatentCodec codec{nullptr};
    IdentityEmbedder embedder;
    coarse::DegradationConfig degradation;
    double inference_noise = 0.1;
};

// Deterministic seed for degrading one eval view.
uint64_t eval_degrade_seed(int64_t identity_seed, int view_index);

EvalReport evaluate_model(refiner::RefinerModel& model, EvalContext& ctx,
                          const std::vector<synthdata::SceneBundle>& eval_bundles,
                          int timing_trials = 20);

EvalReport ablate_noise(refiner::RefinerModel& model, EvalContext& ctx,
                        const std::vector<synthdata::SceneBundle>& eval_bundles,
                        const std::vector<double>& levels = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5});

EvalReport ablate_rotation(refiner::RefinerModel& model, EvalContext& ctx,
                           const std::vector<synthdata::SceneBundle>& eval_bundles,
                           const std::vector<double>& angles = {-90, -60, -30, 0, 30, 60, 90});

// (registration_ms, generation_ms): coarse-view production vs full refinement
// per call, medians over n_trials.
std::pair<double, double> timing(refiner::RefinerModel& model, EvalContext& ctx,
                                 const synthdata::SceneBundle& bundle, int n_trials = 20);

}  // namespace mvr::metrics
