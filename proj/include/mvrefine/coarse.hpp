#pragma once

#include <torch/torch.h>

#include "mvrefine/synthdata.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::coarse {

// Analytic stand-in for a feed-forward avatar renderer: 3D-consistent but
// degraded views, with blur that grows as the pose leaves the frontal view.
struct DegradationConfig {
    double base_blur_sigma = 1.0;   // pixels
    double yaw_blur_gain = 0.03;    // pixels per degree of |yaw|
    double noise_sigma = 0.02;
    double desaturation = 0.15;

    void validate() const;
    nlohmann::json to_json() const;
    static DegradationConfig from_json(const nlohmann::json& j);
};

struct CoarseView {
    torch::Tensor image;
    synthdata::CameraPose pose;
    int64_t source_identity_seed = 0;
};

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma);

CoarseView degrade(const torch::Tensor& ground_truth, const synthdata::CameraPose& pose,
                   const DegradationConfig& config, uint64_t rng_seed,
                   int64_t source_identity_seed = 0);

// Cylindrical-arc column remap used when only a reference image is available
// (render command): approximates a rigid head rotation of the whole frame.
torch::Tensor warp_yaw(const torch::Tensor& reference, double yaw_deg);

CoarseView synthesize_from_reference(const torch::Tensor& reference,
                                     const synthdata::CameraPose& pose,
                                     const DegradationConfig& config, uint64_t rng_seed);

}  // namespace mvr::coarse
