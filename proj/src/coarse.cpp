#include "mvrefine/coarse.hpp"

#include <cmath>

#include "mvrefine/common.hpp"
#include "mvrefine/image_io.hpp"

namespace mvr::coarse {

void DegradationConfig::validate() const {
    if (base_blur_sigma < 0 || yaw_blur_gain < 0 || noise_sigma < 0) {
        throw ValidationError("degradation parameters must be non-negative");
    }
    if (desaturation < 0 || desaturation > 1) {
        throw ValidationError("desaturation must lie in [0,1]");
    }
}

nlohmann::json DegradationConfig::to_json() const {
    return {{"base_blur_sigma", base_blur_sigma},
            {"yaw_blur_gain", yaw_blur_gain},
            {"noise_sigma", noise_sigma},
            {"desaturation", desaturation}};
}

DegradationConfig DegradationConfig::from_json(const nlohmann::json& j) {
    DegradationConfig c;
    c.base_blur_sigma = j.at("base_blur_sigma").get<double>();
    c.yaw_blur_gain = j.at("yaw_blur_gain").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.desaturation = j.at("desaturation").get<double>();
    c.validate();
    return c;
}

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
    if (sigma <= 0.0) return image.clone();
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    auto xs = torch::arange(-radius, radius + 1, torch::kFloat32);
    auto kernel = torch::exp(-(xs * xs) / static_cast<float>(2.0 * sigma * sigma));
    kernel /= kernel.sum();

    const int64_t c = image.size(0);
    auto x = image.unsqueeze(0);  // (1,C,H,W)
    auto kh = kernel.view({1, 1, 1, -1}).repeat({c, 1, 1, 1});
    auto kv = kernel.view({1, 1, -1, 1}).repeat({c, 1, 1, 1});

    namespace F = torch::nn::functional;
    x = F::pad(x, F::PadFuncOptions({radius, radius, 0, 0}).mode(torch::kReflect));
    x = F::conv2d(x, kh, F::Conv2dFuncOptions().groups(c));
    x = F::pad(x, F::PadFuncOptions({0, 0, radius, radius}).mode(torch::kReflect));
    x = F::conv2d(x, kv, F::Conv2dFuncOptions().groups(c));
    return x.squeeze(0);
}

CoarseView degrade(const torch::Tensor& ground_truth, const synthdata::CameraPose& pose,
                   const DegradationConfig& config, uint64_t rng_seed,
                   int64_t source_identity_seed) {
    validate_image(ground_truth, "degrade input");
    pose.validate();
    config.validate();

    const double sigma = config.base_blur_sigma + config.yaw_blur_gain * std::abs(pose.yaw_deg);
    auto out = gaussian_blur(ground_truth, sigma);

    if (config.noise_sigma > 0.0) {
        auto gen = at::detail::createCPUGenerator(rng_seed);
        auto noise = torch::randn(out.sizes(), gen, torch::kFloat32);
        out = out + static_cast<float>(config.noise_sigma) * noise;
    }
    if (config.desaturation > 0.0) {
        const auto mean = out.mean();
        out = (1.0 - config.desaturation) * out + config.desaturation * mean;
    }
    return CoarseView{out.clamp(0, 1), pose, source_identity_seed};
}

torch::Tensor warp_yaw(const torch::Tensor& reference, double yaw_deg) {
    validate_image(reference, "warp input");
    const int64_t h = reference.size(1);
    const int64_t w = reference.size(2);
    const double yaw = yaw_deg * M_PI / 180.0;
    const double cx = (w - 1) / 2.0;
    const double radius = w / 2.0;

    auto out = torch::empty_like(reference);
    auto src = reference.accessor<float, 3>();
    auto dst = out.accessor<float, 3>();
    for (int64_t x = 0; x < w; ++x) {
        const double az_out = std::asin(std::clamp((x - cx) / radius, -1.0, 1.0));
        const double az_src = az_out - yaw;
        double sx;
        if (az_src <= -M_PI / 2) {
            sx = 0;
        } else if (az_src >= M_PI / 2) {
            sx = w - 1;
        } else {
            sx = cx + radius * std::sin(az_src);
        }
        const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sx)), 0, w - 1);
        const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
        const float t = static_cast<float>(sx - static_cast<double>(x0));
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t y = 0; y < h; ++y) {
                dst[c][y][x] = (1.0f - t) * src[c][y][x0] + t * src[c][y][x1];
            }
        }
    }
    return out.clamp(0, 1);
}

CoarseView synthesize_from_reference(const torch::Tensor& reference,
                                     const synthdata::CameraPose& pose,
                                     const DegradationConfig& config, uint64_t rng_seed) {
    auto warped = warp_yaw(reference, pose.yaw_deg);
    return degrade(warped, pose, config, rng_seed);
}

}  // namespace mvr::coarse
