#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mvrefine/vendor_json.hpp"

namespace mvr::synthdata {

// Sampling ranges for identity parameters. The narrowed-range / scaled-texture
// variant acts as the second training domain for the finetune stage.
struct IdentityRegime {
    double geometry_lo = 0.0;
    double geometry_hi = 1.0;
    double texture_freq_scale = 1.0;

    nlohmann::json to_json() const;
    static IdentityRegime from_json(const nlohmann::json& j);
};

struct IdentityParams {
    int64_t seed = 0;
    std::vector<double> geometry;       // head rx, head ry, eye spacing, nose length, hair extent, mouth width
    std::vector<double> palette;        // skin rgb, hair rgb, eye rgb, all raw in [0,1]
    std::vector<double> texture_freqs;  // skin, hair cycles per image
};

struct CameraPose {
    double yaw_deg = 0.0;
    double pitch_deg = 0.0;
    double distance = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static CameraPose from_json(const nlohmann::json& j);
};

struct SceneBundle {
    IdentityParams identity;
    torch::Tensor reference;             // (3,H,W), frontal (yaw = 0)
    std::vector<torch::Tensor> targets;  // V ground-truth novel views
    std::vector<CameraPose> target_poses;
    int resolution = 0;
};

// Screen-space feature centers (pixel coordinates) for one pose. The renderer
// places sprites at exactly these positions, which makes layout properties
// (yaw monotonicity, mirror symmetry) testable without image segmentation.
struct FeaturePoint {
    double x = 0.0;
    double y = 0.0;
    bool visible = true;
};
struct FeatureLayout {
    FeaturePoint nose;
    FeaturePoint mouth;
    FeaturePoint left_eye;
    FeaturePoint right_eye;
    double head_rx_px = 0.0;
    double head_ry_px = 0.0;
};

IdentityParams sample_identity(int64_t seed, const IdentityRegime& regime = {});
FeatureLayout feature_layout(const IdentityParams& identity, const CameraPose& pose,
                             int resolution);
torch::Tensor render_view(const IdentityParams& identity, const CameraPose& pose,
                          int resolution);
SceneBundle make_bundle(const IdentityParams& identity,
                        const std::vector<CameraPose>& target_poses, int resolution);

std::vector<CameraPose> sample_training_poses(uint64_t seed, int count, double yaw_range_deg,
                                              double pitch_range_deg);

struct DatasetManifest {
    int version = 1;
    int generator_version = 0;
    int resolution = 0;
    int view_count = 0;
    IdentityRegime regime;
    struct BundleRecord {
        int64_t seed = 0;
        std::vector<CameraPose> poses;
    };
    std::vector<BundleRecord> bundles;
    std::map<std::string, std::string> file_hashes;

    std::vector<int64_t> seeds() const;
    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

// Pure function of (regime, seeds, pose seeds, resolution).
std::vector<SceneBundle> generate_bundles(const IdentityRegime& regime, int64_t seed_base,
                                          int count, int view_count, int resolution,
                                          double yaw_range_deg, double pitch_range_deg);

DatasetManifest write_dataset(const std::vector<SceneBundle>& bundles,
                              const std::string& directory, const IdentityRegime& regime);
std::vector<SceneBundle> read_dataset(const std::string& directory);
DatasetManifest read_manifest(const std::string& directory);
std::vector<SceneBundle> regenerate_from_manifest(const DatasetManifest& manifest);

std::string view_filename(int64_t identity_seed, int view_index);

}  // namespace mvr::synthdata
