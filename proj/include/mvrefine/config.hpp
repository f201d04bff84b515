#pragma once

#include <string>
#include <vector>

#include "mvrefine/codec.hpp"
#include "mvrefine/metrics.hpp"
#include "mvrefine/synthdata.hpp"
#include "mvrefine/trainer.hpp"
#include "mvrefine/vendor_json.hpp"

namespace mvr::config {

struct DataConfig {
    int resolution = 64;
    int view_count = 2;
    int train_identities = 200;
    int eval_identities = 20;
    int64_t train_seed_base = 0;
    int64_t eval_seed_base = 100000;
    double yaw_range = 60.0;
    double pitch_range = 10.0;
    synthdata::IdentityRegime regime;                     // wide pretraining domain
    synthdata::IdentityRegime finetune_regime{0.3, 0.7, 2.0};  // narrowed stand-in domain

    nlohmann::json to_json() const;
};

struct EvalConfig {
    int timing_trials = 20;
    std::vector<double> noise_levels = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<double> angles = {-90, -60, -30, 0, 30, 60, 90};

    nlohmann::json to_json() const;
};

// The full run document. Parsing is strict: unknown keys anywhere are
// rejected; missing keys fall back to defaults.
struct RunConfig {
    uint64_t seed = 1234;
    DataConfig data;
    codec::CodecConfig codec_arch;
    codec::CodecTrainConfig codec_train;
    metrics::EmbedderTrainConfig embedder;
    trainer::TrainConfig train;
    EvalConfig eval;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    std::string hash() const;
};

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides);

// "a.b.c=value" applied onto the JSON document; values parse as JSON scalars
// with plain-string fallback.
void apply_override(nlohmann::json& doc, const std::string& assignment);

void write_resolved_snapshot(const RunConfig& config, const std::string& command,
                             const std::vector<std::string>& overrides,
                             const std::string& out_dir);

}  // namespace mvr::config
