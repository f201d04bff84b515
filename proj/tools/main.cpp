// mvrefine: data generation, training, evaluation, ablations and rendering
// for single-step multi-view portrait refinement.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <iostream>
#include <set>

#include "mvrefine/common.hpp"
#include "mvrefine/config.hpp"
#include "mvrefine/image_io.hpp"
#include "mvrefine/metrics.hpp"
#include "mvrefine/serialize.hpp"
#include "mvrefine/trainer.hpp"

namespace fs = std::filesystem;
using namespace mvr;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config document");
    cmd->add_option("--set", args.overrides, "override config keys, e.g. --set train.steps=100");
    cmd->add_option("--out", args.out_dir, "output directory")->required();
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    size_t start = 0;
    while (start <= csv.size()) {
        const auto comma = csv.find(',', start);
        const auto token = csv.substr(start, comma == std::string::npos ? comma : comma - start);
        if (!token.empty()) out.push_back(std::stod(token));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw ValidationError("expected a comma-separated list of numbers");
    return out;
}

metrics::EvalContext make_eval_context(const config::RunConfig& cfg, const std::string& codec_dir,
                                       const std::string& embedder_dir) {
    metrics::EvalContext ctx;
    ctx.codec = codec::load_codec(codec_dir);
    for (auto& p : ctx.codec->parameters()) p.set_requires_grad(false);
    ctx.embedder = metrics::load_embedder(embedder_dir);
    ctx.degradation = cfg.train.degradation;
    ctx.inference_noise = cfg.train.inference_noise;
    return ctx;
}

void check_eval_disjoint(const trainer::CheckpointManifest& manifest,
                         const synthdata::DatasetManifest& eval_manifest) {
    std::set<int64_t> train_seeds(manifest.train_seeds.begin(), manifest.train_seeds.end());
    for (int64_t s : eval_manifest.seeds()) {
        if (train_seeds.count(s)) {
            throw ValidationError("eval dataset shares identity seed " + std::to_string(s) +
                                  " with the checkpoint's training set");
        }
    }
}

int run_generate_data(const CommonArgs& common, const std::string& split,
                      const std::string& regime_name) {
    auto cfg = config::load_run_config(common.config_path, common.overrides);
    config::write_resolved_snapshot(cfg, "generate-data", common.overrides, common.out_dir);

    const bool train_split = split == "train";
    const auto regime =
        regime_name == "finetune" ? cfg.data.finetune_regime : cfg.data.regime;
    const int count = train_split ? cfg.data.train_identities : cfg.data.eval_identities;
    const int64_t seed_base = train_split ? cfg.data.train_seed_base : cfg.data.eval_seed_base;

    auto bundles = synthdata::generate_bundles(regime, seed_base, count, cfg.data.view_count,
                                               cfg.data.resolution, cfg.data.yaw_range,
                                               cfg.data.pitch_range);
    auto manifest = synthdata::write_dataset(bundles, common.out_dir, regime);
    std::cout << "wrote " << manifest.bundles.size() << " bundles ("
              << manifest.view_count << " views each) to " << common.out_dir << "\n";
    return 0;
}

int run_train(const CommonArgs& common, const std::string& stage, const std::string& data_dir,
              const std::string& eval_data_dir, const std::string& codec_dir,
              const std::string& init_dir, bool resume, int64_t steps_override) {
    auto overrides = common.overrides;
    if (steps_override >= 0) {
        if (stage == "codec") {
            overrides.push_back("codec.train.steps=" + std::to_string(steps_override));
        } else if (stage == "embedder") {
            overrides.push_back("embedder.steps=" + std::to_string(steps_override));
        } else {
            overrides.push_back("train.steps=" + std::to_string(steps_override));
        }
    }
    if (stage == "base" || stage == "pretrain" || stage == "finetune") {
        overrides.push_back("train.stage=" + stage);
    }
    auto cfg = config::load_run_config(common.config_path, overrides);
    config::write_resolved_snapshot(cfg, "train --stage " + stage, overrides, common.out_dir);

    if (stage == "codec") {
        auto bundles = synthdata::read_dataset(data_dir);
        codec::LatentCodec codec{nullptr};
        auto meta = codec::train_codec(bundles, cfg.codec_train, cfg.codec_arch, common.out_dir,
                                       codec);
        std::cout << "codec trained: holdout PSNR " << meta.holdout_psnr_db << " dB\n";
        return 0;
    }
    if (stage == "embedder") {
        auto bundles = synthdata::read_dataset(data_dir);
        auto embedder = metrics::train_embedder(bundles, cfg.embedder);
        metrics::save_embedder(embedder, common.out_dir);
        std::cout << "embedder trained: holdout accuracy " << embedder.holdout_accuracy << "\n";
        return 0;
    }
    if (stage == "base") {
        auto manifest = trainer::train_base(cfg.train, data_dir, eval_data_dir, codec_dir,
                                            common.out_dir);
        std::cout << "base stage complete at step " << manifest.step << "\n";
        return 0;
    }
    if (stage == "pretrain" || stage == "finetune") {
        if (init_dir.empty()) {
            throw ValidationError("LoRA stages require --init (base or previous checkpoint)");
        }
        auto manifest = trainer::train_stage(cfg.train, data_dir, eval_data_dir, codec_dir,
                                             init_dir, common.out_dir, resume);
        std::cout << stage << " stage complete at step " << manifest.step << "\n";
        if (!manifest.metrics.is_null() && manifest.metrics.contains("refined_psnr")) {
            std::cout << "eval refined PSNR " << manifest.metrics["refined_psnr"]
                      << " dB (coarse " << manifest.metrics["coarse_psnr"] << " dB)\n";
        }
        return 0;
    }
    throw ValidationError("unknown training stage: " + stage);
}

int run_eval(const CommonArgs& common, const std::string& ckpt_dir, const std::string& codec_dir,
             const std::string& embedder_dir, const std::string& data_dir) {
    auto cfg = config::load_run_config(common.config_path, common.overrides);
    config::write_resolved_snapshot(cfg, "eval", common.overrides, common.out_dir);

    auto loaded = trainer::load_checkpoint(ckpt_dir);
    check_eval_disjoint(loaded.manifest, synthdata::read_manifest(data_dir));
    auto ctx = make_eval_context(cfg, codec_dir, embedder_dir);
    auto bundles = synthdata::read_dataset(data_dir);

    auto report = metrics::evaluate_model(loaded.model, ctx, bundles, cfg.eval.timing_trials);
    report.config_hash = cfg.hash();
    write_json(report.to_json(), (fs::path(common.out_dir) / "report.json").string());
    std::cout << "refined PSNR " << report.scalars.at("refined_psnr") << " dB, SSIM "
              << report.scalars.at("refined_ssim") << " (coarse "
              << report.scalars.at("coarse_psnr") << " dB / "
              << report.scalars.at("coarse_ssim") << ")\n";
    std::cout << "generation " << report.generation_ms << " ms, registration "
              << report.registration_ms << " ms\n";
    return 0;
}

int run_ablate_noise(const CommonArgs& common, const std::string& ckpt_dir,
                     const std::string& codec_dir, const std::string& embedder_dir,
                     const std::string& data_dir, const std::string& levels_csv) {
    auto cfg = config::load_run_config(common.config_path, common.overrides);
    config::write_resolved_snapshot(cfg, "ablate-noise", common.overrides, common.out_dir);

    auto levels = levels_csv.empty() ? cfg.eval.noise_levels : parse_double_list(levels_csv);
    auto loaded = trainer::load_checkpoint(ckpt_dir);
    check_eval_disjoint(loaded.manifest, synthdata::read_manifest(data_dir));
    auto ctx = make_eval_context(cfg, codec_dir, embedder_dir);
    auto bundles = synthdata::read_dataset(data_dir);

    auto report = metrics::ablate_noise(loaded.model, ctx, bundles, levels);
    report.config_hash = cfg.hash();
    write_json(report.to_json(), (fs::path(common.out_dir) / "report.json").string());
    report.write_csv(report.noise_table, "r", (fs::path(common.out_dir) / "noise.csv").string());
    std::cout << "wrote noise ablation over " << report.noise_table.size() << " levels\n";
    return 0;
}

int run_ablate_rotation(const CommonArgs& common, const std::string& ckpt_dir,
                        const std::string& codec_dir, const std::string& embedder_dir,
                        const std::string& data_dir, const std::string& angles_csv) {
    auto cfg = config::load_run_config(common.config_path, common.overrides);
    config::write_resolved_snapshot(cfg, "ablate-rotation", common.overrides, common.out_dir);

    auto angles = angles_csv.empty() ? cfg.eval.angles : parse_double_list(angles_csv);
    auto loaded = trainer::load_checkpoint(ckpt_dir);
    check_eval_disjoint(loaded.manifest, synthdata::read_manifest(data_dir));
    auto ctx = make_eval_context(cfg, codec_dir, embedder_dir);
    auto bundles = synthdata::read_dataset(data_dir);

    auto report = metrics::ablate_rotation(loaded.model, ctx, bundles, angles);
    report.config_hash = cfg.hash();
    write_json(report.to_json(), (fs::path(common.out_dir) / "report.json").string());
    report.write_csv(report.angle_table, "yaw",
                     (fs::path(common.out_dir) / "rotation.csv").string());
    std::cout << "wrote rotation ablation over " << report.angle_table.size() << " angles\n";
    return 0;
}

int run_render(const CommonArgs& common, const std::string& reference_path,
               const std::string& yaws_csv, const std::string& ckpt_dir,
               const std::string& codec_dir) {
    auto cfg = config::load_run_config(common.config_path, common.overrides);
    config::write_resolved_snapshot(cfg, "render", common.overrides, common.out_dir);

    auto reference = read_png(reference_path);
    auto yaws = parse_double_list(yaws_csv);
    auto loaded = trainer::load_checkpoint(ckpt_dir);
    auto codec = codec::load_codec(codec_dir);
    for (auto& p : codec->parameters()) p.set_requires_grad(false);

    for (double yaw : yaws) {
        synthdata::CameraPose pose{yaw, 0.0, 1.0};
        pose.validate();
        auto cv = coarse::synthesize_from_reference(reference, pose, cfg.train.degradation,
                                                    metrics::eval_degrade_seed(0, 1));
        std::vector<coarse::CoarseView> views(static_cast<size_t>(loaded.model.view_count), cv);
        auto refined = refiner::refine(reference, views, loaded.model, codec,
                                       refiner::NoiseLevel(cfg.train.inference_noise));
        const auto tag = std::to_string(static_cast<int>(yaw));
        write_png(quantize01(cv.image), (fs::path(common.out_dir) / ("coarse_" + tag + ".png")).string());
        write_png(quantize01(refined.front()),
                  (fs::path(common.out_dir) / ("refined_" + tag + ".png")).string());
    }
    std::cout << "rendered " << yaws.size() << " views to " << common.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-step multi-view portrait refinement"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, noise_args, rot_args, render_args;

    auto* gen = app.add_subcommand("generate-data", "render a synthetic multi-view dataset");
    add_common(gen, gen_args);
    std::string gen_split = "train", gen_regime = "pretrain";
    int gen_identities = -1, gen_views = -1, gen_res = -1;
    gen->add_option("--split", gen_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    gen->add_option("--regime", gen_regime, "pretrain|finetune")
        ->check(CLI::IsMember({"pretrain", "finetune"}));
    gen->add_option("--identities", gen_identities, "identity count for this split");
    gen->add_option("--views", gen_views, "novel views per identity");
    gen->add_option("--res", gen_res, "image resolution");

    auto* train = app.add_subcommand("train", "train a pipeline stage");
    add_common(train, train_args);
    std::string train_stage, train_data, train_eval_data, train_codec_dir, train_init;
    bool train_resume = false;
    int64_t train_steps = -1;
    train->add_option("--stage", train_stage, "codec|embedder|base|pretrain|finetune")
        ->required()
        ->check(CLI::IsMember({"codec", "embedder", "base", "pretrain", "finetune"}));
    train->add_option("--data", train_data, "training dataset directory")->required();
    train->add_option("--eval-data", train_eval_data, "held-out dataset directory");
    train->add_option("--codec", train_codec_dir, "codec checkpoint directory");
    train->add_option("--init", train_init, "checkpoint to initialize or resume from");
    train->add_flag("--resume", train_resume, "resume mid-stage from --init");
    train->add_option("--steps", train_steps, "override the stage step budget");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a held-out dataset");
    add_common(ev, eval_args);
    std::string ev_ckpt, ev_codec, ev_embedder, ev_data;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--codec", ev_codec)->required();
    ev->add_option("--embedder", ev_embedder)->required();
    ev->add_option("--data", ev_data)->required();

    auto* abn = app.add_subcommand("ablate-noise", "sweep fixed inference noise levels");
    add_common(abn, noise_args);
    std::string abn_ckpt, abn_codec, abn_embedder, abn_data, abn_levels;
    abn->add_option("--ckpt", abn_ckpt)->required();
    abn->add_option("--codec", abn_codec)->required();
    abn->add_option("--embedder", abn_embedder)->required();
    abn->add_option("--data", abn_data)->required();
    abn->add_option("--levels", abn_levels, "comma-separated noise levels");

    auto* abr = app.add_subcommand("ablate-rotation", "sweep head rotation angles");
    add_common(abr, rot_args);
    std::string abr_ckpt, abr_codec, abr_embedder, abr_data, abr_angles;
    abr->add_option("--ckpt", abr_ckpt)->required();
    abr->add_option("--codec", abr_codec)->required();
    abr->add_option("--embedder", abr_embedder)->required();
    abr->add_option("--data", abr_data)->required();
    abr->add_option("--angles", abr_angles, "comma-separated yaw angles");

    auto* ren = app.add_subcommand("render", "refine novel views of a reference image");
    add_common(ren, render_args);
    std::string ren_reference, ren_yaws, ren_ckpt, ren_codec;
    ren->add_option("--reference", ren_reference, "reference PNG")->required();
    ren->add_option("--yaws", ren_yaws, "comma-separated yaw angles")->required();
    ren->add_option("--ckpt", ren_ckpt)->required();
    ren->add_option("--codec", ren_codec)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            if (gen_identities > 0) {
                gen_args.overrides.push_back(
                    (gen_split == "train" ? std::string("data.train_identities=")
                                          : std::string("data.eval_identities=")) +
                    std::to_string(gen_identities));
            }
            if (gen_views > 0) {
                gen_args.overrides.push_back("data.view_count=" + std::to_string(gen_views));
            }
            if (gen_res > 0) {
                gen_args.overrides.push_back("data.resolution=" + std::to_string(gen_res));
            }
            return run_generate_data(gen_args, gen_split, gen_regime);
        }
        if (train->parsed()) {
            return run_train(train_args, train_stage, train_data, train_eval_data,
                             train_codec_dir, train_init, train_resume, train_steps);
        }
        if (ev->parsed()) return run_eval(eval_args, ev_ckpt, ev_codec, ev_embedder, ev_data);
        if (abn->parsed()) {
            return run_ablate_noise(noise_args, abn_ckpt, abn_codec, abn_embedder, abn_data,
                                    abn_levels);
        }
        if (abr->parsed()) {
            return run_ablate_rotation(rot_args, abr_ckpt, abr_codec, abr_embedder, abr_data,
                                       abr_angles);
        }
        if (ren->parsed()) {
            return run_render(render_args, ren_reference, ren_yaws, ren_ckpt, ren_codec);
        }
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
