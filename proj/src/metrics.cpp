#include "mvrefine/metrics.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mvrefine/adversary.hpp"
#include "mvrefine/common.hpp"
#include "mvrefine/image_io.hpp"
#include "mvrefine/refiner.hpp"
#include "mvrefine/serialize.hpp"

namespace fs = std::filesystem;

namespace mvr::metrics {

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
    if (!a.defined() || !b.defined() || !a.sizes().equals(b.sizes())) {
        throw ValidationError("metric inputs must be shape-matched");
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double psnr_from_mse(double mse) {
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
    check_pair(a, b);
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).square().mean().item<double>();
    return psnr_from_mse(mse);
}

double l2_error(const torch::Tensor& a, const torch::Tensor& b) {
    check_pair(a, b);
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).square().mean().item<double>();
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
    check_pair(a, b);
    if (a.dim() != 3) throw ValidationError("ssim expects (3,H,W) images");

    namespace F = torch::nn::functional;
    const int64_t c = a.size(0);
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;

    auto xs = torch::arange(kWindow, torch::kFloat32) - (kWindow - 1) / 2.0f;
    auto g = torch::exp(-(xs * xs) / static_cast<float>(2 * kSigma * kSigma));
    g /= g.sum();
    auto window = torch::outer(g, g).view({1, 1, kWindow, kWindow}).repeat({c, 1, 1, 1});

    auto x = a.unsqueeze(0);
    auto y = b.unsqueeze(0);
    auto conv = [&](const torch::Tensor& t) {
        return F::conv2d(t, window, F::Conv2dFuncOptions().groups(c));
    };

    auto mu_x = conv(x);
    auto mu_y = conv(y);
    auto sigma_x = conv(x * x) - mu_x * mu_x;
    auto sigma_y = conv(y * y) - mu_y * mu_y;
    auto sigma_xy = conv(x * y) - mu_x * mu_y;

    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    auto map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) /
               ((mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2));
    return std::clamp(map.mean().item<double>(), -1.0, 1.0);
}

double lpips_proxy(const torch::Tensor& a, const torch::Tensor& b, codec::LatentCodec& codec) {
    check_pair(a, b);
    if (codec.is_empty()) throw ValidationError("lpips_proxy requires a trained codec");
    torch::NoGradGuard ng;
    return adversary::feature_distance(a, b, codec).item<double>();
}

IdentityEmbedderNetImpl::IdentityEmbedderNetImpl(int embed_dim, int num_classes) {
    namespace nn = torch::nn;
    c1_ = register_module("c1", nn::Conv2d(nn::Conv2dOptions(3, 16, 3).stride(2).padding(1)));
    c2_ = register_module("c2", nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(2).padding(1)));
    c3_ = register_module("c3", nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)));
    fc_embed_ = register_module("fc_embed", nn::Linear(64, embed_dim));
    fc_cls_ = register_module("fc_cls", nn::Linear(embed_dim, num_classes));
}

namespace {

torch::Tensor embedder_trunk(torch::nn::Conv2d& c1, torch::nn::Conv2d& c2, torch::nn::Conv2d& c3,
                             const torch::Tensor& images) {
    auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    x = torch::relu(c1->forward(x));
    x = torch::relu(c2->forward(x));
    x = torch::relu(c3->forward(x));
    return torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
}

}  // namespace

torch::Tensor IdentityEmbedderNetImpl::embed(const torch::Tensor& images) {
    auto e = fc_embed_->forward(embedder_trunk(c1_, c2_, c3_, images));
    return torch::nn::functional::normalize(
        e, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
}

torch::Tensor IdentityEmbedderNetImpl::logits(const torch::Tensor& images) {
    auto e = fc_embed_->forward(embedder_trunk(c1_, c2_, c3_, images));
    return fc_cls_->forward(torch::relu(e));
}

torch::Tensor IdentityEmbedder::embed(const torch::Tensor& images) const {
    if (net.is_empty() || !trained) {
        throw ValidationError("identity embedder is untrained (configuration error)");
    }
    torch::NoGradGuard ng;
    IdentityEmbedderNet handle = net;  // shared, read-only use
    return handle->embed(images);
}

nlohmann::json EmbedderTrainConfig::to_json() const {
    return {{"steps", steps}, {"batch_size", batch_size}, {"lr", lr},
            {"seed", seed},   {"embed_dim", embed_dim}};
}

EmbedderTrainConfig EmbedderTrainConfig::from_json(const nlohmann::json& j) {
    EmbedderTrainConfig c;
    c.steps = j.at("steps").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.embed_dim = j.at("embed_dim").get<int>();
    return c;
}

IdentityEmbedder train_embedder(const std::vector<synthdata::SceneBundle>& bundles,
                                const EmbedderTrainConfig& config) {
    if (bundles.size() < 2) throw ValidationError("embedder training needs at least 2 identities");
    torch::manual_seed(config.seed);

    const int num_classes = static_cast<int>(bundles.size());
    IdentityEmbedder emb;
    emb.net = IdentityEmbedderNet(config.embed_dim, num_classes);
    emb.num_classes = num_classes;
    emb.embed_dim = config.embed_dim;

    // Train on the reference plus a fixed pose fan; hold out the bundle's own
    // target views for the accuracy estimate.
    const std::vector<double> fan = {-75.0, -40.0, 40.0, 75.0};
    std::vector<torch::Tensor> train_images, holdout_images;
    std::vector<int64_t> train_labels, holdout_labels;
    for (size_t i = 0; i < bundles.size(); ++i) {
        const auto& b = bundles[i];
        train_images.push_back(b.reference);
        train_labels.push_back(static_cast<int64_t>(i));
        for (double yaw : fan) {
            train_images.push_back(synthdata::render_view(
                b.identity, synthdata::CameraPose{yaw, 0.0, 1.0}, b.resolution));
            train_labels.push_back(static_cast<int64_t>(i));
        }
        for (const auto& t : b.targets) {
            holdout_images.push_back(t);
            holdout_labels.push_back(static_cast<int64_t>(i));
        }
    }
    auto train_x = torch::stack(train_images);
    auto train_y = torch::tensor(train_labels);

    auto gen = at::detail::createCPUGenerator(config.seed ^ 0xded1c8edull);
    std::vector<torch::Tensor> params;
    for (auto& p : emb.net->parameters()) params.push_back(p);
    std::vector<torch::Tensor> m(params.size()), v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i] = torch::zeros_like(params[i]);
        v[i] = torch::zeros_like(params[i]);
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    for (int64_t step = 1; step <= config.steps; ++step) {
        auto idx = torch::randint(0, train_x.size(0), {config.batch_size}, gen,
                                  torch::TensorOptions().dtype(torch::kLong));
        auto loss = torch::cross_entropy_loss(emb.net->logits(train_x.index_select(0, idx)),
                                              train_y.index_select(0, idx));
        if (!std::isfinite(loss.item<double>())) {
            throw NumericalError("embedder training diverged at step " + std::to_string(step));
        }
        for (auto& p : params) {
            if (p.grad().defined()) p.mutable_grad().zero_();
        }
        loss.backward();
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

    {
        torch::NoGradGuard ng;
        auto pred = emb.net->logits(torch::stack(holdout_images)).argmax(1);
        auto correct = pred.eq(torch::tensor(holdout_labels)).to(torch::kFloat32).mean();
        emb.holdout_accuracy = correct.item<double>();
    }
    emb.trained = true;
    return emb;
}

void save_embedder(const IdentityEmbedder& embedder, const std::string& directory) {
    fs::create_directories(directory);
    save_tensor_map(named_parameters_map(*embedder.net),
                    (fs::path(directory) / "embedder.bin").string());
    nlohmann::json meta = {{"num_classes", embedder.num_classes},
                           {"embed_dim", embedder.embed_dim},
                           {"holdout_accuracy", embedder.holdout_accuracy},
                           {"trained", embedder.trained}};
    write_json(meta, (fs::path(directory) / "meta.json").string());
}

IdentityEmbedder load_embedder(const std::string& directory) {
    const auto meta = read_json((fs::path(directory) / "meta.json").string());
    IdentityEmbedder emb;
    emb.num_classes = meta.at("num_classes").get<int>();
    emb.holdout_accuracy = meta.at("holdout_accuracy").get<double>();
    emb.embed_dim = meta.at("embed_dim").get<int>();
    emb.net = IdentityEmbedderNet(emb.embed_dim, emb.num_classes);
    load_into_module(*emb.net, load_tensor_map((fs::path(directory) / "embedder.bin").string()));
    emb.trained = meta.at("trained").get<bool>();
    return emb;
}

double id_consistency(const torch::Tensor& a, const torch::Tensor& b,
                      const IdentityEmbedder& embedder) {
    check_pair(a, b);
    auto ea = embedder.embed(a.unsqueeze(0)).squeeze(0);
    auto eb = embedder.embed(b.unsqueeze(0)).squeeze(0);
    return std::clamp(ea.dot(eb).item<double>(), -1.0, 1.0);
}

namespace {

torch::Tensor sqrt_psd(const torch::Tensor& sym) {
    auto [vals, vecs] = torch::linalg_eigh(sym);
    auto clamped = vals.clamp_min(0.0);
    return torch::matmul(vecs * clamped.sqrt().unsqueeze(0), vecs.t());
}

}  // namespace

double fid_from_embeddings(const torch::Tensor& set_a, const torch::Tensor& set_b) {
    if (set_a.dim() != 2 || set_b.dim() != 2 || set_a.size(1) != set_b.size(1)) {
        throw ValidationError("fid expects (N,D) embedding matrices with matching D");
    }
    auto a = set_a.to(torch::kFloat64);
    auto b = set_b.to(torch::kFloat64);

    auto mu_a = a.mean(0);
    auto mu_b = b.mean(0);
    auto ca = a - mu_a;
    auto cb = b - mu_b;
    auto cov_a = torch::matmul(ca.t(), ca) / static_cast<double>(a.size(0) - 1);
    auto cov_b = torch::matmul(cb.t(), cb) / static_cast<double>(b.size(0) - 1);

    auto s = sqrt_psd((cov_a + cov_a.t()) / 2.0);
    auto inner = torch::matmul(torch::matmul(s, cov_b), s);
    inner = (inner + inner.t()) / 2.0;
    auto [vals, vecs] = torch::linalg_eigh(inner);
    const double trace_sqrt = vals.clamp_min(0.0).sqrt().sum().item<double>();

    const double d2 = (mu_a - mu_b).square().sum().item<double>();
    const double fid = d2 + cov_a.trace().item<double>() + cov_b.trace().item<double>() -
                       2.0 * trace_sqrt;
    return std::max(0.0, fid);
}

double fid_proxy(const std::vector<torch::Tensor>& set_a, const std::vector<torch::Tensor>& set_b,
                 const IdentityEmbedder& embedder) {
    constexpr size_t kMinImages = 32;
    if (set_a.size() < kMinImages || set_b.size() < kMinImages) {
        throw ValidationError("fid_proxy requires at least " + std::to_string(kMinImages) +
                              " images per set");
    }
    auto ea = embedder.embed(torch::stack(set_a));
    auto eb = embedder.embed(torch::stack(set_b));
    return fid_from_embeddings(ea, eb);
}

nlohmann::json EvalReport::to_json() const {
    auto dump_table = [](const std::vector<Row>& table, const std::string& key_name) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& row : table) {
            nlohmann::json r = {{key_name, row.key}};
            for (const auto& [k, v] : row.values) r[k] = v;
            rows.push_back(r);
        }
        return rows;
    };
    return {{"scalars", scalars},
            {"noise_table", dump_table(noise_table, "r")},
            {"angle_table", dump_table(angle_table, "yaw")},
            {"timing", {{"registration_ms", registration_ms}, {"generation_ms", generation_ms}}},
            {"config_hash", config_hash},
            {"notes", notes}};
}

void EvalReport::write_csv(const std::vector<Row>& table, const std::string& key_name,
                           const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open CSV for writing: " + path);
    if (table.empty()) return;
    out << key_name;
    for (const auto& [name, _] : table.front().values) out << "," << name;
    out << "\n";
    for (const auto& row : table) {
        out << row.key;
        for (const auto& [_, value] : row.values) out << "," << value;
        out << "\n";
    }
}

uint64_t eval_degrade_seed(int64_t identity_seed, int view_index) {
    return static_cast<uint64_t>(identity_seed) * 1000003ull + static_cast<uint64_t>(view_index);
}

namespace {

std::map<std::string, std::string> proxy_notes() {
    return {{"lpips_proxy", "distance in the latent codec's encoder feature space"},
            {"id", "cosine similarity of the synthetic-identity embedder"},
            {"fid_proxy", "Frechet distance over embedder features"},
            {"comparability", "proxy metrics; not comparable across other implementations"}};
}

struct PairStats {
    double psnr_sum = 0, ssim_sum = 0, lpips_sum = 0, id_sum = 0, l2_sum = 0;
    int64_t count = 0;

    void add(const torch::Tensor& out, const torch::Tensor& gt, EvalContext& ctx) {
        psnr_sum += metrics::psnr(out, gt);
        ssim_sum += metrics::ssim(out, gt);
        lpips_sum += metrics::lpips_proxy(out, gt, ctx.codec);
        id_sum += metrics::id_consistency(out, gt, ctx.embedder);
        l2_sum += metrics::l2_error(out, gt);
        ++count;
    }
    std::map<std::string, double> means(const std::string& prefix = "") const {
        const double n = static_cast<double>(std::max<int64_t>(1, count));
        return {{prefix + "psnr", psnr_sum / n},
                {prefix + "ssim", ssim_sum / n},
                {prefix + "lpips_proxy", lpips_sum / n},
                {prefix + "id", id_sum / n},
                {prefix + "l2", l2_sum / n}};
    }
};

std::vector<coarse::CoarseView> make_eval_coarse(const synthdata::SceneBundle& bundle,
                                                 const coarse::DegradationConfig& cfg) {
    std::vector<coarse::CoarseView> views;
    for (size_t k = 0; k < bundle.targets.size(); ++k) {
        views.push_back(coarse::degrade(bundle.targets[k], bundle.target_poses[k], cfg,
                                        eval_degrade_seed(bundle.identity.seed,
                                                          static_cast<int>(k) + 1),
                                        bundle.identity.seed));
    }
    return views;
}

}  // namespace

EvalReport evaluate_model(refiner::RefinerModel& model, EvalContext& ctx,
                          const std::vector<synthdata::SceneBundle>& eval_bundles,
                          int timing_trials) {
    if (eval_bundles.empty()) throw ValidationError("evaluation needs a non-empty eval set");
    EvalReport report;
    report.notes = proxy_notes();

    PairStats refined_stats, coarse_stats;
    std::vector<torch::Tensor> refined_pool, gt_pool;
    for (const auto& bundle : eval_bundles) {
        auto coarse_views = make_eval_coarse(bundle, ctx.degradation);
        auto refined = refiner::refine(bundle.reference, coarse_views, model, ctx.codec,
                                       refiner::NoiseLevel(ctx.inference_noise));
        for (size_t v = 0; v < refined.size(); ++v) {
            refined_stats.add(refined[v], bundle.targets[v], ctx);
            coarse_stats.add(coarse_views[v].image, bundle.targets[v], ctx);
            refined_pool.push_back(refined[v]);
            gt_pool.push_back(bundle.targets[v]);
        }
    }
    for (const auto& [k, v] : refined_stats.means("refined_")) report.scalars[k] = v;
    for (const auto& [k, v] : coarse_stats.means("coarse_")) report.scalars[k] = v;
    if (refined_pool.size() >= 32) {
        report.scalars["fid_proxy"] = fid_proxy(refined_pool, gt_pool, ctx.embedder);
    }

    auto [reg_ms, gen_ms] = timing(model, ctx, eval_bundles.front(), timing_trials);
    report.registration_ms = reg_ms;
    report.generation_ms = gen_ms;
    return report;
}

EvalReport ablate_noise(refiner::RefinerModel& model, EvalContext& ctx,
                        const std::vector<synthdata::SceneBundle>& eval_bundles,
                        const std::vector<double>& levels) {
    if (eval_bundles.empty()) throw ValidationError("ablation needs a non-empty eval set");
    EvalReport report;
    report.notes = proxy_notes();
    for (double r : levels) {
        const refiner::NoiseLevel level(r);  // validates the range
        PairStats stats;
        for (const auto& bundle : eval_bundles) {
            auto coarse_views = make_eval_coarse(bundle, ctx.degradation);
            auto refined = refiner::refine(bundle.reference, coarse_views, model, ctx.codec, level);
            for (size_t v = 0; v < refined.size(); ++v) {
                stats.add(refined[v], bundle.targets[v], ctx);
            }
        }
        report.noise_table.push_back({r, stats.means()});
    }
    return report;
}

EvalReport ablate_rotation(refiner::RefinerModel& model, EvalContext& ctx,
                           const std::vector<synthdata::SceneBundle>& eval_bundles,
                           const std::vector<double>& angles) {
    if (eval_bundles.empty()) throw ValidationError("ablation needs a non-empty eval set");
    EvalReport report;
    report.notes = proxy_notes();
    for (double angle : angles) {
        const synthdata::CameraPose pose{angle, 0.0, 1.0};
        pose.validate();
        PairStats stats;
        for (const auto& bundle : eval_bundles) {
            auto gt = synthdata::render_view(bundle.identity, pose, bundle.resolution);
            auto cv = coarse::degrade(
                gt, pose, ctx.degradation,
                eval_degrade_seed(bundle.identity.seed, 1000 + static_cast<int>(angle + 90)),
                bundle.identity.seed);
            std::vector<coarse::CoarseView> views(static_cast<size_t>(model.view_count), cv);
            auto refined = refiner::refine(bundle.reference, views, model, ctx.codec,
                                           refiner::NoiseLevel(ctx.inference_noise));
            for (const auto& img : refined) stats.add(img, gt, ctx);
        }
        report.angle_table.push_back({angle, stats.means()});
    }
    return report;
}

std::pair<double, double> timing(refiner::RefinerModel& model, EvalContext& ctx,
                                 const synthdata::SceneBundle& bundle, int n_trials) {
    if (n_trials < 1) throw ValidationError("timing requires at least one trial");
    using clock = std::chrono::steady_clock;

    std::vector<double> reg_ms, gen_ms;
    auto coarse_views = make_eval_coarse(bundle, ctx.degradation);  // warm-up
    refiner::refine(bundle.reference, coarse_views, model, ctx.codec,
                    refiner::NoiseLevel(ctx.inference_noise));

    for (int i = 0; i < n_trials; ++i) {
        auto t0 = clock::now();
        auto views = make_eval_coarse(bundle, ctx.degradation);
        auto t1 = clock::now();
        refiner::refine(bundle.reference, views, model, ctx.codec,
                        refiner::NoiseLevel(ctx.inference_noise));
        auto t2 = clock::now();
        reg_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        gen_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
    return {median(reg_ms), median(gen_ms)};
}

}  // namespace mvr::metrics
