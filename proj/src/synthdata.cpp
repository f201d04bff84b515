#include "mvrefine/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "mvrefine/common.hpp"
#include "mvrefine/image_io.hpp"
#include "mvrefine/serialize.hpp"

namespace fs = std::filesystem;

namespace mvr::synthdata {

namespace {

constexpr double kPi = 3.14159265358979323846;

double deg2rad(double d) { return d * kPi / 180.0; }

// Geometry slots.
enum GeomIndex { kHeadRx = 0, kHeadRy, kEyeSpacing, kNoseLength, kHairExtent, kMouthWidth };

struct DerivedIdentity {
    double rx, ry;        // head ellipse half-axes, fraction of image size
    double feature_rho;   // feature arc radius, fraction of image size
    double eye_az;        // eye azimuth offset from the nose, radians
    double eye_rx, eye_ry;
    double nose_w, nose_h;
    double mouth_w, mouth_h;
    double hairline_v;    // head-local v below which skin shows
    double hair_rx, hair_ry;
    double eye_v, nose_v, mouth_v;
    double skin[3], hair[3], eye[3], mouth[3], bg[3];
    double skin_freq, hair_freq;
    double phase[4];
    double skin_amp, hair_amp, paint_az;
};

double mix(double a, double b, double t) { return a + (b - a) * t; }

DerivedIdentity derive(const IdentityParams& id) {
    const auto& g = id.geometry;
    const auto& p = id.palette;
    DerivedIdentity d{};
    d.rx = 0.24 + 0.09 * g[kHeadRx];
    d.ry = 0.30 + 0.09 * g[kHeadRy];
    d.feature_rho = 0.74 * d.rx;
    d.eye_az = 0.38 + 0.30 * g[kEyeSpacing];
    d.eye_rx = 0.050 * d.rx / 0.28;
    d.eye_ry = 0.60 * d.eye_rx;
    d.nose_w = 0.34 * d.eye_rx * (1.0 + 0.5 * g[kNoseLength]);
    d.nose_h = (0.055 + 0.050 * g[kNoseLength]);
    d.mouth_w = (0.085 + 0.075 * g[kMouthWidth]);
    d.mouth_h = 0.020;
    d.hairline_v = -d.ry * (0.30 + 0.25 * g[kHairExtent]);
    d.hair_rx = d.rx * (1.06 + 0.16 * g[kHairExtent]);
    d.hair_ry = d.ry * (1.06 + 0.16 * g[kHairExtent]);
    d.eye_v = -0.16 * d.ry;
    d.nose_v = 0.10 * d.ry;
    d.mouth_v = 0.46 * d.ry;

    // Palette entries are raw [0,1]; map them into plausible color bands.
    d.skin[0] = mix(0.55, 0.95, p[0]);
    d.skin[1] = d.skin[0] * mix(0.68, 0.88, p[1]);
    d.skin[2] = d.skin[1] * mix(0.62, 0.90, p[2]);
    d.hair[0] = mix(0.05, 0.75, p[3]);
    d.hair[1] = d.hair[0] * mix(0.45, 0.95, p[4]);
    d.hair[2] = d.hair[1] * mix(0.35, 0.95, p[5]);
    d.eye[0] = mix(0.05, 0.45, p[6]);
    d.eye[1] = mix(0.05, 0.55, p[7]);
    d.eye[2] = mix(0.10, 0.70, p[8]);
    d.mouth[0] = mix(0.45, 0.70, p[0]);
    d.mouth[1] = 0.18;
    d.mouth[2] = 0.22;

    std::mt19937_64 rng(static_cast<uint64_t>(id.seed) * 0x9e3779b97f4a7c15ull + 0x51ed2701);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (auto& ph : d.phase) ph = u01(rng) * 2.0 * kPi;
    const double bg_level = 0.06 + 0.10 * u01(rng);
    d.bg[0] = bg_level;
    d.bg[1] = bg_level * (0.9 + 0.2 * u01(rng));
    d.bg[2] = bg_level * (0.9 + 0.2 * u01(rng));
    d.skin_amp = 0.04 + 0.05 * u01(rng);
    d.hair_amp = 0.12 + 0.10 * u01(rng);
    d.paint_az = 0.25 + 0.30 * u01(rng);

    d.skin_freq = id.texture_freqs[0];
    d.hair_freq = id.texture_freqs[1];
    return d;
}

struct ScreenFeature {
    double u, v;   // normalized screen coords (center origin)
    double fshort; // horizontal foreshortening factor
    bool visible;
};

// A feature at head azimuth az lands at screen azimuth az + yaw and is hidden
// once it rotates past the limb.
ScreenFeature project_feature(const DerivedIdentity& d, double az, double v_local, double yaw_rad,
                              double pitch_rad) {
    ScreenFeature f{};
    const double screen_az = az + yaw_rad;
    const double c = std::cos(screen_az);
    f.u = d.feature_rho * std::sin(screen_az);
    f.v = v_local + 0.32 * d.ry * std::sin(pitch_rad);
    f.fshort = std::max(c, 0.15);
    f.visible = c > 0.08;
    return f;
}

bool in_ellipse(double u, double v, double cu, double cv, double ru, double rv) {
    const double du = (u - cu) / ru;
    const double dv = (v - cv) / rv;
    return du * du + dv * dv <= 1.0;
}

}  // namespace

nlohmann::json IdentityRegime::to_json() const {
    return {{"geometry_lo", geometry_lo},
            {"geometry_hi", geometry_hi},
            {"texture_freq_scale", texture_freq_scale}};
}

IdentityRegime IdentityRegime::from_json(const nlohmann::json& j) {
    IdentityRegime r;
    r.geometry_lo = j.at("geometry_lo").get<double>();
    r.geometry_hi = j.at("geometry_hi").get<double>();
    r.texture_freq_scale = j.at("texture_freq_scale").get<double>();
    return r;
}

void CameraPose::validate() const {
    if (yaw_deg < -90.0 || yaw_deg > 90.0) {
        throw ValidationError("camera yaw must be in [-90, 90] degrees");
    }
    if (pitch_deg < -20.0 || pitch_deg > 20.0) {
        throw ValidationError("camera pitch must be in [-20, 20] degrees");
    }
    if (!(distance > 0.0)) {
        throw ValidationError("camera distance must be positive");
    }
}

nlohmann::json CameraPose::to_json() const {
    return {{"yaw", yaw_deg}, {"pitch", pitch_deg}, {"distance", distance}};
}

CameraPose CameraPose::from_json(const nlohmann::json& j) {
    CameraPose p;
    p.yaw_deg = j.at("yaw").get<double>();
    p.pitch_deg = j.at("pitch").get<double>();
    p.distance = j.at("distance").get<double>();
    return p;
}

IdentityParams sample_identity(int64_t seed, const IdentityRegime& regime) {
    if (seed < 0) throw ValidationError("identity seed must be non-negative");
    if (regime.geometry_lo < 0.0 || regime.geometry_hi > 1.0 ||
        regime.geometry_lo >= regime.geometry_hi) {
        throw ValidationError("identity regime geometry range must satisfy 0 <= lo < hi <= 1");
    }
    std::mt19937_64 rng(static_cast<uint64_t>(seed) ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    IdentityParams id;
    id.seed = seed;
    id.geometry.resize(6);
    for (auto& g : id.geometry) {
        g = regime.geometry_lo + (regime.geometry_hi - regime.geometry_lo) * u01(rng);
    }
    id.palette.resize(9);
    for (auto& c : id.palette) c = u01(rng);
    id.texture_freqs.resize(2);
    for (auto& f : id.texture_freqs) {
        f = (2.0 + 6.0 * u01(rng)) * regime.texture_freq_scale;
    }
    return id;
}

FeatureLayout feature_layout(const IdentityParams& identity, const CameraPose& pose,
                             int resolution) {
    pose.validate();
    const auto d = derive(identity);
    const double yaw = deg2rad(pose.yaw_deg);
    const double pitch = deg2rad(pose.pitch_deg);
    const double cx = (resolution - 1) / 2.0;
    const double cy = (resolution - 1) / 2.0;
    const double scale = resolution / pose.distance;

    auto to_px = [&](const ScreenFeature& f) {
        FeaturePoint p;
        p.x = cx + f.u * scale;
        p.y = cy + f.v * scale;
        p.visible = f.visible;
        return p;
    };

    FeatureLayout out;
    out.nose = to_px(project_feature(d, 0.0, d.nose_v, yaw, pitch));
    out.mouth = to_px(project_feature(d, 0.0, d.mouth_v, yaw, pitch));
    out.left_eye = to_px(project_feature(d, -d.eye_az, d.eye_v, yaw, pitch));
    out.right_eye = to_px(project_feature(d, d.eye_az, d.eye_v, yaw, pitch));
    out.head_rx_px = d.rx * scale;
    out.head_ry_px = d.ry * scale;
    return out;
}

torch::Tensor render_view(const IdentityParams& identity, const CameraPose& pose,
                          int resolution) {
    pose.validate();
    if (resolution != 32 && resolution != 64 && resolution != 128 && resolution != 256) {
        throw ValidationError("resolution must be one of {32, 64, 128, 256}");
    }
    if (identity.geometry.size() != 6 || identity.palette.size() != 9 ||
        identity.texture_freqs.size() != 2) {
        throw ValidationError("identity parameter vectors have unexpected sizes");
    }

    const auto d = derive(identity);
    const double yaw = deg2rad(pose.yaw_deg);
    const double pitch = deg2rad(pose.pitch_deg);
    const double pitch_dv = 0.32 * d.ry * std::sin(pitch);

    const auto eye_l = project_feature(d, -d.eye_az, d.eye_v, yaw, pitch);
    const auto eye_r = project_feature(d, d.eye_az, d.eye_v, yaw, pitch);
    const auto nose = project_feature(d, 0.0, d.nose_v, yaw, pitch);
    const auto mouth = project_feature(d, 0.0, d.mouth_v, yaw, pitch);

    auto img = torch::empty({3, resolution, resolution}, torch::kFloat32);
    auto acc = img.accessor<float, 3>();

    const double cx = (resolution - 1) / 2.0;
    const double cy = (resolution - 1) / 2.0;

    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            // Normalized, distance-scaled screen coordinates.
            const double u = (x - cx) / resolution * pose.distance;
            const double v = (y - cy) / resolution * pose.distance;

            double r = d.bg[0], g = d.bg[1], b = d.bg[2];

            const bool in_hair = in_ellipse(u, v, 0.0, -0.02, d.hair_rx, d.hair_ry);
            const bool in_head = in_ellipse(u, v, 0.0, 0.0, d.rx, d.ry);
            const bool skin_zone = in_head && v > d.hairline_v + pitch_dv;

            if (in_hair || in_head) {
                // Screen azimuth of this column on the head shell; the head-frame
                // azimuth (psi - yaw) anchors texture and paint to the surface.
                const double shell_rx = skin_zone ? d.rx : d.hair_rx;
                const double psi = std::asin(std::clamp(u / shell_rx, -1.0, 1.0));
                const double phi = psi - yaw;
                const double limb = 0.62 + 0.38 * std::cos(psi);
                const double paint = 0.82 + 0.18 * std::cos(phi - d.paint_az);
                const double shade = limb * paint;

                if (skin_zone) {
                    const double tex =
                        1.0 + d.skin_amp * std::sin(2.0 * kPi * d.skin_freq * phi / kPi + d.phase[0]) *
                                  std::cos(2.0 * kPi * d.skin_freq * 0.7 * v / d.ry * 0.5 + d.phase[1]);
                    r = d.skin[0] * shade * tex;
                    g = d.skin[1] * shade * tex;
                    b = d.skin[2] * shade * tex;
                } else {
                    const double tex =
                        1.0 + d.hair_amp * std::sin(2.0 * kPi * d.hair_freq * phi / kPi + d.phase[2]) *
                                  std::cos(2.0 * kPi * d.hair_freq * 0.5 * v / d.hair_ry + d.phase[3]);
                    r = d.hair[0] * shade * tex;
                    g = d.hair[1] * shade * tex;
                    b = d.hair[2] * shade * tex;
                }

                if (skin_zone) {
                    for (const auto* e : {&eye_l, &eye_r}) {
                        if (e->visible &&
                            in_ellipse(u, v, e->u, e->v, d.eye_rx * e->fshort, d.eye_ry)) {
                            r = d.eye[0] * shade;
                            g = d.eye[1] * shade;
                            b = d.eye[2] * shade;
                        }
                    }
                    if (nose.visible &&
                        in_ellipse(u, v, nose.u, nose.v, d.nose_w * nose.fshort, d.nose_h)) {
                        r *= 0.72;
                        g *= 0.72;
                        b *= 0.72;
                    }
                    if (mouth.visible &&
                        in_ellipse(u, v, mouth.u, mouth.v, d.mouth_w * mouth.fshort, d.mouth_h)) {
                        r = d.mouth[0] * shade;
                        g = d.mouth[1] * shade;
                        b = d.mouth[2] * shade;
                    }
                }
            }

            acc[0][y][x] = static_cast<float>(std::clamp(r, 0.0, 1.0));
            acc[1][y][x] = static_cast<float>(std::clamp(g, 0.0, 1.0));
            acc[2][y][x] = static_cast<float>(std::clamp(b, 0.0, 1.0));
        }
    }
    // Snap to the on-disk 8-bit grid so PNG round trips are bit-exact.
    return quantize01(img);
}

SceneBundle make_bundle(const IdentityParams& identity,
                        const std::vector<CameraPose>& target_poses, int resolution) {
    if (target_poses.empty() || target_poses.size() > 16) {
        throw ValidationError("bundle requires between 1 and 16 target poses");
    }
    SceneBundle bundle;
    bundle.identity = identity;
    bundle.resolution = resolution;
    bundle.reference = render_view(identity, CameraPose{}, resolution);
    bundle.target_poses = target_poses;
    bundle.targets.reserve(target_poses.size());
    for (const auto& pose : target_poses) {
        bundle.targets.push_back(render_view(identity, pose, resolution));
    }
    return bundle;
}

std::vector<CameraPose> sample_training_poses(uint64_t seed, int count, double yaw_range_deg,
                                              double pitch_range_deg) {
    std::mt19937_64 rng(seed ^ 0xa24baed4963ee407ull);
    std::uniform_real_distribution<double> yaw(-yaw_range_deg, yaw_range_deg);
    std::uniform_real_distribution<double> pitch(-pitch_range_deg, pitch_range_deg);
    std::vector<CameraPose> poses(static_cast<size_t>(count));
    for (auto& p : poses) {
        p.yaw_deg = yaw(rng);
        p.pitch_deg = pitch(rng);
        p.distance = 1.0;
    }
    return poses;
}

std::vector<int64_t> DatasetManifest::seeds() const {
    std::vector<int64_t> out;
    out.reserve(bundles.size());
    for (const auto& b : bundles) out.push_back(b.seed);
    return out;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json jb = nlohmann::json::array();
    for (const auto& b : bundles) {
        nlohmann::json poses = nlohmann::json::array();
        for (const auto& p : b.poses) poses.push_back(p.to_json());
        jb.push_back({{"seed", b.seed}, {"poses", poses}});
    }
    return {{"version", version},
            {"generator_version", generator_version},
            {"resolution", resolution},
            {"view_count", view_count},
            {"regime", regime.to_json()},
            {"bundles", jb},
            {"files", file_hashes}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.version = j.at("version").get<int>();
        m.generator_version = j.at("generator_version").get<int>();
        m.resolution = j.at("resolution").get<int>();
        m.view_count = j.at("view_count").get<int>();
        m.regime = IdentityRegime::from_json(j.at("regime"));
        for (const auto& jb : j.at("bundles")) {
            BundleRecord rec;
            rec.seed = jb.at("seed").get<int64_t>();
            for (const auto& jp : jb.at("poses")) rec.poses.push_back(CameraPose::from_json(jp));
            m.bundles.push_back(std::move(rec));
        }
        m.file_hashes = j.at("files").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed dataset manifest: ") + e.what());
    }
    return m;
}

std::vector<SceneBundle> generate_bundles(const IdentityRegime& regime, int64_t seed_base,
                                          int count, int view_count, int resolution,
                                          double yaw_range_deg, double pitch_range_deg) {
    std::vector<SceneBundle> bundles;
    bundles.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int64_t seed = seed_base + i;
        auto identity = sample_identity(seed, regime);
        auto poses = sample_training_poses(static_cast<uint64_t>(seed) * 0x2545f4914f6cdd1dull,
                                           view_count, yaw_range_deg, pitch_range_deg);
        bundles.push_back(make_bundle(identity, poses, resolution));
    }
    return bundles;
}

std::string view_filename(int64_t identity_seed, int view_index) {
    return std::to_string(identity_seed) + "_" + std::to_string(view_index) + ".png";
}

DatasetManifest write_dataset(const std::vector<SceneBundle>& bundles,
                              const std::string& directory, const IdentityRegime& regime) {
    if (bundles.empty()) throw ValidationError("cannot write an empty dataset");
    fs::create_directories(directory);

    DatasetManifest m;
    m.generator_version = kGeneratorVersion;
    m.resolution = bundles.front().resolution;
    m.view_count = static_cast<int>(bundles.front().targets.size());
    m.regime = regime;

    for (const auto& bundle : bundles) {
        DatasetManifest::BundleRecord rec;
        rec.seed = bundle.identity.seed;
        rec.poses = bundle.target_poses;
        m.bundles.push_back(rec);

        auto store = [&](const torch::Tensor& img, int view_index) {
            const auto name = view_filename(bundle.identity.seed, view_index);
            const auto path = (fs::path(directory) / name).string();
            write_png(img, path);
            m.file_hashes[name] = hex64(fnv1a64_file(path));
        };
        store(bundle.reference, 0);
        for (size_t k = 0; k < bundle.targets.size(); ++k) {
            store(bundle.targets[k], static_cast<int>(k) + 1);
        }
    }
    write_json(m.to_json(), (fs::path(directory) / "manifest.json").string());
    return m;
}

DatasetManifest read_manifest(const std::string& directory) {
    const auto path = (fs::path(directory) / "manifest.json").string();
    auto m = DatasetManifest::from_json(read_json(path));
    if (m.generator_version != kGeneratorVersion) {
        throw IntegrityError("dataset was produced by generator version " +
                             std::to_string(m.generator_version) + ", expected " +
                             std::to_string(kGeneratorVersion));
    }
    return m;
}

std::vector<SceneBundle> read_dataset(const std::string& directory) {
    const auto m = read_manifest(directory);
    std::vector<SceneBundle> bundles;
    bundles.reserve(m.bundles.size());
    for (const auto& rec : m.bundles) {
        if (static_cast<int>(rec.poses.size()) != m.view_count) {
            throw IntegrityError("bundle record for seed " + std::to_string(rec.seed) +
                                 " has wrong pose count");
        }
        SceneBundle bundle;
        bundle.identity = sample_identity(rec.seed, m.regime);
        bundle.resolution = m.resolution;
        bundle.target_poses = rec.poses;

        auto load = [&](int view_index) {
            const auto name = view_filename(rec.seed, view_index);
            const auto path = (fs::path(directory) / name).string();
            if (!fs::exists(path)) {
                throw IntegrityError("dataset record for seed " + std::to_string(rec.seed) +
                                     " is missing image file " + name);
            }
            auto it = m.file_hashes.find(name);
            if (it == m.file_hashes.end()) {
                throw IntegrityError("manifest has no hash entry for " + name);
            }
            if (hex64(fnv1a64_file(path)) != it->second) {
                throw IntegrityError("image file " + name + " does not match its manifest hash");
            }
            return read_png(path);
        };
        bundle.reference = load(0);
        for (int k = 0; k < m.view_count; ++k) bundle.targets.push_back(load(k + 1));
        bundles.push_back(std::move(bundle));
    }
    return bundles;
}

std::vector<SceneBundle> regenerate_from_manifest(const DatasetManifest& manifest) {
    std::vector<SceneBundle> bundles;
    bundles.reserve(manifest.bundles.size());
    for (const auto& rec : manifest.bundles) {
        auto identity = sample_identity(rec.seed, manifest.regime);
        bundles.push_back(make_bundle(identity, rec.poses, manifest.resolution));
    }
    return bundles;
}

}  // namespace mvr::synthdata
