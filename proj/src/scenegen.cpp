#include "voxdiff/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <zlib.h>

#include "json.hpp"
#include "voxdiff/image.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/threading.hpp"

namespace voxdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSceneStream = 0x7363656eULL;  // scene specs
constexpr std::uint64_t kPoseStream = 0x706f7365ULL;   // per-scene view poses

constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.90, 0.10, 0.10},
    {0.10, 0.80, 0.15},
    {0.15, 0.25, 0.95},
    {0.95, 0.85, 0.10},
    {0.90, 0.15, 0.85},
    {0.10, 0.85, 0.90},
    {0.95, 0.55, 0.10},
    {0.55, 0.15, 0.85},
}};

std::string scene_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04d", index);
    return buf;
}

std::string view_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "view_%04d.ppm", index);
    return buf;
}

json spec_to_json(const SceneSpec& spec) {
    json prims = json::array();
    for (const Primitive& p : spec.primitives) {
        json j{{"center", p.center}, {"albedo", p.albedo}, {"density", p.density}};
        if (p.kind == Primitive::Kind::sphere) {
            j["kind"] = "sphere";
            j["radius"] = p.size[0];
        } else {
            j["kind"] = "box";
            j["half_extents"] = p.size;
        }
        prims.push_back(std::move(j));
    }
    return json{{"seed", spec.seed}, {"primitives", std::move(prims)}};
}

SceneSpec spec_from_json(const json& j) {
    SceneSpec spec;
    spec.seed = j.at("seed").get<std::uint64_t>();
    for (const json& pj : j.at("primitives")) {
        Primitive p;
        const std::string kind = pj.at("kind").get<std::string>();
        if (kind == "sphere") {
            p.kind = Primitive::Kind::sphere;
            const double r = pj.at("radius").get<double>();
            p.size = {r, r, r};
        } else if (kind == "box") {
            p.kind = Primitive::Kind::box;
            p.size = pj.at("half_extents").get<Vec3>();
        } else {
            throw std::runtime_error("manifest: unknown primitive kind '" + kind + "'");
        }
        p.center = pj.at("center").get<Vec3>();
        p.albedo = pj.at("albedo").get<std::array<double, 3>>();
        p.density = pj.at("density").get<double>();
        spec.primitives.push_back(p);
    }
    return spec;
}

json pose_to_json(const CameraPose& pose) {
    return json{{"rotation", pose.rotation}, {"position", pose.position}};
}

CameraPose pose_from_json(const json& j) {
    CameraPose pose;
    pose.rotation = j.at("rotation").get<std::array<double, 9>>();
    pose.position = j.at("position").get<Vec3>();
    return pose;
}

json file_to_json(const ManifestFile& f) {
    return json{{"path", f.path}, {"crc32", f.crc32}};
}

ManifestFile file_from_json(const json& j) {
    return ManifestFile{j.at("path").get<std::string>(), j.at("crc32").get<std::uint32_t>()};
}

json config_to_json(const DatasetConfig& c) {
    return json{{"n_scenes", c.n_scenes},     {"n_views", c.n_views},
                {"resolution", c.resolution}, {"image_size", c.image_size},
                {"radius", c.radius},         {"focal_factor", c.focal_factor},
                {"seed", c.seed}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.n_scenes = j.at("n_scenes").get<int>();
    c.n_views = j.at("n_views").get<int>();
    c.resolution = j.at("resolution").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.radius = j.at("radius").get<double>();
    c.focal_factor = j.at("focal_factor").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

json manifest_to_json(const SceneDataset& d) {
    json scenes = json::array();
    for (const ManifestScene& s : d.scenes) {
        json views = json::array();
        for (const ManifestView& v : s.views)
            views.push_back(json{{"rotation", v.pose.rotation},
                                 {"position", v.pose.position},
                                 {"image", file_to_json(v.image)}});
        json sj{{"id", s.id},
                {"spec", spec_to_json(s.spec)},
                {"grid", file_to_json(s.grid)},
                {"views", std::move(views)}};
        if (s.fitted_grid) sj["fitted_grid"] = file_to_json(*s.fitted_grid);
        scenes.push_back(std::move(sj));
    }
    return json{{"schema", 1}, {"config", config_to_json(d.config)}, {"scenes", std::move(scenes)}};
}

void check_file(const fs::path& root, const ManifestFile& f, bool verify_crc,
                std::vector<std::string>* problems) {
    const fs::path p = root / f.path;
    auto report = [&](const std::string& msg) {
        if (problems)
            problems->push_back(msg);
        else
            throw std::runtime_error(msg);
    };
    if (!fs::exists(p)) {
        report("missing file: " + f.path);
        return;
    }
    if (verify_crc && file_crc32(p.string()) != f.crc32)
        report("checksum mismatch: " + f.path);
}

void scan_dataset(const SceneDataset& d, bool verify_crc, std::vector<std::string>* problems) {
    const fs::path root(d.root);
    for (const ManifestScene& s : d.scenes) {
        check_file(root, s.grid, verify_crc, problems);
        if (static_cast<int>(s.views.size()) != d.config.n_views) {
            const std::string msg = s.id + ": view count " + std::to_string(s.views.size()) +
                                    " does not match configured " +
                                    std::to_string(d.config.n_views);
            if (problems)
                problems->push_back(msg);
            else
                throw std::runtime_error(msg);
        }
        for (const ManifestView& v : s.views) check_file(root, v.image, verify_crc, problems);
        if (s.fitted_grid) check_file(root, *s.fitted_grid, verify_crc, problems);
    }
}

}  // namespace

bool Primitive::contains(const Vec3& p) const {
    if (kind == Kind::sphere) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (p[a] - center[a]) * (p[a] - center[a]);
        return d2 <= size[0] * size[0];
    }
    for (int a = 0; a < 3; ++a)
        if (std::abs(p[a] - center[a]) > size[a]) return false;
    return true;
}

bool Primitive::intersects(const Bounds& bounds) const {
    if (kind == Kind::sphere) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double c = std::clamp(center[a], bounds.min[a], bounds.max[a]);
            d2 += (c - center[a]) * (c - center[a]);
        }
        return d2 <= size[0] * size[0];
    }
    for (int a = 0; a < 3; ++a)
        if (center[a] + size[a] < bounds.min[a] || center[a] - size[a] > bounds.max[a])
            return false;
    return true;
}

void SceneSpec::validate(const Bounds& bounds) const {
    if (primitives.empty() || primitives.size() > 16)
        throw std::invalid_argument("scene spec: primitive count must be in [1, 16]");
    for (const Primitive& p : primitives) {
        if (!(p.density > 0.0)) throw std::invalid_argument("scene spec: density must be > 0");
        for (int a = 0; a < 3; ++a) {
            if (!(p.albedo[a] > 0.0 && p.albedo[a] < 1.0))
                throw std::invalid_argument("scene spec: albedo must lie in (0,1)");
            if (!(p.size[a] > 0.0)) throw std::invalid_argument("scene spec: size must be > 0");
        }
        if (!p.intersects(bounds))
            throw std::invalid_argument("scene spec: primitive lies outside the world bounds");
    }
}

SceneSpec random_scene(std::uint64_t seed) {
    Rng rng(derive_seed(seed, kSceneStream));
    SceneSpec spec;
    spec.seed = seed;
    const int count = 1 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < count; ++i) {
        Primitive p;
        p.kind = rng.uniform_int(2) == 0 ? Primitive::Kind::sphere : Primitive::Kind::box;
        for (int a = 0; a < 3; ++a) p.center[a] = rng.uniform(-0.6, 0.6);
        if (p.kind == Primitive::Kind::sphere) {
            const double r = rng.uniform(0.15, 0.5);
            p.size = {r, r, r};
        } else {
            for (int a = 0; a < 3; ++a) p.size[a] = rng.uniform(0.1, 0.45);
        }
        p.albedo = kPalette[rng.uniform_int(kPalette.size())];
        p.density = rng.uniform(20.0, 200.0);
        spec.primitives.push_back(p);
    }
    spec.validate();
    return spec;
}

VoxelGrid voxelize_scene(const SceneSpec& spec, int resolution, const ActivationParams& act) {
    spec.validate();
    VoxelGrid grid(resolution, Bounds{});
    const double raw_white = logit(0.99);
    for (int i = 0; i < resolution; ++i)
        for (int j = 0; j < resolution; ++j)
            for (int k = 0; k < resolution; ++k) {
                const Vec3 c = grid.voxel_center(i, j, k);
                double* v = grid.data.data() + grid.voxel_index(i, j, k) * 4;
                const Primitive* hit = nullptr;
                for (const Primitive& p : spec.primitives)
                    if (p.contains(c)) {
                        hit = &p;
                        break;
                    }
                if (hit) {
                    v[0] = (std::log(hit->density) - act.beta) / act.alpha;
                    for (int ch = 0; ch < 3; ++ch)
                        v[1 + ch] = logit(std::clamp(hit->albedo[ch], 0.01, 0.99));
                } else {
                    v[0] = act.d_min;
                    v[1] = v[2] = v[3] = raw_white;
                }
            }
    return grid;
}

Intrinsics DatasetConfig::intrinsics() const {
    return Intrinsics::square(image_size, focal_factor);
}

void DatasetConfig::validate() const {
    if (n_scenes < 1 || n_views < 1) throw std::invalid_argument("dataset: counts must be >= 1");
    if (resolution < 2) throw std::invalid_argument("dataset: resolution must be >= 2");
    if (image_size < 1) throw std::invalid_argument("dataset: image size must be >= 1");
    if (!(radius > 0.0 && focal_factor > 0.0))
        throw std::invalid_argument("dataset: radius and focal factor must be > 0");
}

std::uint32_t file_crc32(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for checksum: " + path);
    uLong crc = ::crc32(0L, nullptr, 0);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        const std::streamsize got = in.gcount();
        if (got > 0)
            crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(got));
    }
    return static_cast<std::uint32_t>(crc);
}

SceneDataset build_dataset(const DatasetConfig& config, const std::string& out_dir) {
    config.validate();
    const fs::path out(out_dir);
    if (fs::exists(out) && !fs::is_empty(out))
        throw std::invalid_argument("dataset: output directory is not empty: " + out_dir);
    const fs::path tmp = out.parent_path() / (out.filename().string() + ".building");
    fs::remove_all(tmp);

    SceneDataset dataset;
    dataset.root = tmp.string();
    dataset.config = config;
    dataset.scenes.resize(config.n_scenes);

    try {
        fs::create_directories(tmp);
        const Intrinsics intr = config.intrinsics();
        const ActivationParams act;
        const QuadratureConfig quad = default_quadrature(config.resolution);

        parallel_for(static_cast<std::size_t>(config.n_scenes), config.jobs, [&](std::size_t s) {
            const std::uint64_t scene_seed = derive_seed(config.seed, s);
            ManifestScene scene;
            scene.id = scene_id(static_cast<int>(s));
            scene.spec = random_scene(scene_seed);
            const fs::path dir = tmp / scene.id;
            fs::create_directories(dir);

            VoxelGrid grid = voxelize_scene(scene.spec, config.resolution, act);
            quantize_to_storage(grid);
            const fs::path grid_path = dir / "grid.vxgr";
            grid_write(grid, grid_path.string());
            scene.grid = {scene.id + "/grid.vxgr", file_crc32(grid_path.string())};

            const auto poses = sample_spherical_poses(config.n_views, config.radius,
                                                      derive_seed(scene_seed, kPoseStream));
            for (int v = 0; v < config.n_views; ++v) {
                const Image img = render_image(grid, poses[v], intr, quad, act);
                const std::string name = view_name(v);
                const fs::path img_path = dir / name;
                write_ppm(img, img_path.string());
                scene.views.push_back(
                    {poses[v], {scene.id + "/" + name, file_crc32(img_path.string())}});
            }
            dataset.scenes[s] = std::move(scene);
        });

        save_manifest(dataset);
    } catch (...) {
        std::error_code ec;
        fs::remove_all(tmp, ec);
        throw;
    }

    std::error_code ec;
    fs::remove(out, ec);  // out may exist as an empty directory
    fs::rename(tmp, out);
    dataset.root = out.string();
    return dataset;
}

void save_manifest(const SceneDataset& dataset) {
    const fs::path path = fs::path(dataset.root) / "manifest.json";
    std::ofstream outf(path, std::ios::binary | std::ios::trunc);
    if (!outf) throw std::runtime_error("cannot write manifest: " + path.string());
    outf << manifest_to_json(dataset).dump(2) << '\n';
    if (!outf.good()) throw std::runtime_error("manifest write failed: " + path.string());
}

namespace {

SceneDataset parse_manifest(const std::string& root) {
    const fs::path path = fs::path(root) / "manifest.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("manifest parse error: " + std::string(e.what()));
    }
    try {
        if (j.at("schema").get<int>() != 1) throw std::runtime_error("manifest: unknown schema");
        SceneDataset d;
        d.root = root;
        d.config = config_from_json(j.at("config"));
        for (const json& sj : j.at("scenes")) {
            ManifestScene s;
            s.id = sj.at("id").get<std::string>();
            s.spec = spec_from_json(sj.at("spec"));
            s.grid = file_from_json(sj.at("grid"));
            for (const json& vj : sj.at("views"))
                s.views.push_back({pose_from_json(vj), file_from_json(vj.at("image"))});
            if (sj.contains("fitted_grid")) s.fitted_grid = file_from_json(sj["fitted_grid"]);
            d.scenes.push_back(std::move(s));
        }
        return d;
    } catch (const json::exception& e) {
        throw std::runtime_error("manifest schema error: " + std::string(e.what()));
    }
}

}  // namespace

SceneDataset load_dataset(const std::string& root, bool verify_checksums) {
    SceneDataset d = parse_manifest(root);
    scan_dataset(d, verify_checksums, nullptr);
    return d;
}

std::vector<std::string> dataset_problems(const std::string& root) {
    std::vector<std::string> problems;
    SceneDataset d;
    try {
        d = parse_manifest(root);
    } catch (const std::exception& e) {
        problems.emplace_back(e.what());
        return problems;
    }
    scan_dataset(d, true, &problems);
    return problems;
}

void attach_fitted_grid(SceneDataset& dataset, int scene_index, const std::string& rel_path) {
    ManifestScene& scene = dataset.scenes.at(scene_index);
    const fs::path full = fs::path(dataset.root) / rel_path;
    scene.fitted_grid = ManifestFile{rel_path, file_crc32(full.string())};
    save_manifest(dataset);
}

std::vector<View> load_views(const SceneDataset& dataset, int scene_index) {
    const ManifestScene& scene = dataset.scenes.at(scene_index);
    std::vector<View> views;
    views.reserve(scene.views.size());
    for (const ManifestView& v : scene.views)
        views.push_back({v.pose, read_ppm((fs::path(dataset.root) / v.image.path).string())});
    return views;
}

VoxelGrid load_scene_grid(const SceneDataset& dataset, int scene_index) {
    const ManifestScene& scene = dataset.scenes.at(scene_index);
    return grid_read((fs::path(dataset.root) / scene.grid.path).string());
}

VoxelGrid load_fitted_grid(const SceneDataset& dataset, int scene_index) {
    const ManifestScene& scene = dataset.scenes.at(scene_index);
    if (!scene.fitted_grid)
        throw std::runtime_error(scene.id + ": no fitted grid registered in the manifest");
    return grid_read((fs::path(dataset.root) / scene.fitted_grid->path).string());
}

}  // namespace voxdiff
