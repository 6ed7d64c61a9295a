#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxdiff/camera.hpp"
#include "voxdiff/render.hpp"
#include "voxdiff/voxgrid.hpp"

namespace voxdiff {

struct Primitive {
    enum class Kind { sphere, box };

    Kind kind = Kind::sphere;
    Vec3 center{0, 0, 0};
    Vec3 size{0.5, 0.5, 0.5};  // sphere: size[0] is the radius
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
    double density = 50.0;  // target sigma inside the primitive

    bool contains(const Vec3& p) const;
    bool intersects(const Bounds& bounds) const;
};

struct SceneSpec {
    std::vector<Primitive> primitives;
    std::uint64_t seed = 0;

    // Throws std::invalid_argument when empty, oversized (>16 primitives), a
    // primitive misses the world bounds, albedo leaves (0,1), or density <= 0.
    void validate(const Bounds& bounds = {}) const;
};

// Deterministic procedural scene: 1..4 primitives, palette albedos, density
// uniform in [20, 200], centers and sizes bounded so every primitive
// intersects the world cube.
SceneSpec random_scene(std::uint64_t seed);

// Ground-truth raw grid at voxel centers. First primitive containing a center
// wins; raw density inverts the density activation, raw color is
// logit(clamp(albedo, 0.01, 0.99)). Empty space: d_min density, logit(0.99)
// raw-white color.
VoxelGrid voxelize_scene(const SceneSpec& spec, int resolution, const ActivationParams& act);

struct DatasetConfig {
    int n_scenes = 64;
    int n_views = 64;
    int resolution = 32;
    int image_size = 64;
    double radius = 4.0;
    double focal_factor = 1.4;
    std::uint64_t seed = 0;
    int jobs = 1;

    Intrinsics intrinsics() const;
    void validate() const;
};

struct ManifestFile {
    std::string path;  // relative to the dataset root
    std::uint32_t crc32 = 0;
};

struct ManifestView {
    CameraPose pose;
    ManifestFile image;
};

struct ManifestScene {
    std::string id;
    SceneSpec spec;
    ManifestFile grid;
    std::vector<ManifestView> views;
    std::optional<ManifestFile> fitted_grid;
};

struct SceneDataset {
    std::string root;
    DatasetConfig config;
    std::vector<ManifestScene> scenes;
};

// Builds the full dataset (grids, posed images, manifest.json) under out_dir.
// Writes into a temporary sibling directory and renames on success, so a
// failed build leaves nothing behind. out_dir must be absent or empty.
SceneDataset build_dataset(const DatasetConfig& config, const std::string& out_dir);

// Parses manifest.json; with verify_checksums also CRC-checks every file.
// Throws std::runtime_error on missing or corrupt content.
SceneDataset load_dataset(const std::string& root, bool verify_checksums = false);

// Full integrity scan; returns one message per problem, empty when clean.
std::vector<std::string> dataset_problems(const std::string& root);

void save_manifest(const SceneDataset& dataset);

// Registers a fitted-grid file (already written under the root) in the
// manifest and rewrites it.
void attach_fitted_grid(SceneDataset& dataset, int scene_index, const std::string& rel_path);

// Decoded posed images of one scene, ready for the photometric loss.
std::vector<View> load_views(const SceneDataset& dataset, int scene_index);

VoxelGrid load_scene_grid(const SceneDataset& dataset, int scene_index);
VoxelGrid load_fitted_grid(const SceneDataset& dataset, int scene_index);

std::uint32_t file_crc32(const std::string& path);

}  // namespace voxdiff
