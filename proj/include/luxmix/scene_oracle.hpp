#pragma once

#include "luxmix/geometry.hpp"
#include "luxmix/image.hpp"
#include "luxmix/light_stack.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace luxmix {

using Box3d = Box<double>;

enum class LightKind { Point, Disk };

struct Light {
    std::string name;
    LightKind kind = LightKind::Point;
    Vec3 position = Vec3::Zero();
    /// Emitting side of a disk light.
    Vec3 normal = -Vec3::UnitZ();
    double radius = 0.0;
    /// Radius of the visible bulb of a point light (masks only).
    double emitter_radius = 0.05;
    /// Radiant intensity per channel.
    Eigen::Array3d intensity = Eigen::Array3d::Zero();
    double temperature_k = 6600.0;
    Box3d fixture{Vec3::Zero(), Vec3::Zero()};
    /// Non-controllable lights are folded into the ambient render.
    bool controllable = true;
};

struct Obstacle {
    Box3d box;
    Eigen::Array3d albedo = Eigen::Array3d::Constant(0.5);
};

enum Wall : int { kWallXMin = 0, kWallXMax, kWallYMin, kWallYMax, kFloor, kCeiling };

inline constexpr std::size_t kMaxLights = 6;

struct BoxScene {
    Box3d room{Vec3::Zero(), Vec3::Ones()};
    std::array<Eigen::Array3d, 6> wall_albedo{};
    std::vector<Obstacle> obstacles;
    std::vector<Light> lights;
    /// Uniform unoccluded irradiance added to every surface.
    Eigen::Array3d ambient_env = Eigen::Array3d::Zero();
    std::vector<Camera> cameras;

    /// Throws std::invalid_argument on broken invariants.
    void validate() const;
    double diagonal() const { return room.extent().norm(); }
    std::vector<std::size_t> controllable_lights() const;
};

struct SurfaceHit {
    double t = 0.0;
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    Eigen::Array3d albedo = Eigen::Array3d::Zero();
};

/// Nearest surface along a ray starting inside the room.
std::optional<SurfaceHit> trace(const BoxScene& scene, const Ray<double>& ray);

/// Whether the open segment a -> b is free of obstacles.
bool segment_visible(const BoxScene& scene, const Vec3& a, const Vec3& b);

/// Deterministic 16-point stratified pattern on a disk light (world positions).
std::array<Vec3, 16> disk_samples(const Light& light, std::size_t light_index);

/// Direct irradiance at a surface point from one light (shadowed).
Eigen::Array3d light_irradiance(const BoxScene& scene, std::size_t light_index, const Vec3& point, const Vec3& normal);

HdrImage render_olat(const BoxScene& scene, std::size_t light_index, const Camera& cam);
HdrImage render_full(const BoxScene& scene, const Camera& cam);
HdrImage render_ambient(const BoxScene& scene, const Camera& cam);
/// Euclidean distance to the first hit per pixel.
ScalarRaster render_depth(const BoxScene& scene, const Camera& cam);
LightMasks render_light_masks(const BoxScene& scene, std::size_t light_index, const Camera& cam);

/// Ambient plus one OLAT layer per controllable light, unit scales.
LightStack render_stack(const BoxScene& scene, const Camera& cam);

struct KelvinColor {
    Eigen::Array3d rgb;
    bool clamped = false;
};

/// Black-body tint normalized to a maximum channel of 1; inputs outside
/// [1000, 12000] K are clamped and flagged.
KelvinColor temperature_to_rgb(double kelvin);

struct SceneGenOptions {
    int lights = 3;
    int equirect_width = 2048;
    int cameras = 4;
};

/// Procedural room with ceiling, wall, table and floor lamp archetypes and
/// eye-height equirect cameras. Same seed, same scene.
BoxScene generate_scene(std::uint64_t seed, const SceneGenOptions& options = {});

// "luxscene/1" description.
std::string scene_to_json(const BoxScene& scene);
BoxScene scene_from_json(const std::string& text);
void write_scene(const std::filesystem::path& path, const BoxScene& scene);
BoxScene read_scene(const std::filesystem::path& path);

}  // namespace luxmix
