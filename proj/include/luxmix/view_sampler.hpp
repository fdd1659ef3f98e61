#pragma once

#include "luxmix/geometry.hpp"
#include "luxmix/image.hpp"
#include "luxmix/rng.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace luxmix {

/// Perspective crop of an equirect panorama, angles in the panorama's frame.
struct ViewRequest {
    double azimuth = 0.0;
    double elevation = 0.0;
    double fov_deg = 60.0;
    int width = 128;
    int height = 128;

    /// fov in (20, 120) degrees, |elevation| <= pi/2, positive size.
    void validate() const;
    Eigen::Matrix3d rotation() const { return rotation_from_view(azimuth, elevation); }
    /// Perspective camera for this request seen from a panorama camera.
    Camera camera(const Camera& pano) const;
};

/// Bilinear lookup at a continuous equirect coordinate; wraps in azimuth,
/// clamps in elevation.
Eigen::Array3f sample_equirect(const HdrImage& pano, double u, double v);

HdrImage equirect_to_perspective(const HdrImage& pano, const ViewRequest& req);
/// Nearest-neighbor resampling; ray distances carry over unchanged.
ScalarRaster equirect_depth_to_perspective(const ScalarRaster& depth, const ViewRequest& req);
Mask equirect_mask_to_perspective(const Mask& mask, const ViewRequest& req);

/// Unit direction through the center of equirect pixel (x, y).
Vec3 equirect_pixel_direction(int x, int y, int width, int height);

/// Normalized sum of the mask's pixel directions; falls back to the largest
/// connected component when the sum nearly cancels. Throws on an empty mask.
Vec3 spherical_centroid(const Mask& mask);

/// Centers a view on the mask centroid, then jitters azimuth and elevation
/// uniformly within +-jitter (capped so the centroid stays in frame).
ViewRequest pick_light_view(const Mask& light_mask, double fov_deg, double jitter, Rng& rng, int width = 128,
                            int height = 128);

struct CovisReport {
    double overlap = 0.0;
    bool valid = false;
    int samples = 0;
    int agreeing = 0;
};

/// Share of a's grid samples that land inside b's frame with matching depth.
/// grid <= 0 samples every pixel of a.
CovisReport covisibility(const ScalarRaster& depth_a, const Camera& cam_a, const ScalarRaster& depth_b,
                         const Camera& cam_b, double tol, int grid = 64);

/// Median depth of the central 25% of pixels (half width by half height).
double central_clearance(const ScalarRaster& depth);

struct PanoSource {
    ScalarRaster depth;
    /// Union of light emissive masks on this panorama.
    Mask light_mask;
    Camera camera;
};

struct TrajectoryOptions {
    int count = 8;
    double min_overlap = 0.3;
    double min_clearance = 0.3;
    /// Depth agreement for covisibility; meters.
    double tol = 0.05;
    double fov_deg = 60.0;
    int width = 64;
    int height = 64;
    double jitter = 0.1;
    double max_abs_elevation = 0.6;
    int max_draws = 1000;
};

struct TrajectoryView {
    std::size_t source = 0;
    ViewRequest view;
};

struct Trajectory {
    std::vector<TrajectoryView> views;
    /// Fraction of spherical bins seen after each accepted view.
    std::vector<double> coverage;
    /// Rejection budget ran out before `count` views were found.
    bool partial = false;
};

Trajectory sample_trajectory(std::span<const PanoSource> panos, const TrajectoryOptions& options, std::uint64_t seed);

// "luxtraj/1"
std::string trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const std::string& text);
void write_trajectory(const std::filesystem::path& path, const Trajectory& t);

}  // namespace luxmix
