#pragma once

#include "luxmix/relight.hpp"
#include "luxmix/scene_oracle.hpp"

#include <cstdint>
#include <vector>

namespace luxmix {

struct OracleViewOptions {
    int train = 16;
    int held_out = 4;
    int width = 128;
    int height = 128;
    double fov_deg = 70.0;
    /// Panorama positions used, taken from the front of scene.cameras.
    int positions = 2;
    /// Training views alternate between +-elevation; held-out views look level.
    double elevation = 0.15;
    /// Display curve producing the original (input) views.
    ToneCurve curve{2.2, 0.0};
    std::uint64_t seed = 0;
};

/// Perspective crops taken from the scene's panorama positions with exact
/// per-light targets: slot 0 ambient, then one OLAT layer per controllable
/// light. Originals are the tonemapped full renders.
struct OracleViews {
    std::vector<TrainView> train;
    std::vector<TrainView> held_out;
    /// Ray distance per training view.
    std::vector<ScalarRaster> train_depth;
    std::vector<std::string> light_names;
};

/// Training views ring each position evenly in azimuth. Held-out views sit
/// halfway between two training azimuths of the same position.
OracleViews oracle_views(const BoxScene& scene, const OracleViewOptions& options = {});

/// Initial cloud from the training views' depth and original colors.
GaussianCloud<float> init_from_views(const OracleViews& views, const InitOptions& options = {});

}  // namespace luxmix
