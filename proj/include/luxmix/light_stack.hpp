#pragma once

#include "luxmix/hdr.hpp"
#include "luxmix/image.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace luxmix {

struct LightInfo {
    std::string name;
    double temperature_k = 6600.0;
};

/// Ambient layer plus N one-light-at-a-time layers and the RGB scales that
/// recreate the input: input = tonemap(ambient + sum_i scales_i * layers_i).
class LightStack {
public:
    LightStack() = default;
    LightStack(HdrImage ambient, std::vector<HdrImage> layers, std::vector<Rgb> scales, std::vector<LightInfo> info = {});

    int width() const { return ambient_.width(); }
    int height() const { return ambient_.height(); }
    std::size_t light_count() const { return layers_.size(); }

    const HdrImage& ambient() const { return ambient_; }
    const std::vector<HdrImage>& layers() const { return layers_; }
    const std::vector<Rgb>& scales() const { return scales_; }
    const std::vector<LightInfo>& info() const { return info_; }

private:
    HdrImage ambient_;
    std::vector<HdrImage> layers_;
    std::vector<Rgb> scales_;
    std::vector<LightInfo> info_;
};

struct RemixWeights {
    std::vector<Rgb> weights;
    Rgb ambient_gain = Rgb::Ones();

    static RemixWeights from_scales(const LightStack& stack) { return RemixWeights{stack.scales(), Rgb::Ones()}; }
};

/// ambient_gain * ambient + sum_i weights_i * layer_i, per channel.
HdrImage remix(const LightStack& stack, const RemixWeights& w);

LdrImage compose_input(const LightStack& stack, const ToneCurve& curve);

/// max(full - c * layer, 0).
HdrImage one_light_off(const HdrImage& full, const HdrImage& layer, const Rgb& c);

/// full + sum_i extra_scales_i * layers_i.
HdrImage augment_compose(const HdrImage& full, std::span<const HdrImage> layers, std::span<const Rgb> extra_scales);

struct ScaleSolution {
    std::vector<Rgb> scales;
    Rgb ambient_gain = Rgb::Zero();
    /// Per-channel residual norm ||A s - target||.
    Eigen::Array3d residual = Eigen::Array3d::Zero();
    Eigen::Array3d target_norm = Eigen::Array3d::Zero();
    /// Set when every column of some channel is identically zero.
    bool degenerate = false;
};

/// Per-channel nonnegative least squares over [ambient, layers...] against a
/// linear target.
ScaleSolution solve_scales(const HdrImage& ambient, std::span<const HdrImage> layers, const HdrImage& target);

/// Dense nonnegative least squares min ||A x - b||, x >= 0 (Lawson-Hanson active set).
Eigen::VectorXd nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int max_iterations = 0);

struct LightMasks {
    Mask emissive;
    Mask fixture;
    Mask hull;
    /// No emissive pixels were visible; dilation was skipped.
    bool empty = false;
};

/// Pixel (x, y) is set when its center lies inside or on the convex hull of
/// the set pixel centers.
Mask convex_hull_mask(const Mask& fixture);

/// Dilates with a (2r+1)^2 square until the popcount reaches min_area, at most
/// `max_iterations` times. Masks already large enough (or empty) pass through.
Mask dilate_small_mask(const Mask& emissive, Eigen::Index min_area, int radius, int max_iterations = 8);

/// Minimum emissive area before dilation, scaled from 64 px at 512x512.
Eigen::Index default_min_mask_area(int width, int height);

/// Builds nested masks: dilated emissive, fixture grown to contain it, and the
/// hull of that fixture. Throws std::logic_error if nesting fails.
LightMasks build_light_masks(const Mask& emissive, const Mask& fixture, Eigen::Index min_area, int radius = 1);

bool is_subset(const Mask& inner, const Mask& outer);

// "luxstack/1" manifest.
struct StackManifest {
    std::filesystem::path ambient;
    std::vector<std::filesystem::path> layers;
    std::vector<Rgb> scales;
    std::vector<LightInfo> info;
    std::vector<std::filesystem::path> masks;
    ToneCurve curve;
};

StackManifest read_stack_manifest(const std::filesystem::path& path);
void write_stack_manifest(const std::filesystem::path& path, const StackManifest& manifest);
/// Loads images referenced by a manifest (paths relative to the manifest file).
LightStack load_stack(const std::filesystem::path& manifest_path, ToneCurve* curve = nullptr);
/// Writes layers as LXHD next to the manifest and the manifest itself.
void save_stack(const std::filesystem::path& manifest_path, const LightStack& stack, const ToneCurve& curve,
                std::span<const Mask> hull_masks = {});

}  // namespace luxmix
