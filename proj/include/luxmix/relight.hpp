#pragma once

#include "luxmix/hdr.hpp"
#include "luxmix/splat.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace luxmix {

/// Adam step sizes per parameter group.
struct LearningRates {
    /// Position steps are multiplied by the scene extent and decay
    /// exponentially to position_final over each stage.
    double position = 1.6e-4;
    double position_final = 1.6e-6;
    double log_scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 2.5e-2;
    double coeff = 5e-3;
    double weight = 1e-3;
    double gamma = 1e-3;
    double beta = 1e-4;
};

struct FitConfig {
    int iters_stage1 = 3000;
    /// Stage-2 phase A: geometry, coefficients, w, gamma and beta.
    int iters_joint = 4000;
    /// Stage-2 phase B: coefficients, w, gamma and beta only.
    int iters_frozen = 2000;
    double lambda_dssim = 0.2;
    double lambda_comp = 1.0;
    double lambda_smooth = 0.01;
    int knn_k = 8;
    int smooth_every = 100;
    ToneCurve curve_init{2.2, 1e-3};
    LearningRates lr;
    RasterSettings<float> raster;
    std::uint64_t seed = 0;

    void validate() const;
};

struct LossReport {
    double l_olat = 0.0;
    double l_comp = 0.0;
    double l_smooth = 0.0;
    double total = 0.0;
};

/// One posed training image. `targets` are the M per-light HDR images with
/// slot 0 the ambient layer; `original` is the tonemapped input view.
struct TrainView {
    Camera camera;
    std::vector<HdrImage> targets;
    LdrImage original;
};

/// Everything stage 2 optimizes.
template <typename Scalar>
struct FitState {
    GaussianCloud<Scalar> cloud;
    /// M x 3 nonnegative recombination weights.
    RowMatrix<Scalar> weights;
    Scalar gamma = Scalar(2.2);
    Scalar beta = Scalar(1e-3);
};

template <typename Scalar>
struct FitGrad {
    CloudGrad<Scalar> cloud;
    RowMatrix<Scalar> weights;
    Scalar gamma = 0;
    Scalar beta = 0;

    explicit FitGrad(const FitState<Scalar>& like)
        : cloud(like.cloud), weights(RowMatrix<Scalar>::Zero(like.weights.rows(), like.weights.cols())) {}
};

/// K nearest neighbors of every point, excluding itself, ordered by
/// (distance, index).
struct KnnGraph {
    int k = 0;
    std::vector<std::uint32_t> neighbors;

    std::size_t size() const { return k > 0 ? neighbors.size() / std::size_t(k) : 0; }
    std::span<const std::uint32_t> of(std::size_t i) const { return {neighbors.data() + i * std::size_t(k), std::size_t(k)}; }
};

using PointRows = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Exact KNN on a uniform grid. Throws unless count > k >= 1.
KnnGraph knn_graph(const PointRows& points, int k);
/// O(N^2) reference.
KnnGraph knn_graph_brute(const PointRows& points, int k);

/// (1 / NK) sum_i sum_{j in N(i)} |L_i - L_j|^2 over effective coefficients.
/// Adds the gradient into `grad` when given.
template <typename Scalar>
Scalar smooth_loss(const RowMatrix<Scalar>& coeffs, const KnnGraph& graph, RowMatrix<Scalar>* grad = nullptr);

/// Which stage-2 terms are active for one evaluation.
struct ObjectiveTerms {
    double lambda_dssim = 0.2;
    double lambda_comp = 1.0;
    double lambda_smooth = 0.01;
    bool comp = true;
    /// Smoothness is active when set.
    const KnnGraph* knn = nullptr;
    /// Skip geometry gradients (frozen phase).
    bool geometry = true;
};

/// Stage-2 total loss, averaged over `views`; accumulates exact gradients into
/// `grad` when given.
template <typename Scalar>
LossReport objective(const FitState<Scalar>& state, std::span<const TrainView> views, const ObjectiveTerms& terms,
                     FitGrad<Scalar>* grad = nullptr, const RasterSettings<Scalar>& raster = {});

/// Stage-1 loss of the slot-0 color against the original views:
/// mean L1 + lambda (1 - SSIM_lum) / 2, averaged over views.
template <typename Scalar>
double stage1_objective(const GaussianCloud<Scalar>& cloud, std::span<const TrainView> views, double lambda_dssim,
                        CloudGrad<Scalar>* grad = nullptr, const RasterSettings<Scalar>& raster = {});

double loss_olat(const GaussianCloud<float>& cloud, std::span<const TrainView> views, double lambda_dssim);
double loss_comp(const GaussianCloud<float>& cloud, std::span<const TrainView> views, const RowMatrix<float>& weights,
                 const ToneCurve& curve);
double loss_smooth(const GaussianCloud<float>& cloud, int k);

struct PointSample {
    Vec3 position = Vec3::Zero();
    Eigen::Array3f color = Eigen::Array3f::Zero();
};

/// World points of every `stride`-th pixel with finite positive depth.
std::vector<PointSample> unproject_depth(const ScalarRaster& depth, const Camera& cam, const LdrImage& colors, int stride = 1);

struct InitOptions {
    /// Voxel edge for deduplication; grown until at most max_points remain.
    double voxel = 0.03;
    std::size_t max_points = 30000;
    double opacity = 0.5;
    int lights = 1;
};

/// Voxel-averaged points become isotropic splats scaled by the mean distance
/// to their three nearest neighbors; colors go to slot 0.
GaussianCloud<float> init_cloud(std::span<const PointSample> points, const InitOptions& options = {});

struct TelemetryRow {
    int iteration = 0;
    LossReport loss;
};

/// Standard splat fit of slot-0 colors against the original views.
GaussianCloud<float> fit_stage1(GaussianCloud<float> cloud, std::span<const TrainView> views, const FitConfig& config,
                                std::vector<TelemetryRow>* telemetry = nullptr);

/// A fitted relightable cloud with its composition parameters.
struct RelightModel {
    GaussianCloud<float> cloud;
    RowMatrix<float> weights;
    ToneCurve curve;
    std::vector<std::string> light_names;
};

/// Expands a stage-1 cloud to M light slots (coefficients = base / M), then
/// runs phase A and phase B. `initial_scales` seeds w (one value per light,
/// slot 0 included); empty means all ones.
RelightModel fit_stage2(const GaussianCloud<float>& stage1, std::span<const TrainView> views, const FitConfig& config,
                        std::span<const double> initial_scales = {}, std::vector<TelemetryRow>* telemetry = nullptr);

/// Stage-2 state before any iteration.
FitState<float> stage2_initial_state(const GaussianCloud<float>& stage1, int lights, const FitConfig& config,
                                     std::span<const double> initial_scales = {});

void write_telemetry_csv(const std::filesystem::path& path, std::span<const TelemetryRow> rows);

// "luxgauss/1": magic, u32 count, u32 lights, then little-endian f32 arrays
// positions, log_scales, rotations, opacities, raw coefficients. The sidecar
// <path>.json carries weights, tone curve and light names.
void write_model(const std::filesystem::path& path, const RelightModel& model);
RelightModel read_model(const std::filesystem::path& path);

}  // namespace luxmix
