#pragma once

#include "luxmix/geometry.hpp"
#include "luxmix/image.hpp"

#include <cstdint>
#include <vector>

namespace luxmix {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Anisotropic 3D Gaussians with an M x 3 block of per-light RGB coefficients
/// each. Coefficients are stored raw; the effective value is softplus(raw).
/// Light slot 0 is the ambient term.
template <typename Scalar>
struct GaussianCloud {
    using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
    using Quats = Eigen::Matrix<Scalar, Eigen::Dynamic, 4, Eigen::RowMajor>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    Points positions;
    Points log_scales;
    /// (w, x, y, z), normalized on use.
    Quats rotations;
    /// Logits; opacity = sigmoid(logit).
    Vector opacities;
    /// N x 3M raw coefficients, light m in columns [3m, 3m + 3).
    RowMatrix<Scalar> coeffs;

    GaussianCloud() = default;
    GaussianCloud(Eigen::Index count, int lights);

    Eigen::Index size() const { return positions.rows(); }
    int lights() const { return int(coeffs.cols() / 3); }
    /// Throws std::invalid_argument on inconsistent shapes or non-finite values.
    void validate() const;

    template <typename Other>
    GaussianCloud<Other> cast() const {
        GaussianCloud<Other> c;
        c.positions = positions.template cast<Other>();
        c.log_scales = log_scales.template cast<Other>();
        c.rotations = rotations.template cast<Other>();
        c.opacities = opacities.template cast<Other>();
        c.coeffs = coeffs.template cast<Other>();
        return c;
    }
};

/// Same shapes as the cloud; accumulates dL/d(raw parameter).
template <typename Scalar>
struct CloudGrad {
    typename GaussianCloud<Scalar>::Points positions;
    typename GaussianCloud<Scalar>::Points log_scales;
    typename GaussianCloud<Scalar>::Quats rotations;
    typename GaussianCloud<Scalar>::Vector opacities;
    RowMatrix<Scalar> coeffs;

    explicit CloudGrad(const GaussianCloud<Scalar>& like);
    void set_zero();
};

template <typename Scalar>
Scalar softplus(Scalar x) {
    return x > Scalar(20) ? x : std::log1p(std::exp(x));
}
template <typename Scalar>
Scalar inverse_softplus(Scalar y) {
    return y > Scalar(20) ? y : std::log(std::expm1(y));
}
template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

/// Effective nonnegative coefficients, N x 3M.
template <typename Scalar>
RowMatrix<Scalar> light_coefficients(const GaussianCloud<Scalar>& cloud);

/// Per-splat colors sum_m w_m * L_i[m]; weights is M x 3.
template <typename Scalar>
RowMatrix<Scalar> remix_colors(const GaussianCloud<Scalar>& cloud, const RowMatrix<Scalar>& weights);
/// Same, from effective coefficients already computed by light_coefficients.
template <typename Scalar>
RowMatrix<Scalar> mix_coefficients(const RowMatrix<Scalar>& coefficients, const RowMatrix<Scalar>& weights);

template <typename Scalar>
struct RasterSettings {
    /// Stop a pixel once transmittance would fall below this; 0 disables.
    Scalar early_stop = Scalar(1e-4);
    Scalar alpha_max = Scalar(0.99);
    Scalar near = Scalar(0.02);
    /// Added to the screen-space covariance diagonal (pixels^2).
    Scalar blur = Scalar(0.3);
    /// Clamp on |tan| of the view angle used for the projection Jacobian,
    /// as a multiple of the half field of view.
    Scalar frustum_margin = Scalar(1.3);
};

inline constexpr int kTileSize = 16;

template <typename Scalar>
struct ProjectedSplat {
    Scalar u = 0, v = 0;
    /// Inverse screen covariance (a, b, c): q = a dx^2 + 2 b dx dy + c dy^2.
    Scalar a = 0, b = 0, c = 0;
    Scalar opacity = 0;
    Scalar depth = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel rect, half-open
    bool visible = false;
};

/// Forward result plus what the backward pass needs.
template <typename Scalar>
struct RasterResult {
    int width = 0, height = 0, channels = 0;
    /// pixels x channels, pixel (x, y) at row y * width + x.
    RowMatrix<Scalar> image;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> transmittance;
    std::vector<ProjectedSplat<Scalar>> splats;
    /// Per-tile splat indices in front-to-back order (CSR).
    std::vector<std::uint32_t> tile_offsets;
    std::vector<std::uint32_t> tile_splats;
    /// Per pixel, one past the last tile-list position that contributed.
    std::vector<std::uint32_t> last;
};

template <typename Scalar>
ProjectedSplat<Scalar> project_splat(const GaussianCloud<Scalar>& cloud, Eigen::Index i, const Camera& cam,
                                     const RasterSettings<Scalar>& settings);

/// Depth-sorted front-to-back alpha compositing of N x C colors.
template <typename Scalar>
RasterResult<Scalar> rasterize(const GaussianCloud<Scalar>& cloud, const Camera& cam, const RowMatrix<Scalar>& colors,
                               const RasterSettings<Scalar>& settings = {});

/// Accumulates geometry gradients into `grad` (coeffs untouched) and color
/// gradients into `d_colors` (N x C) given dL/d(image).
template <typename Scalar>
void rasterize_backward(const GaussianCloud<Scalar>& cloud, const Camera& cam, const RowMatrix<Scalar>& colors,
                        const RasterResult<Scalar>& forward, const RowMatrix<Scalar>& d_image, CloudGrad<Scalar>& grad,
                        RowMatrix<Scalar>& d_colors, const RasterSettings<Scalar>& settings = {});

/// Three-channel convenience wrappers.
HdrImage to_hdr(const RasterResult<float>& r, int channel_offset = 0);
HdrImage render_colors(const GaussianCloud<float>& cloud, const Camera& cam, const RowMatrix<float>& colors,
                       const RasterSettings<float>& settings = {});
HdrImage render_light(const GaussianCloud<float>& cloud, const Camera& cam, int m, const RasterSettings<float>& settings = {});
/// One pass with per-splat color sum_m w_m * L_i[m].
HdrImage render_remix(const GaussianCloud<float>& cloud, const Camera& cam, const RowMatrix<float>& weights,
                      const RasterSettings<float>& settings = {});

}  // namespace luxmix
