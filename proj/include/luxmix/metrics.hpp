#pragma once

#include "luxmix/image.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace luxmix {

/// Single-channel plane, rows = height.
using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Normalized 11-tap Gaussian, sigma 1.5.
const Eigen::Array<double, kSsimWindow, 1>& ssim_kernel();

/// Mean SSIM over all positions where the window fits inside the image.
/// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2. Throws if smaller than the window.
double ssim_plane(const Plane& a, const Plane& b, double peak = 1.0);

/// Same value; writes d(ssim)/d(a) into `grad_a` (same shape as a).
double ssim_plane_grad(const Plane& a, const Plane& b, Plane& grad_a, double peak = 1.0);

enum class SsimMode { ChannelMean, Luminance };

template <typename Scalar, typename Encoding>
Plane to_plane(const Image<Scalar, Encoding>& img, int channel) {
    Plane p(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) p(y, x) = double(img.pixels()(img.index(x, y), channel));
    return p;
}

template <typename Scalar, typename Encoding>
Plane luminance_plane(const Image<Scalar, Encoding>& img) {
    Plane p(img.height(), img.width());
    const auto lum = luminance(img);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) p(y, x) = double(lum(img.index(x, y)));
    return p;
}

template <typename Scalar, typename Encoding>
double ssim(const Image<Scalar, Encoding>& a, const Image<Scalar, Encoding>& b, SsimMode mode = SsimMode::ChannelMean,
            double peak = 1.0) {
    require_same_shape(a, b, "ssim");
    if (mode == SsimMode::Luminance) return ssim_plane(luminance_plane(a), luminance_plane(b), peak);
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) sum += ssim_plane(to_plane(a, c), to_plane(b, c), peak);
    return sum / 3.0;
}

struct PsnrResult {
    double db = 0.0;
    /// Images were identical; db holds the 99 dB cap.
    bool capped = false;
};

inline constexpr double kPsnrCap = 99.0;

template <typename Scalar, typename Encoding>
double mse(const Image<Scalar, Encoding>& a, const Image<Scalar, Encoding>& b) {
    require_same_shape(a, b, "mse");
    if (a.pixel_count() == 0) return 0.0;
    return (a.pixels().template cast<double>() - b.pixels().template cast<double>()).square().mean();
}

template <typename Scalar, typename Encoding>
PsnrResult psnr(const Image<Scalar, Encoding>& a, const Image<Scalar, Encoding>& b, double peak = 1.0) {
    const double err = mse(a, b);
    if (err == 0.0) return {kPsnrCap, true};
    return {std::min(kPsnrCap, 10.0 * std::log10(peak * peak / err)), false};
}

template <typename Scalar, typename Encoding>
struct Rescaled {
    Image<Scalar, Encoding> image;
    Eigen::Array3d scales = Eigen::Array3d::Ones();
};

/// Per-channel least-squares scale of pred toward gt: s = <p, g> / <p, p>
/// (s = 1 for an all-zero channel).
template <typename Scalar, typename Encoding>
Rescaled<Scalar, Encoding> channel_rescale(const Image<Scalar, Encoding>& pred, const Image<Scalar, Encoding>& gt) {
    require_same_shape(pred, gt, "channel_rescale");
    Rescaled<Scalar, Encoding> out{pred, Eigen::Array3d::Ones()};
    for (int c = 0; c < 3; ++c) {
        const auto p = pred.pixels().col(c).template cast<double>();
        const auto g = gt.pixels().col(c).template cast<double>();
        const double pp = (p * p).sum();
        out.scales[c] = pp > 0.0 ? (p * g).sum() / pp : 1.0;
        out.image.pixels().col(c) = (p * out.scales[c]).template cast<Scalar>();
    }
    return out;
}

struct EvalResult {
    double psnr = 0.0;
    bool psnr_capped = false;
    double ssim = 0.0;
    Eigen::Array3d scales = Eigen::Array3d::Ones();
};

/// Rescale then score. Display-referred inputs are compared with peak 1.
template <typename Scalar, typename Encoding>
EvalResult evaluate(const Image<Scalar, Encoding>& pred, const Image<Scalar, Encoding>& gt, double peak = 1.0) {
    const auto r = channel_rescale(pred, gt);
    const auto p = psnr(r.image, gt, peak);
    return {p.db, p.capped, ssim(r.image, gt, SsimMode::ChannelMean, peak), r.scales};
}

struct EvalRow {
    std::string scene;
    std::string view;
    std::string light;
    EvalResult result;
};

/// CSV columns: scene,view,light,psnr,ssim,scale_r,scale_g,scale_b
void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalRow>& rows);

}  // namespace luxmix
