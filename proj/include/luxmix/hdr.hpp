#pragma once

#include "luxmix/image.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace luxmix {

/// Learnable display curve T(x) = (x + offset)^(1/gamma).
struct ToneCurve {
    double gamma = 2.2;
    double offset = 0.0;

    bool valid() const { return std::isfinite(gamma) && std::isfinite(offset) && gamma > 0.0 && offset >= 0.0; }

    template <typename Scalar>
    Scalar apply(Scalar x) const {
        const Scalar base = std::max(x + Scalar(offset), Scalar(0));
        const Scalar v = std::pow(base, Scalar(1.0 / gamma));
        return std::clamp(v, Scalar(0), Scalar(1));
    }

    /// Inverse on the unclamped range: x = L^gamma - offset.
    template <typename Scalar>
    Scalar invert(Scalar display) const {
        return std::pow(display, Scalar(gamma)) - Scalar(offset);
    }
};

struct ExposureBracket {
    LdrImage image;
    double ev = 0.0;
};

/// Display values at or above this are treated as clipped during merging.
inline constexpr float kSaturationLevel = 0.999f;

HdrImage apply_exposure(const HdrImage& img, double ev);

LdrImage tonemap_curve(const HdrImage& img, const ToneCurve& curve);

/// AgX display transform: inset matrix, log2 encoding over [-12.47393, 4.026069] EV,
/// 6th-order sigmoid polynomial, outset matrix, 2.2 display EOTF and sRGB encode.
LdrImage tonemap_agx(const HdrImage& img);

/// Scalar AgX for one linear RGB triple.
Eigen::Array3d agx_display(const Eigen::Array3d& linear_rgb);

double srgb_encode(double linear);
double srgb_decode(double encoded);

ExposureBracket simulate_bracket(const HdrImage& img, double ev, const ToneCurve& curve);

/// Fuses brackets synthesized with a known curve. Per channel: invert the curve,
/// divide by 2^ev, hat-weight the estimates; clipped samples get zero weight.
/// Pixels clipped in every bracket fall back to the lowest-ev estimate.
HdrImage merge_brackets(std::span<const ExposureBracket> brackets, const ToneCurve& curve);

}  // namespace luxmix
