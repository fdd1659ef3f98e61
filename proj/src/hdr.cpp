#include "luxmix/hdr.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace luxmix {

HdrImage apply_exposure(const HdrImage& img, double ev) {
    if (!std::isfinite(ev)) throw std::invalid_argument("apply_exposure: exposure value must be finite");
    const float gain = static_cast<float>(std::exp2(ev));
    return HdrImage(img.width(), img.height(), img.pixels() * gain);
}

LdrImage tonemap_curve(const HdrImage& img, const ToneCurve& curve) {
    if (!curve.valid()) throw std::invalid_argument("tonemap_curve: invalid tone curve");
    LdrImage out(img.width(), img.height());
    out.pixels() = img.pixels().unaryExpr([&](float x) { return curve.apply(x); });
    return out;
}

namespace {

// Inset/outset matrices of the AgX base look, rows act on column RGB vectors.
const Eigen::Matrix3d& agx_inset() {
    static const Eigen::Matrix3d m = [] {
        Eigen::Matrix3d r;
        r << 0.842479062253094, 0.0784335999999992, 0.0792237451477643,
             0.0423282422610123, 0.878468636469772, 0.0791661274605434,
             0.0423756549057051, 0.0784336, 0.879142973793104;
        return r;
    }();
    return m;
}

const Eigen::Matrix3d& agx_outset() {
    static const Eigen::Matrix3d m = [] {
        Eigen::Matrix3d r;
        r << 1.19687900512017, -0.0980208811401368, -0.0990297440797205,
             -0.0528968517574562, 1.15190312990417, -0.0989611768448433,
             -0.0529716355144438, -0.0980434501171241, 1.15107367264116;
        return r;
    }();
    return m;
}

constexpr double kAgxMinEv = -12.47393;
constexpr double kAgxMaxEv = 4.026069;

double agx_contrast(double x) {
    const double x2 = x * x;
    const double x4 = x2 * x2;
    return 15.5 * x4 * x2 - 40.14 * x4 * x + 31.96 * x4 - 6.868 * x2 * x + 0.4298 * x2 + 0.1191 * x - 0.00232;
}

}  // namespace

double srgb_encode(double linear) {
    if (linear <= 0.0031308) return 12.92 * linear;
    return 1.055 * std::pow(linear, 1.0 / 2.4) - 0.055;
}

double srgb_decode(double encoded) {
    if (encoded <= 0.04045) return encoded / 12.92;
    return std::pow((encoded + 0.055) / 1.055, 2.4);
}

Eigen::Array3d agx_display(const Eigen::Array3d& linear_rgb) {
    Eigen::Vector3d v = agx_inset() * linear_rgb.max(0.0).matrix();
    for (int c = 0; c < 3; ++c) {
        const double ev = v[c] > 0.0 ? std::clamp(std::log2(v[c]), kAgxMinEv, kAgxMaxEv) : kAgxMinEv;
        v[c] = agx_contrast((ev - kAgxMinEv) / (kAgxMaxEv - kAgxMinEv));
    }
    v = agx_outset() * v;
    Eigen::Array3d out;
    for (int c = 0; c < 3; ++c) {
        const double lin = std::pow(std::clamp(v[c], 0.0, 1.0), 2.2);
        out[c] = std::clamp(srgb_encode(lin), 0.0, 1.0);
    }
    return out;
}

LdrImage tonemap_agx(const HdrImage& img) {
    LdrImage out(img.width(), img.height());
    for (Eigen::Index i = 0; i < img.pixel_count(); ++i) {
        const Eigen::Array3d rgb = img.pixels().row(i).transpose().cast<double>();
        out.pixels().row(i) = agx_display(rgb).cast<float>().transpose();
    }
    return out;
}

ExposureBracket simulate_bracket(const HdrImage& img, double ev, const ToneCurve& curve) {
    return ExposureBracket{tonemap_curve(apply_exposure(img, ev), curve), ev};
}

HdrImage merge_brackets(std::span<const ExposureBracket> brackets, const ToneCurve& curve) {
    if (brackets.empty()) throw std::invalid_argument("merge_brackets: no brackets");
    if (!curve.valid()) throw std::invalid_argument("merge_brackets: invalid tone curve");
    const LdrImage& first = brackets.front().image;
    for (const auto& b : brackets) {
        require_same_shape(first, b.image, "merge_brackets");
        if (!std::isfinite(b.ev)) throw std::invalid_argument("merge_brackets: exposure value must be finite");
    }
    const auto lowest = std::min_element(brackets.begin(), brackets.end(),
                                         [](const auto& a, const auto& b) { return a.ev < b.ev; });

    HdrImage out(first.width(), first.height());
    const Eigen::Index n = first.pixel_count();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            double weighted = 0.0;
            double weight_sum = 0.0;
            for (const auto& b : brackets) {
                const double level = b.image.pixels()(i, c);
                if (level >= kSaturationLevel) continue;
                const double w = 1.0 - std::abs(2.0 * level - 1.0);
                if (w <= 0.0) continue;
                const double radiance = curve.invert(level) / std::exp2(b.ev);
                weighted += w * radiance;
                weight_sum += w;
            }
            double value;
            if (weight_sum > 0.0) {
                value = weighted / weight_sum;
            } else {
                value = curve.invert(double(lowest->image.pixels()(i, c))) / std::exp2(lowest->ev);
            }
            out.pixels()(i, c) = static_cast<float>(std::max(value, 0.0));
        }
    }
    return out;
}

}  // namespace luxmix
