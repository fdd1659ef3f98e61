#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace luxmix {

/// Tag for scene-referred linear radiance.
struct LinearEncoding {};
/// Tag for display-referred values in [0, 1].
struct DisplayEncoding {};

/// Dense RGB raster. Pixels are stored row-major, one row of the
/// underlying array per pixel, pixel (x, y) at row y * width + x.
template <typename Scalar, typename Encoding>
class Image {
public:
    using Pixels = Eigen::Array<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
    using scalar_type = Scalar;
    using encoding_type = Encoding;

    Image() = default;

    Image(int width, int height, Scalar fill = Scalar(0))
        : width_(width), height_(height), pixels_(Pixels::Constant(Eigen::Index(width) * height, 3, fill)) {
        if (width < 0 || height < 0) throw std::invalid_argument("image dimensions must be nonnegative");
    }

    Image(int width, int height, Pixels pixels) : width_(width), height_(height), pixels_(std::move(pixels)) {
        if (pixels_.rows() != Eigen::Index(width) * height)
            throw std::invalid_argument("pixel count does not match image dimensions");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    Eigen::Index pixel_count() const { return pixels_.rows(); }
    bool empty() const { return pixels_.rows() == 0; }

    Pixels& pixels() { return pixels_; }
    const Pixels& pixels() const { return pixels_; }

    Eigen::Index index(int x, int y) const { return Eigen::Index(y) * width_ + x; }
    auto pixel(int x, int y) { return pixels_.row(index(x, y)); }
    auto pixel(int x, int y) const { return pixels_.row(index(x, y)); }

    template <typename OtherScalar, typename OtherEncoding>
    bool same_shape(const Image<OtherScalar, OtherEncoding>& other) const {
        return width_ == other.width() && height_ == other.height();
    }

    /// Same pixels, different declared encoding. Used where a value range is
    /// known to satisfy the target invariant.
    template <typename OtherEncoding>
    Image<Scalar, OtherEncoding> reinterpret() const {
        return Image<Scalar, OtherEncoding>(width_, height_, pixels_);
    }

    template <typename OtherScalar>
    Image<OtherScalar, Encoding> cast() const {
        return Image<OtherScalar, Encoding>(width_, height_, pixels_.template cast<OtherScalar>());
    }

private:
    int width_ = 0;
    int height_ = 0;
    Pixels pixels_;
};

using HdrImage = Image<float, LinearEncoding>;
using LdrImage = Image<float, DisplayEncoding>;

/// Binary raster, rows = height.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Scalar raster (depth in meters), rows = height.
using ScalarRaster = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rgb = Eigen::Array3f;

template <typename Scalar, typename Encoding>
bool is_valid_hdr(const Image<Scalar, Encoding>& img) {
    return img.pixels().allFinite() && (img.pixels() >= Scalar(0)).all();
}

template <typename Scalar>
bool is_valid_ldr(const Image<Scalar, DisplayEncoding>& img) {
    return img.pixels().allFinite() && (img.pixels() >= Scalar(0)).all() && (img.pixels() <= Scalar(1)).all();
}

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": image dimensions differ");
}

/// Rec. 709 luminance per pixel, as a column vector.
template <typename Scalar, typename Encoding>
Eigen::Array<Scalar, Eigen::Dynamic, 1> luminance(const Image<Scalar, Encoding>& img) {
    const auto& p = img.pixels();
    return Scalar(0.2126) * p.col(0) + Scalar(0.7152) * p.col(1) + Scalar(0.0722) * p.col(2);
}

}  // namespace luxmix
