#include "luxmix/splat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace luxmix {

template <typename Scalar>
GaussianCloud<Scalar>::GaussianCloud(Eigen::Index count, int lights)
    : positions(Points::Zero(count, 3)),
      log_scales(Points::Zero(count, 3)),
      rotations(Quats::Zero(count, 4)),
      opacities(Vector::Zero(count)),
      coeffs(RowMatrix<Scalar>::Zero(count, 3 * lights)) {
    if (lights < 1) throw std::invalid_argument("GaussianCloud: at least one light slot required");
    rotations.col(0).setOnes();
}

template <typename Scalar>
void GaussianCloud<Scalar>::validate() const {
    const Eigen::Index n = size();
    if (log_scales.rows() != n || rotations.rows() != n || opacities.rows() != n || coeffs.rows() != n)
        throw std::invalid_argument("GaussianCloud: parameter arrays disagree on the splat count");
    if (coeffs.cols() < 3 || coeffs.cols() % 3 != 0) throw std::invalid_argument("GaussianCloud: coefficient block must be N x 3M");
    if (!positions.allFinite() || !log_scales.allFinite() || !rotations.allFinite() || !opacities.allFinite() ||
        !coeffs.allFinite())
        throw std::invalid_argument("GaussianCloud: non-finite parameter");
    if ((rotations.rowwise().squaredNorm().array() == Scalar(0)).any())
        throw std::invalid_argument("GaussianCloud: zero quaternion");
}

template <typename Scalar>
CloudGrad<Scalar>::CloudGrad(const GaussianCloud<Scalar>& like)
    : positions(like.positions.rows(), 3),
      log_scales(like.log_scales.rows(), 3),
      rotations(like.rotations.rows(), 4),
      opacities(like.opacities.rows()),
      coeffs(like.coeffs.rows(), like.coeffs.cols()) {
    set_zero();
}

template <typename Scalar>
void CloudGrad<Scalar>::set_zero() {
    positions.setZero();
    log_scales.setZero();
    rotations.setZero();
    opacities.setZero();
    coeffs.setZero();
}

template <typename Scalar>
RowMatrix<Scalar> light_coefficients(const GaussianCloud<Scalar>& cloud) {
    return cloud.coeffs.unaryExpr([](Scalar x) { return softplus(x); });
}

template <typename Scalar>
RowMatrix<Scalar> mix_coefficients(const RowMatrix<Scalar>& coefficients, const RowMatrix<Scalar>& weights) {
    const Eigen::Index m = coefficients.cols() / 3;
    if (coefficients.cols() != 3 * m || weights.rows() != m || weights.cols() != 3)
        throw std::invalid_argument("mix_coefficients: weights must be M x 3 for N x 3M coefficients");
    RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(coefficients.rows(), 3);
    for (Eigen::Index l = 0; l < m; ++l)
        out.array() += coefficients.middleCols(3 * l, 3).array().rowwise() * weights.row(l).array();
    return out;
}

template <typename Scalar>
RowMatrix<Scalar> remix_colors(const GaussianCloud<Scalar>& cloud, const RowMatrix<Scalar>& weights) {
    if (weights.rows() != cloud.lights() || weights.cols() != 3) throw std::invalid_argument("remix_colors: weights must be M x 3");
    return mix_coefficients(light_coefficients(cloud), weights);
}

namespace {

template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Vec3s = Eigen::Matrix<Scalar, 3, 1>;

template <typename Scalar>
Mat3<Scalar> quat_to_matrix(Scalar w, Scalar x, Scalar y, Scalar z) {
    Mat3<Scalar> r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// q(d) = a dx^2 + 2 b dx dy + c dy^2 is cut at 3 sigma; the kernel is shifted
// so it reaches zero continuously there.
constexpr double kCutoff = 9.0;
const double kTail = std::exp(-0.5 * kCutoff);
const double kKernelScale = 1.0 / (1.0 - kTail);

/// Everything the projection backward pass needs, recomputed per splat.
template <typename Scalar>
struct Projection {
    Vec3s<Scalar> t;           // camera-frame mean
    Scalar ty_c = 0, tz_c = 0;  // clamped lateral components used by J
    bool clamp_y = false, clamp_z = false;
    Scalar lim_y = 0, lim_z = 0;
    Eigen::Matrix<Scalar, 2, 3> J;
    Mat3<Scalar> rot;       // Gaussian rotation from the normalized quaternion
    Vec3s<Scalar> scale;
    Mat3<Scalar> cov_cam;
    Eigen::Matrix<Scalar, 2, 2> cov2;
    Scalar f = 0;
};

template <typename Scalar>
bool project(const GaussianCloud<Scalar>& cloud, Eigen::Index i, const Camera& cam, const RasterSettings<Scalar>& s,
             Projection<Scalar>& p) {
    const Mat3<Scalar> rc = cam.pose.linear().cast<Scalar>();
    const Vec3s<Scalar> center = cam.position().cast<Scalar>();
    p.t = rc.transpose() * (cloud.positions.row(i).transpose() - center);
    if (!(p.t.x() >= s.near)) return false;
    p.f = Scalar(cam.focal());
    const Scalar tan_half = Scalar(0.5 * cam.width / cam.focal());
    p.lim_y = s.frustum_margin * tan_half;
    p.lim_z = s.frustum_margin * tan_half * Scalar(cam.height) / Scalar(cam.width);
    const Scalar tx = p.t.x();
    const Scalar ry = p.t.y() / tx, rz = p.t.z() / tx;
    p.clamp_y = std::abs(ry) > p.lim_y;
    p.clamp_z = std::abs(rz) > p.lim_z;
    p.ty_c = std::clamp(ry, -p.lim_y, p.lim_y) * tx;
    p.tz_c = std::clamp(rz, -p.lim_z, p.lim_z) * tx;
    p.J << p.f * p.ty_c / (tx * tx), -p.f / tx, Scalar(0),
           p.f * p.tz_c / (tx * tx), Scalar(0), -p.f / tx;

    Eigen::Matrix<Scalar, 4, 1> q = cloud.rotations.row(i).transpose();
    q /= q.norm();
    p.rot = quat_to_matrix(q[0], q[1], q[2], q[3]);
    p.scale = cloud.log_scales.row(i).transpose().array().exp().matrix();
    const Mat3<Scalar> m = p.rot * p.scale.asDiagonal();
    p.cov_cam = rc.transpose() * (m * m.transpose()) * rc;
    p.cov2 = p.J * p.cov_cam * p.J.transpose();
    p.cov2(0, 0) += s.blur;
    p.cov2(1, 1) += s.blur;
    return true;
}

}  // namespace

namespace {

// Columns of the row at offset dy whose centers fall inside the q < 9 ellipse,
// clipped to [x0, x1). The caller still tests q per pixel.
template <typename Scalar>
bool row_span(const ProjectedSplat<Scalar>& s, Scalar dy, int x0, int x1, int& xa, int& xb) {
    const Scalar disc = s.b * s.b * dy * dy - s.a * (s.c * dy * dy - Scalar(kCutoff));
    if (!(disc > Scalar(0))) return false;
    const Scalar root = std::sqrt(disc), mid = s.u - Scalar(0.5) - s.b * dy / s.a, half = root / s.a;
    xa = std::max(x0, int(std::ceil(std::max(mid - half, Scalar(x0 - 1)) - Scalar(1e-3))));
    xb = std::min(x1, int(std::floor(std::min(mid + half, Scalar(x1)) + Scalar(1e-3))) + 1);
    return xa < xb;
}

// q and exp(-q/2) for pixels [xa, xb) of one row. q is quadratic in x, so the
// exponential follows a two-term product recurrence along the row; step is
// exp(-a).
template <typename Scalar>
void kernel_row(const ProjectedSplat<Scalar>& s, Scalar step, Scalar dy, int xa, int xb, Scalar* q, Scalar* e) {
    const int len = xb - xa;
    const Scalar by = Scalar(2) * s.b * dy, cy = s.c * dy * dy;
    const Scalar dx0 = Scalar(xa) + Scalar(0.5) - s.u;
    for (int i = 0; i < len; ++i) {
        const Scalar dx = dx0 + Scalar(i);
        q[i] = (s.a * dx + by) * dx + cy;
    }
    e[0] = std::exp(Scalar(-0.5) * q[0]);
    if (len == 1) return;
    Scalar ratio = std::exp(Scalar(-0.5) * (Scalar(2) * s.a * dx0 + s.a + by));
    for (int i = 1; i < len; ++i) {
        e[i] = e[i - 1] * ratio;
        ratio *= step;
    }
}

}  // namespace

template <typename Scalar>
ProjectedSplat<Scalar> project_splat(const GaussianCloud<Scalar>& cloud, Eigen::Index i, const Camera& cam,
                                     const RasterSettings<Scalar>& settings) {
    ProjectedSplat<Scalar> out;
    {
        // Conservative screen-space cull before building the covariance.
        const Vec3s<Scalar> t = cam.pose.linear().cast<Scalar>().transpose() *
                                (cloud.positions.row(i).transpose() - cam.position().cast<Scalar>());
        if (!(t.x() >= settings.near)) return out;
        const double f = cam.focal(), tan_half = 0.5 * cam.width / f;
        const double lim_y = double(settings.frustum_margin) * tan_half, lim_z = lim_y * cam.height / cam.width;
        const double smax = std::exp(double(cloud.log_scales.row(i).maxCoeff())) * f / double(t.x());
        const double sb = std::sqrt(std::max(double(settings.blur), 0.0));
        const double rx = 3.01 * (smax * std::sqrt(1.0 + lim_y * lim_y) + sb) + 1.0;
        const double ry = 3.01 * (smax * std::sqrt(1.0 + lim_z * lim_z) + sb) + 1.0;
        const double u = 0.5 * cam.width - f * double(t.y()) / double(t.x());
        const double v = 0.5 * cam.height - f * double(t.z()) / double(t.x());
        if (u + rx < 0.0 || u - rx > cam.width || v + ry < 0.0 || v - ry > cam.height) return out;
    }
    Projection<Scalar> p;
    if (!project(cloud, i, cam, settings, p)) return out;
    const Scalar A = p.cov2(0, 0), B = p.cov2(0, 1), D = p.cov2(1, 1);
    const Scalar det = A * D - B * B;
    if (!(det > Scalar(0))) return out;
    out.u = Scalar(0.5 * cam.width) - p.f * p.t.y() / p.t.x();
    out.v = Scalar(0.5 * cam.height) - p.f * p.t.z() / p.t.x();
    out.a = D / det;
    out.b = -B / det;
    out.c = A / det;
    out.opacity = sigmoid(cloud.opacities[i]);
    out.depth = p.t.x();
    // Axis extents of the q < 9 ellipse are 3 sqrt(Sigma_xx), 3 sqrt(Sigma_yy).
    const Scalar rx = Scalar(3.0001) * std::sqrt(A), ry = Scalar(3.0001) * std::sqrt(D);
    if (!std::isfinite(out.u) || !std::isfinite(out.v) || !std::isfinite(rx) || !std::isfinite(ry)) return out;
    // Pixel x is covered when |x + 0.5 - u| <= rx.
    const double fx0 = std::ceil(double(out.u - rx) - 0.5), fx1 = std::floor(double(out.u + rx) - 0.5) + 1.0;
    const double fy0 = std::ceil(double(out.v - ry) - 0.5), fy1 = std::floor(double(out.v + ry) - 0.5) + 1.0;
    out.x0 = int(std::clamp(fx0, 0.0, double(cam.width)));
    out.x1 = int(std::clamp(fx1, 0.0, double(cam.width)));
    out.y0 = int(std::clamp(fy0, 0.0, double(cam.height)));
    out.y1 = int(std::clamp(fy1, 0.0, double(cam.height)));
    out.visible = out.x0 < out.x1 && out.y0 < out.y1 && out.opacity > Scalar(0);
    return out;
}

namespace {

// Front-to-back compositing of every tile. CH is the channel count when known
// at compile time.
template <typename Scalar, int CH>
void composite(RasterResult<Scalar>& r, const RowMatrix<Scalar>& colors, const RasterSettings<Scalar>& settings) {
    const int w = r.width, h = r.height, ch = CH == Eigen::Dynamic ? r.channels : CH;
    const int tiles_x = (w + kTileSize - 1) / kTileSize, tiles_y = (h + kTileSize - 1) / kTileSize;
    const Scalar tail = Scalar(kTail), kscale = Scalar(kKernelScale), cutoff = Scalar(kCutoff);
    const Scalar amax = settings.alpha_max, early = settings.early_stop;
    constexpr int kPix = kTileSize * kTileSize;
    Scalar T[kPix];
    // 1 while a pixel still accepts splats.
    Scalar live[kPix];
    // Tile-list position of the last contribution, exact in Scalar below 2^24.
    Scalar last[kPix];
    // Planar accumulators, channel c of pixel lp at c * kPix + lp.
    std::vector<Scalar> acc(std::size_t(kPix) * std::size_t(ch));
    Scalar qbuf[kTileSize], ebuf[kTileSize];
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            const int bx0 = tx * kTileSize, by0 = ty * kTileSize;
            const int bx1 = std::min(w, bx0 + kTileSize), by1 = std::min(h, by0 + kTileSize);
            int alive = (bx1 - bx0) * (by1 - by0);
            std::fill(std::begin(T), std::end(T), Scalar(1));
            std::fill(std::begin(live), std::end(live), Scalar(1));
            std::fill(std::begin(last), std::end(last), Scalar(0));
            std::fill(acc.begin(), acc.end(), Scalar(0));
            const std::size_t t = std::size_t(ty) * tiles_x + tx;
            const std::uint32_t begin = r.tile_offsets[t], end = r.tile_offsets[t + 1];
            for (std::uint32_t k = begin; k < end && alive > 0; ++k) {
                const std::uint32_t idx = r.tile_splats[k];
                const ProjectedSplat<Scalar>& s = r.splats[idx];
                const Scalar* color = colors.data() + std::size_t(idx) * ch;
                const Scalar op = s.opacity;
                const int x0 = std::max(s.x0, bx0), x1 = std::min(s.x1, bx1);
                const int y0 = std::max(s.y0, by0), y1 = std::min(s.y1, by1);
                const Scalar step = std::exp(-s.a);
                for (int y = y0; y < y1; ++y) {
                    const Scalar dy = Scalar(y) + Scalar(0.5) - s.v;
                    int xa, xb;
                    if (!row_span(s, dy, x0, x1, xa, xb)) continue;
                    kernel_row(s, step, dy, xa, xb, qbuf, ebuf);
                    const int base = (y - by0) * kTileSize - bx0 + xa;
                    const int len = xb - xa;
                    const Scalar pos = Scalar(k - begin + 1);
                    Scalar wbuf[kTileSize];
                    Scalar stopped = 0;
                    // Selects only, so the row vectorizes; pixels of one row are independent.
                    for (int i = 0; i < len; ++i) {
                        const int lp = base + i;
                        const Scalar inside = qbuf[i] < cutoff ? live[lp] : Scalar(0);
                        const Scalar raw = op * ((ebuf[i] - tail) * kscale);
                        const Scalar pos_raw = raw > Scalar(0) ? raw : Scalar(0);
                        const Scalar alpha = pos_raw < amax ? pos_raw : amax;
                        const Scalar t = T[lp];
                        const Scalar next = t * (Scalar(1) - alpha);
                        const Scalar stop = next < early ? inside : Scalar(0);
                        const Scalar tk = inside - stop;
                        wbuf[i] = tk > Scalar(0) ? alpha * t : Scalar(0);
                        T[lp] = tk > Scalar(0) ? next : t;
                        last[lp] = tk > Scalar(0) ? pos : last[lp];
                        live[lp] -= stop;
                        stopped += stop;
                    }
                    alive -= int(stopped);
                    for (int c = 0; c < ch; ++c) {
                        Scalar* out = acc.data() + std::size_t(c) * kPix + base;
                        const Scalar col = color[c];
                        for (int i = 0; i < len; ++i) out[i] += wbuf[i] * col;
                    }
                }
            }
            for (int y = by0; y < by1; ++y)
                for (int x = bx0; x < bx1; ++x) {
                    const int lp = (y - by0) * kTileSize + (x - bx0);
                    const std::size_t pix = std::size_t(y) * w + x;
                    r.transmittance[Eigen::Index(pix)] = T[lp];
                    r.last[pix] = std::uint32_t(last[lp]);
                    for (int c = 0; c < ch; ++c) r.image.data()[pix * ch + std::size_t(c)] = acc[std::size_t(c) * kPix + std::size_t(lp)];
                }
        }
    }
}

}  // namespace

template <typename Scalar>
RasterResult<Scalar> rasterize(const GaussianCloud<Scalar>& cloud, const Camera& cam, const RowMatrix<Scalar>& colors,
                               const RasterSettings<Scalar>& settings) {
    if (cam.kind != CameraKind::Perspective) throw std::invalid_argument("rasterize: perspective camera required");
    if (colors.rows() != cloud.size()) throw std::invalid_argument("rasterize: one color row per splat required");
    const Eigen::Index n = cloud.size();
    const int w = cam.width, h = cam.height, ch = int(colors.cols());
    RasterResult<Scalar> r;
    r.width = w;
    r.height = h;
    r.channels = ch;
    r.image = RowMatrix<Scalar>::Zero(Eigen::Index(w) * h, ch);
    r.transmittance = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(Eigen::Index(w) * h);
    r.last.assign(std::size_t(w) * std::size_t(h), 0);
    r.splats.resize(std::size_t(n));

    std::vector<std::uint32_t> order;
    order.reserve(std::size_t(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        r.splats[std::size_t(i)] = project_splat(cloud, i, cam, settings);
        if (r.splats[std::size_t(i)].visible) order.push_back(std::uint32_t(i));
    }
    std::sort(order.begin(), order.end(), [&](std::uint32_t x, std::uint32_t y) {
        const Scalar dx = r.splats[x].depth, dy = r.splats[y].depth;
        return dx < dy || (dx == dy && x < y);
    });

    const int tiles_x = (w + kTileSize - 1) / kTileSize, tiles_y = (h + kTileSize - 1) / kTileSize;
    const std::size_t tiles = std::size_t(tiles_x) * std::size_t(tiles_y);
    r.tile_offsets.assign(tiles + 1, 0);
    auto for_tiles = [&](const ProjectedSplat<Scalar>& s, auto&& fn) {
        for (int ty = s.y0 / kTileSize; ty <= (s.y1 - 1) / kTileSize; ++ty)
            for (int tx = s.x0 / kTileSize; tx <= (s.x1 - 1) / kTileSize; ++tx) fn(std::size_t(ty) * tiles_x + tx);
    };
    for (std::uint32_t i : order) for_tiles(r.splats[i], [&](std::size_t t) { ++r.tile_offsets[t + 1]; });
    for (std::size_t t = 0; t < tiles; ++t) {
        if (r.tile_offsets[t + 1] >= (1u << 24)) throw std::length_error("rasterize: too many splats in one tile");
        r.tile_offsets[t + 1] += r.tile_offsets[t];
    }
    r.tile_splats.resize(r.tile_offsets.back());
    {
        std::vector<std::uint32_t> fill(r.tile_offsets.begin(), r.tile_offsets.end() - 1);
        for (std::uint32_t i : order) for_tiles(r.splats[i], [&](std::size_t t) { r.tile_splats[fill[t]++] = i; });
    }

    if (ch == 3)
        composite<Scalar, 3>(r, colors, settings);
    else
        composite<Scalar, Eigen::Dynamic>(r, colors, settings);
    return r;
}

namespace {

template <typename Scalar>
void project_backward(const GaussianCloud<Scalar>& cloud, Eigen::Index i, const Camera& cam,
                      const RasterSettings<Scalar>& settings, Scalar d_u, Scalar d_v, Scalar d_a, Scalar d_b, Scalar d_c,
                      CloudGrad<Scalar>& grad) {
    Projection<Scalar> p;
    if (!project(cloud, i, cam, settings, p)) return;
    const Eigen::Matrix<Scalar, 2, 2> conic = p.cov2.inverse();
    // q uses b twice, so each off-diagonal entry of the conic carries half.
    Eigen::Matrix<Scalar, 2, 2> g_conic;
    g_conic << d_a, Scalar(0.5) * d_b, Scalar(0.5) * d_b, d_c;
    const Eigen::Matrix<Scalar, 2, 2> g_cov2 = -conic * g_conic * conic;
    const Mat3<Scalar> g_cov_cam = p.J.transpose() * g_cov2 * p.J;
    const Eigen::Matrix<Scalar, 2, 3> g_J = Scalar(2) * g_cov2 * p.J * p.cov_cam;

    const Mat3<Scalar> rc = cam.pose.linear().cast<Scalar>();
    const Mat3<Scalar> g_cov3 = rc * g_cov_cam * rc.transpose();
    const Mat3<Scalar> m = p.rot * p.scale.asDiagonal();
    const Mat3<Scalar> g_m = Scalar(2) * g_cov3 * m;
    for (int j = 0; j < 3; ++j) grad.log_scales(i, j) += g_m.col(j).dot(p.rot.col(j)) * p.scale[j];
    const Mat3<Scalar> g_rot = g_m * p.scale.asDiagonal();

    Eigen::Matrix<Scalar, 4, 1> raw = cloud.rotations.row(i).transpose();
    const Scalar norm = raw.norm();
    const Eigen::Matrix<Scalar, 4, 1> q = raw / norm;
    const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<Scalar> dw, dx, dy, dz;
    dw << 0, -z, y, z, 0, -x, -y, x, 0;
    dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    Eigen::Matrix<Scalar, 4, 1> g_q(2 * g_rot.cwiseProduct(dw).sum(), 2 * g_rot.cwiseProduct(dx).sum(),
                                    2 * g_rot.cwiseProduct(dy).sum(), 2 * g_rot.cwiseProduct(dz).sum());
    grad.rotations.row(i) += ((g_q - q * q.dot(g_q)) / norm).transpose();

    const Scalar tx = p.t.x(), f = p.f;
    Vec3s<Scalar> g_t(d_u * f * p.t.y() / (tx * tx) + d_v * f * p.t.z() / (tx * tx), -d_u * f / tx, -d_v * f / tx);
    g_t.x() += g_J(0, 0) * (-2 * f * p.ty_c / (tx * tx * tx)) + g_J(0, 1) * (f / (tx * tx)) +
               g_J(1, 0) * (-2 * f * p.tz_c / (tx * tx * tx)) + g_J(1, 2) * (f / (tx * tx));
    const Scalar g_ty_c = g_J(0, 0) * f / (tx * tx), g_tz_c = g_J(1, 0) * f / (tx * tx);
    if (p.clamp_y)
        g_t.x() += g_ty_c * (p.t.y() > 0 ? p.lim_y : -p.lim_y);
    else
        g_t.y() += g_ty_c;
    if (p.clamp_z)
        g_t.x() += g_tz_c * (p.t.z() > 0 ? p.lim_z : -p.lim_z);
    else
        g_t.z() += g_tz_c;
    grad.positions.row(i) += (rc * g_t).transpose();
}

}  // namespace

template <typename Scalar>
void rasterize_backward(const GaussianCloud<Scalar>& cloud, const Camera& cam, const RowMatrix<Scalar>& colors,
                        const RasterResult<Scalar>& fwd, const RowMatrix<Scalar>& d_image, CloudGrad<Scalar>& grad,
                        RowMatrix<Scalar>& d_colors, const RasterSettings<Scalar>& settings) {
    const int w = fwd.width, h = fwd.height, ch = fwd.channels;
    const Eigen::Index n = cloud.size();
    if (d_image.rows() != Eigen::Index(w) * h || d_image.cols() != ch)
        throw std::invalid_argument("rasterize_backward: image gradient shape mismatch");
    if (d_colors.rows() != n || d_colors.cols() != ch) throw std::invalid_argument("rasterize_backward: color gradient shape mismatch");

    // Per-splat screen-space gradients: u, v, a, b, c, opacity.
    Eigen::Matrix<Scalar, Eigen::Dynamic, 6, Eigen::RowMajor> g2d = Eigen::Matrix<Scalar, Eigen::Dynamic, 6, Eigen::RowMajor>::Zero(n, 6);
    const Scalar tail = Scalar(kTail), kscale = Scalar(kKernelScale), cutoff = Scalar(kCutoff);
    const int tiles_x = (w + kTileSize - 1) / kTileSize, tiles_y = (h + kTileSize - 1) / kTileSize;
    Scalar T[kTileSize * kTileSize];
    Scalar qbuf[kTileSize], ebuf[kTileSize];
    std::vector<Scalar> accum(std::size_t(kTileSize * kTileSize) * std::size_t(ch));
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            const int bx0 = tx * kTileSize, by0 = ty * kTileSize;
            const int bx1 = std::min(w, bx0 + kTileSize), by1 = std::min(h, by0 + kTileSize);
            std::uint32_t max_last = 0;
            for (int y = by0; y < by1; ++y)
                for (int x = bx0; x < bx1; ++x) {
                    const std::size_t pix = std::size_t(y) * w + x;
                    T[(y - by0) * kTileSize + (x - bx0)] = fwd.transmittance[Eigen::Index(pix)];
                    max_last = std::max(max_last, fwd.last[pix]);
                }
            std::fill(accum.begin(), accum.end(), Scalar(0));
            const std::size_t t = std::size_t(ty) * tiles_x + tx;
            const std::uint32_t begin = fwd.tile_offsets[t];
            for (std::uint32_t k = begin + max_last; k-- > begin;) {
                const std::uint32_t idx = fwd.tile_splats[k];
                const ProjectedSplat<Scalar>& s = fwd.splats[idx];
                const Scalar* color = colors.data() + std::size_t(idx) * ch;
                Scalar* d_color = d_colors.data() + std::size_t(idx) * ch;
                auto g = g2d.row(idx);
                const int x0 = std::max(s.x0, bx0), x1 = std::min(s.x1, bx1);
                const int y0 = std::max(s.y0, by0), y1 = std::min(s.y1, by1);
                const Scalar step = std::exp(-s.a);
                for (int y = y0; y < y1; ++y) {
                    const Scalar dy = Scalar(y) + Scalar(0.5) - s.v;
                    int xa, xb;
                    if (!row_span(s, dy, x0, x1, xa, xb)) continue;
                    kernel_row(s, step, dy, xa, xb, qbuf, ebuf);
                    for (int x = xa; x < xb; ++x) {
                        const std::size_t pix = std::size_t(y) * w + x;
                        if (k - begin >= fwd.last[pix]) continue;
                        const Scalar dx = Scalar(x) + Scalar(0.5) - s.u;
                        const Scalar q = qbuf[x - xa];
                        if (!(q < cutoff)) continue;
                        const int lp = (y - by0) * kTileSize + (x - bx0);
                        const Scalar e = ebuf[x - xa];
                        const Scalar gk = (e - tail) * kscale;
                        const Scalar raw = s.opacity * gk;
                        const Scalar alpha = std::clamp(raw, Scalar(0), settings.alpha_max);
                        const Scalar t_i = T[lp] / (Scalar(1) - alpha);
                        const Scalar* d_pix = d_image.data() + pix * ch;
                        Scalar* acc = accum.data() + std::size_t(lp) * ch;
                        const Scalar weight = alpha * t_i;
                        Scalar d_alpha = 0;
                        for (int c = 0; c < ch; ++c) {
                            d_color[c] += weight * d_pix[c];
                            d_alpha += (color[c] - acc[c]) * d_pix[c];
                            acc[c] = alpha * color[c] + (Scalar(1) - alpha) * acc[c];
                        }
                        d_alpha *= t_i;
                        T[lp] = t_i;
                        if (raw <= Scalar(0) || raw >= settings.alpha_max) continue;
                        g[5] += d_alpha * gk;
                        const Scalar d_q = d_alpha * s.opacity * Scalar(-0.5) * e * kscale;
                        g[0] += d_q * Scalar(-2) * (s.a * dx + s.b * dy);
                        g[1] += d_q * Scalar(-2) * (s.b * dx + s.c * dy);
                        g[2] += d_q * dx * dx;
                        g[3] += d_q * Scalar(2) * dx * dy;
                        g[4] += d_q * dy * dy;
                    }
                }
            }
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!fwd.splats[std::size_t(i)].visible) continue;
        const auto g = g2d.row(i);
        if (g.isZero(0)) continue;
        const Scalar op = fwd.splats[std::size_t(i)].opacity;
        grad.opacities[i] += g[5] * op * (Scalar(1) - op);
        project_backward(cloud, i, cam, settings, g[0], g[1], g[2], g[3], g[4], grad);
    }
}

HdrImage to_hdr(const RasterResult<float>& r, int channel_offset) {
    if (channel_offset < 0 || channel_offset + 3 > r.channels) throw std::out_of_range("to_hdr: channel offset out of range");
    HdrImage img(r.width, r.height);
    img.pixels() = r.image.middleCols(channel_offset, 3).array().max(0.0f);
    return img;
}

HdrImage render_colors(const GaussianCloud<float>& cloud, const Camera& cam, const RowMatrix<float>& colors,
                       const RasterSettings<float>& settings) {
    return to_hdr(rasterize(cloud, cam, colors, settings));
}

HdrImage render_light(const GaussianCloud<float>& cloud, const Camera& cam, int m, const RasterSettings<float>& settings) {
    if (m < 0 || m >= cloud.lights()) throw std::out_of_range("render_light: light index out of range");
    const RowMatrix<float> colors = cloud.coeffs.middleCols(3 * m, 3).unaryExpr([](float x) { return softplus(x); });
    return render_colors(cloud, cam, colors, settings);
}

HdrImage render_remix(const GaussianCloud<float>& cloud, const Camera& cam, const RowMatrix<float>& weights,
                      const RasterSettings<float>& settings) {
    return render_colors(cloud, cam, remix_colors(cloud, weights), settings);
}

#define LUXMIX_INSTANTIATE(S)                                                                                           \
    template struct GaussianCloud<S>;                                                                                   \
    template struct CloudGrad<S>;                                                                                       \
    template RowMatrix<S> light_coefficients(const GaussianCloud<S>&);                                                  \
    template RowMatrix<S> remix_colors(const GaussianCloud<S>&, const RowMatrix<S>&);                                   \
    template RowMatrix<S> mix_coefficients(const RowMatrix<S>&, const RowMatrix<S>&);                                   \
    template ProjectedSplat<S> project_splat(const GaussianCloud<S>&, Eigen::Index, const Camera&, const RasterSettings<S>&); \
    template RasterResult<S> rasterize(const GaussianCloud<S>&, const Camera&, const RowMatrix<S>&, const RasterSettings<S>&); \
    template void rasterize_backward(const GaussianCloud<S>&, const Camera&, const RowMatrix<S>&, const RasterResult<S>&, \
                                     const RowMatrix<S>&, CloudGrad<S>&, RowMatrix<S>&, const RasterSettings<S>&);

LUXMIX_INSTANTIATE(float)
LUXMIX_INSTANTIATE(double)

}  // namespace luxmix
