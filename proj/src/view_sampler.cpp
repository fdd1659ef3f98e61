#include "luxmix/view_sampler.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace luxmix {

using nlohmann::json;

void ViewRequest::validate() const {
    if (!(fov_deg > 20.0 && fov_deg < 120.0)) throw std::invalid_argument("view: fov must be in (20, 120) degrees");
    if (!std::isfinite(azimuth) || !(std::abs(elevation) <= std::numbers::pi / 2))
        throw std::invalid_argument("view: elevation must be within [-pi/2, pi/2]");
    if (width <= 0 || height <= 0) throw std::invalid_argument("view: resolution must be positive");
}

Camera ViewRequest::camera(const Camera& pano) const {
    validate();
    return Camera::perspective(fov_deg, width, height, make_pose(pano.pose.linear() * rotation(), pano.position()));
}

Eigen::Array3f sample_equirect(const HdrImage& pano, double u, double v) {
    const int w = pano.width(), h = pano.height();
    const double fx = u - 0.5, fy = v - 0.5;
    const double x0f = std::floor(fx), y0f = std::floor(fy);
    const float ax = float(fx - x0f), ay = float(fy - y0f);
    auto wrap = [w](long long x) { return int(((x % w) + w) % w); };
    const int x0 = wrap((long long)x0f), x1 = wrap((long long)x0f + 1);
    const int y0 = std::clamp(int(y0f), 0, h - 1), y1 = std::clamp(int(y0f) + 1, 0, h - 1);
    const auto& p = pano.pixels();
    const Eigen::Array3f top = (1 - ax) * p.row(pano.index(x0, y0)).transpose() + ax * p.row(pano.index(x1, y0)).transpose();
    const Eigen::Array3f bottom = (1 - ax) * p.row(pano.index(x0, y1)).transpose() + ax * p.row(pano.index(x1, y1)).transpose();
    return (1 - ay) * top + ay * bottom;
}

namespace {

void require_equirect(int width, int height) {
    if (width <= 0 || width != 2 * height) throw std::invalid_argument("panorama must be 2:1 equirect");
}

/// Calls fn(x, y, u, v) with the panorama coordinate seen by each output pixel.
template <typename Fn>
void for_each_view_pixel(const ViewRequest& req, int pano_w, int pano_h, Fn&& fn) {
    req.validate();
    const Camera cam = Camera::perspective(req.fov_deg, req.width, req.height, make_pose(req.rotation(), Vec3::Zero()));
    for (int y = 0; y < req.height; ++y)
        for (int x = 0; x < req.width; ++x) {
            const Vec2 ang = angles_from_direction(cam.pixel_direction(x, y));
            const Vec2 uv = equirect_coords(ang.x(), ang.y(), pano_w, pano_h);
            fn(x, y, uv.x(), uv.y());
        }
}

std::pair<int, int> nearest_pixel(double u, double v, int w, int h) {
    const long long x = (long long)std::floor(u);
    return {int(((x % w) + w) % w), std::clamp(int(std::floor(v)), 0, h - 1)};
}

}  // namespace

HdrImage equirect_to_perspective(const HdrImage& pano, const ViewRequest& req) {
    require_equirect(pano.width(), pano.height());
    HdrImage out(req.width, req.height);
    for_each_view_pixel(req, pano.width(), pano.height(), [&](int x, int y, double u, double v) {
        out.pixel(x, y) = sample_equirect(pano, u, v).transpose();
    });
    return out;
}

ScalarRaster equirect_depth_to_perspective(const ScalarRaster& depth, const ViewRequest& req) {
    const int w = int(depth.cols()), h = int(depth.rows());
    require_equirect(w, h);
    ScalarRaster out(req.height, req.width);
    for_each_view_pixel(req, w, h, [&](int x, int y, double u, double v) {
        const auto [px, py] = nearest_pixel(u, v, w, h);
        out(y, x) = depth(py, px);
    });
    return out;
}

Mask equirect_mask_to_perspective(const Mask& mask, const ViewRequest& req) {
    const int w = int(mask.cols()), h = int(mask.rows());
    require_equirect(w, h);
    Mask out(req.height, req.width);
    for_each_view_pixel(req, w, h, [&](int x, int y, double u, double v) {
        const auto [px, py] = nearest_pixel(u, v, w, h);
        out(y, x) = mask(py, px);
    });
    return out;
}

Vec3 equirect_pixel_direction(int x, int y, int width, int height) {
    const double az = (x + 0.5) / width * 2.0 * std::numbers::pi - std::numbers::pi;
    const double el = std::numbers::pi / 2.0 - (y + 0.5) / height * std::numbers::pi;
    return direction_from_angles(az, el);
}

namespace {

/// Largest 8-connected component, wrapping across the azimuth seam.
Mask largest_component(const Mask& mask) {
    const int h = int(mask.rows()), w = int(mask.cols());
    Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> label =
        Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(h, w, -1);
    int best = -1;
    std::size_t best_size = 0;
    std::vector<std::pair<int, int>> stack;
    int next = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!mask(y, x) || label(y, x) >= 0) continue;
            std::size_t size = 0;
            stack.assign(1, {x, y});
            label(y, x) = next;
            while (!stack.empty()) {
                const auto [cx, cy] = stack.back();
                stack.pop_back();
                ++size;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = cy + dy, nx = (cx + dx + w) % w;
                        if (ny < 0 || ny >= h || !mask(ny, nx) || label(ny, nx) >= 0) continue;
                        label(ny, nx) = next;
                        stack.emplace_back(nx, ny);
                    }
            }
            if (size > best_size) {
                best_size = size;
                best = next;
            }
            ++next;
        }
    return label == best;
}

Vec3 direction_sum(const Mask& mask) {
    Vec3 sum = Vec3::Zero();
    for (int y = 0; y < mask.rows(); ++y)
        for (int x = 0; x < mask.cols(); ++x)
            if (mask(y, x)) sum += equirect_pixel_direction(x, y, int(mask.cols()), int(mask.rows()));
    return sum;
}

}  // namespace

Vec3 spherical_centroid(const Mask& mask) {
    require_equirect(int(mask.cols()), int(mask.rows()));
    const Eigen::Index n = mask.count();
    if (n == 0) throw std::invalid_argument("spherical_centroid: empty mask");
    Vec3 sum = direction_sum(mask);
    if (sum.norm() < 1e-3 * double(n)) sum = direction_sum(largest_component(mask));
    if (sum.norm() == 0.0) throw std::invalid_argument("spherical_centroid: mask has no well-defined center");
    return sum.normalized();
}

ViewRequest pick_light_view(const Mask& light_mask, double fov_deg, double jitter, Rng& rng, int width, int height) {
    const Vec2 center = angles_from_direction(spherical_centroid(light_mask));
    ViewRequest req{center.x(), center.y(), fov_deg, width, height};
    req.validate();
    const double half_h = 0.5 * fov_deg * std::numbers::pi / 180.0;
    const double half_v = std::atan(std::tan(half_h) * height / width);
    const double cap = std::min(std::abs(jitter), 0.6 * std::min(half_h, half_v));
    const double d_az = rng.uniform(-cap, cap), d_el = rng.uniform(-cap, cap);
    req.azimuth = std::remainder(req.azimuth + d_az, 2.0 * std::numbers::pi);
    req.elevation = std::clamp(req.elevation + d_el, -std::numbers::pi / 2, std::numbers::pi / 2);
    return req;
}

CovisReport covisibility(const ScalarRaster& depth_a, const Camera& cam_a, const ScalarRaster& depth_b,
                         const Camera& cam_b, double tol, int grid) {
    if (depth_a.rows() != cam_a.height || depth_a.cols() != cam_a.width || depth_b.rows() != cam_b.height ||
        depth_b.cols() != cam_b.width)
        throw std::invalid_argument("covisibility: depth size does not match its camera");
    const int gx = grid > 0 ? grid : cam_a.width, gy = grid > 0 ? grid : cam_a.height;
    CovisReport r;
    const Vec3 pb = cam_b.position();
    for (int j = 0; j < gy; ++j) {
        for (int i = 0; i < gx; ++i) {
            const int x = std::min(cam_a.width - 1, int((i + 0.5) * cam_a.width / gx));
            const int y = std::min(cam_a.height - 1, int((j + 0.5) * cam_a.height / gy));
            const double d = depth_a(y, x);
            if (!(d > 0.0)) continue;
            ++r.samples;
            const Vec3 p = cam_a.position() + d * cam_a.pixel_direction(x, y);
            const auto px = cam_b.project(p);
            if (!px || !cam_b.in_bounds(*px)) continue;
            const double db = depth_b(int(px->y()), int(px->x()));
            if (db > 0.0 && std::abs((p - pb).norm() - db) <= tol) ++r.agreeing;
        }
    }
    r.valid = r.samples > 0;
    r.overlap = r.valid ? double(r.agreeing) / r.samples : 0.0;
    return r;
}

double central_clearance(const ScalarRaster& depth) {
    const Eigen::Index h = depth.rows(), w = depth.cols();
    const Eigen::Index y0 = h / 4, x0 = w / 4, bh = std::max<Eigen::Index>(1, h / 2), bw = std::max<Eigen::Index>(1, w / 2);
    std::vector<float> v;
    v.reserve(std::size_t(bh * bw));
    for (Eigen::Index y = y0; y < y0 + bh; ++y)
        for (Eigen::Index x = x0; x < x0 + bw; ++x) v.push_back(depth(y, x));
    auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

namespace {

constexpr int kCoverageAz = 36, kCoverageEl = 18;

void mark_coverage(std::vector<bool>& bins, const Camera& cam) {
    for (int j = 0; j < 16; ++j)
        for (int i = 0; i < 16; ++i) {
            const Vec2 ang = angles_from_direction(
                cam.pose.linear() * cam.local_direction((i + 0.5) * cam.width / 16.0, (j + 0.5) * cam.height / 16.0));
            const Vec2 uv = equirect_coords(ang.x(), ang.y(), kCoverageAz, kCoverageEl);
            const auto [bx, by] = nearest_pixel(uv.x(), uv.y(), kCoverageAz, kCoverageEl);
            bins[std::size_t(by * kCoverageAz + bx)] = true;
        }
}

}  // namespace

Trajectory sample_trajectory(std::span<const PanoSource> panos, const TrajectoryOptions& opt, std::uint64_t seed) {
    if (opt.count < 1) throw std::invalid_argument("sample_trajectory: count must be >= 1");
    if (panos.empty()) throw std::invalid_argument("sample_trajectory: no panoramas");
    for (const auto& p : panos) {
        require_equirect(int(p.depth.cols()), int(p.depth.rows()));
        if (p.camera.width != p.depth.cols() || p.camera.height != p.depth.rows())
            throw std::invalid_argument("sample_trajectory: depth size does not match its camera");
    }
    Rng rng(seed);
    Trajectory out;
    std::vector<bool> bins(std::size_t(kCoverageAz * kCoverageEl), false);
    ScalarRaster prev_depth;
    Camera prev_cam;

    auto accept = [&](std::size_t source, const ViewRequest& req, ScalarRaster depth) {
        out.views.push_back({source, req});
        prev_cam = req.camera(panos[source].camera);
        prev_depth = std::move(depth);
        mark_coverage(bins, prev_cam);
        out.coverage.push_back(double(std::count(bins.begin(), bins.end(), true)) / double(bins.size()));
    };

    std::vector<std::size_t> lit;
    for (std::size_t i = 0; i < panos.size(); ++i)
        if (panos[i].light_mask.size() > 0 && panos[i].light_mask.any()) lit.push_back(i);
    if (!lit.empty()) {
        const std::size_t source = lit[rng.index(lit.size())];
        const ViewRequest req = pick_light_view(panos[source].light_mask, opt.fov_deg, opt.jitter, rng, opt.width, opt.height);
        accept(source, req, equirect_depth_to_perspective(panos[source].depth, req));
    }

    while (int(out.views.size()) < opt.count) {
        bool found = false;
        for (int draw = 0; draw < opt.max_draws && !found; ++draw) {
            const std::size_t source = rng.index(panos.size());
            ViewRequest req{rng.uniform(-std::numbers::pi, std::numbers::pi),
                            rng.uniform(-opt.max_abs_elevation, opt.max_abs_elevation), opt.fov_deg, opt.width, opt.height};
            ScalarRaster depth = equirect_depth_to_perspective(panos[source].depth, req);
            if (central_clearance(depth) < opt.min_clearance) continue;
            if (!out.views.empty() && opt.min_overlap > 0.0) {
                const Camera cam = req.camera(panos[source].camera);
                if (covisibility(prev_depth, prev_cam, depth, cam, opt.tol).overlap < opt.min_overlap) continue;
            }
            accept(source, req, std::move(depth));
            found = true;
        }
        if (!found) {
            out.partial = true;
            break;
        }
    }
    return out;
}

std::string trajectory_to_json(const Trajectory& t) {
    json doc;
    doc["format"] = "luxtraj/1";
    doc["partial"] = t.partial;
    doc["views"] = json::array();
    for (const auto& v : t.views)
        doc["views"].push_back({{"source_pano_index", v.source},
                                {"azimuth", v.view.azimuth},
                                {"elevation", v.view.elevation},
                                {"fov", v.view.fov_deg},
                                {"width", v.view.width},
                                {"height", v.view.height}});
    doc["coverage"] = t.coverage;
    return doc.dump(2) + "\n";
}

Trajectory trajectory_from_json(const std::string& text) {
    const json doc = json::parse(text);
    if (doc.value("format", "") != "luxtraj/1") throw std::runtime_error("expected format luxtraj/1");
    Trajectory t;
    t.partial = doc.value("partial", false);
    for (const auto& v : doc.at("views"))
        t.views.push_back({v.at("source_pano_index").get<std::size_t>(),
                           ViewRequest{v.at("azimuth").get<double>(), v.at("elevation").get<double>(), v.at("fov").get<double>(),
                                       v.value("width", 128), v.value("height", 128)}});
    t.coverage = doc.value("coverage", std::vector<double>{});
    return t;
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& t) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << trajectory_to_json(t);
}

}  // namespace luxmix
