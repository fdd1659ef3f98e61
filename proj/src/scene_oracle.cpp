#include "luxmix/scene_oracle.hpp"

#include "luxmix/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

namespace luxmix {

namespace {

constexpr double kSurfaceOffset = 1e-6;

bool valid_albedo(const Eigen::Array3d& a) { return a.allFinite() && (a >= 0.0).all() && (a <= 1.0).all(); }

}  // namespace

void BoxScene::validate() const {
    if (!((room.max.array() > room.min.array()).all())) throw std::invalid_argument("scene: room extents must be positive");
    for (const auto& a : wall_albedo)
        if (!valid_albedo(a)) throw std::invalid_argument("scene: wall albedo must be in [0, 1]");
    for (const auto& o : obstacles) {
        if (!room.contains(o.box)) throw std::invalid_argument("scene: obstacle outside room");
        if (!valid_albedo(o.albedo)) throw std::invalid_argument("scene: obstacle albedo must be in [0, 1]");
    }
    if (lights.size() > kMaxLights) throw std::invalid_argument("scene: at most six lights");
    for (const auto& l : lights) {
        if (!room.contains(l.position)) throw std::invalid_argument("scene: light outside room");
        if (!l.intensity.allFinite() || (l.intensity < 0.0).any()) throw std::invalid_argument("scene: light intensity must be >= 0");
        if (l.kind == LightKind::Disk && !(l.radius > 0.0)) throw std::invalid_argument("scene: disk light needs a radius");
        for (const auto& o : obstacles)
            if (o.box.contains(l.position)) throw std::invalid_argument("scene: light inside an obstacle");
    }
    if (!ambient_env.allFinite() || (ambient_env < 0.0).any()) throw std::invalid_argument("scene: ambient must be >= 0");
    for (const auto& c : cameras) c.validate();
}

std::vector<std::size_t> BoxScene::controllable_lights() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < lights.size(); ++i)
        if (lights[i].controllable) out.push_back(i);
    return out;
}

std::optional<SurfaceHit> trace(const BoxScene& scene, const Ray<double>& ray) {
    SurfaceHit hit;
    hit.t = std::numeric_limits<double>::infinity();
    // Room interior: nearest exit plane.
    for (int a = 0; a < 3; ++a) {
        const double d = ray.direction[a];
        if (d == 0.0) continue;
        const double t = ((d > 0.0 ? scene.room.max[a] : scene.room.min[a]) - ray.origin[a]) / d;
        if (t < hit.t) {
            hit.t = t;
            hit.normal = Vec3::Zero();
            hit.normal[a] = d > 0.0 ? -1.0 : 1.0;
            hit.albedo = scene.wall_albedo[std::size_t(2 * a + (d > 0.0 ? 1 : 0))];
        }
    }
    for (const auto& o : scene.obstacles) {
        double t_enter = -std::numeric_limits<double>::infinity();
        double t_exit = std::numeric_limits<double>::infinity();
        int axis = -1;
        bool miss = false;
        for (int a = 0; a < 3 && !miss; ++a) {
            const double d = ray.direction[a];
            if (d == 0.0) {
                miss = ray.origin[a] < o.box.min[a] || ray.origin[a] > o.box.max[a];
                continue;
            }
            double ta = (o.box.min[a] - ray.origin[a]) / d;
            double tb = (o.box.max[a] - ray.origin[a]) / d;
            if (ta > tb) std::swap(ta, tb);
            if (ta > t_enter) {
                t_enter = ta;
                axis = a;
            }
            t_exit = std::min(t_exit, tb);
            miss = t_enter > t_exit;
        }
        if (miss || axis < 0 || t_enter <= 0.0 || t_enter >= hit.t) continue;
        hit.t = t_enter;
        hit.normal = Vec3::Zero();
        hit.normal[axis] = ray.direction[axis] > 0.0 ? -1.0 : 1.0;
        hit.albedo = o.albedo;
    }
    if (!std::isfinite(hit.t) || hit.t <= 0.0) return std::nullopt;
    hit.point = ray.at(hit.t);
    return hit;
}

bool segment_visible(const BoxScene& scene, const Vec3& a, const Vec3& b) {
    const Ray<double> seg{a, b - a};
    for (const auto& o : scene.obstacles) {
        const auto span = intersect_box(seg, o.box);
        if (span && span->first < 1.0 && span->second > 0.0) return false;
    }
    return true;
}

std::array<Vec3, 16> disk_samples(const Light& light, std::size_t light_index) {
    const Vec3 n = light.normal.normalized();
    const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 u = n.cross(helper).normalized();
    const Vec3 v = n.cross(u);
    std::array<Vec3, 16> out;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const std::uint64_t key = (std::uint64_t(light_index) << 8) | std::uint64_t(4 * i + j);
            const double r = light.radius * std::sqrt((i + hash_uniform(2 * key)) / 4.0);
            const double phi = 2.0 * std::numbers::pi * (j + hash_uniform(2 * key + 1)) / 4.0;
            out[std::size_t(4 * i + j)] = light.position + r * (std::cos(phi) * u + std::sin(phi) * v);
        }
    }
    return out;
}

Eigen::Array3d light_irradiance(const BoxScene& scene, std::size_t light_index, const Vec3& point, const Vec3& normal) {
    const Light& light = scene.lights.at(light_index);
    if ((light.intensity == 0.0).all()) return Eigen::Array3d::Zero();
    const Vec3 origin = point + kSurfaceOffset * normal;
    auto contribution = [&](const Vec3& sample, double emitter_cos) -> double {
        const Vec3 to_light = sample - point;
        const double r2 = to_light.squaredNorm();
        if (r2 <= 0.0) return 0.0;
        const double cos_surface = normal.dot(to_light) / std::sqrt(r2);
        if (cos_surface <= 0.0 || emitter_cos <= 0.0) return 0.0;
        if (!segment_visible(scene, origin, sample)) return 0.0;
        return cos_surface * emitter_cos / r2;
    };
    double geometric = 0.0;
    if (light.kind == LightKind::Point) {
        geometric = contribution(light.position, 1.0);
    } else {
        const Vec3 n = light.normal.normalized();
        for (const Vec3& s : disk_samples(light, light_index)) {
            const Vec3 dir = (point - s).normalized();
            geometric += contribution(s, n.dot(dir)) / 16.0;
        }
    }
    return light.intensity * geometric;
}

namespace {

/// Shared per-pixel loop: environment term (optional) plus the listed lights.
HdrImage render_lighting(const BoxScene& scene, const Camera& cam, bool with_env, std::span<const std::size_t> lights) {
    scene.validate();
    cam.validate();
    HdrImage img(cam.width, cam.height);
    const Vec3 origin = cam.position();
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const auto hit = trace(scene, Ray<double>{origin, cam.pixel_direction(x, y)});
            if (!hit) continue;
            const Eigen::Array3d brdf = hit->albedo / std::numbers::pi;
            Eigen::Array3d radiance = Eigen::Array3d::Zero();
            if (with_env) radiance += brdf * scene.ambient_env;
            for (std::size_t i : lights) radiance += brdf * light_irradiance(scene, i, hit->point, hit->normal);
            img.pixel(x, y) = radiance.cast<float>().transpose();
        }
    }
    return img;
}

std::vector<std::size_t> non_controllable(const BoxScene& scene) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < scene.lights.size(); ++i)
        if (!scene.lights[i].controllable) out.push_back(i);
    return out;
}

}  // namespace

HdrImage render_olat(const BoxScene& scene, std::size_t light_index, const Camera& cam) {
    if (light_index >= scene.lights.size()) throw std::out_of_range("render_olat: light index out of range");
    const std::size_t one[] = {light_index};
    return render_lighting(scene, cam, false, one);
}

HdrImage render_full(const BoxScene& scene, const Camera& cam) {
    std::vector<std::size_t> all(scene.lights.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return render_lighting(scene, cam, true, all);
}

HdrImage render_ambient(const BoxScene& scene, const Camera& cam) {
    return render_lighting(scene, cam, true, non_controllable(scene));
}

ScalarRaster render_depth(const BoxScene& scene, const Camera& cam) {
    cam.validate();
    ScalarRaster depth = ScalarRaster::Zero(cam.height, cam.width);
    const Vec3 origin = cam.position();
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const auto hit = trace(scene, Ray<double>{origin, cam.pixel_direction(x, y)});
            if (hit) depth(y, x) = static_cast<float>(hit->t);
        }
    }
    return depth;
}

namespace {

std::optional<double> intersect_emitter(const Light& light, const Ray<double>& ray) {
    if (light.kind == LightKind::Point) {
        const Vec3 oc = ray.origin - light.position;
        const double b = oc.dot(ray.direction);
        const double c = oc.squaredNorm() - light.emitter_radius * light.emitter_radius;
        const double disc = b * b - c;
        if (disc < 0.0) return std::nullopt;
        const double s = std::sqrt(disc);
        const double t = -b - s > 0.0 ? -b - s : -b + s;
        if (t <= 0.0) return std::nullopt;
        return t;
    }
    const Vec3 n = light.normal.normalized();
    const double denom = ray.direction.dot(n);
    if (denom >= 0.0) return std::nullopt;  // back side does not emit
    const double t = (light.position - ray.origin).dot(n) / denom;
    if (t <= 0.0) return std::nullopt;
    if ((ray.at(t) - light.position).norm() > light.radius) return std::nullopt;
    return t;
}

}  // namespace

LightMasks render_light_masks(const BoxScene& scene, std::size_t light_index, const Camera& cam) {
    if (light_index >= scene.lights.size()) throw std::out_of_range("render_light_masks: light index out of range");
    cam.validate();
    const Light& light = scene.lights[light_index];
    Mask emissive = Mask::Constant(cam.height, cam.width, false);
    Mask fixture = Mask::Constant(cam.height, cam.width, false);
    const Vec3 origin = cam.position();
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const Ray<double> ray{origin, cam.pixel_direction(x, y)};
            const auto hit = trace(scene, ray);
            const double limit = hit ? hit->t : std::numeric_limits<double>::infinity();
            if (const auto t = intersect_emitter(light, ray); t && *t < limit) emissive(y, x) = true;
            if (const auto span = intersect_box(ray, light.fixture); span && span->second > 0.0 && span->first < limit)
                fixture(y, x) = true;
        }
    }
    return build_light_masks(emissive, fixture, default_min_mask_area(cam.width, cam.height));
}

LightStack render_stack(const BoxScene& scene, const Camera& cam) {
    std::vector<HdrImage> layers;
    std::vector<Rgb> scales;
    std::vector<LightInfo> info;
    for (std::size_t i : scene.controllable_lights()) {
        layers.push_back(render_olat(scene, i, cam));
        scales.push_back(Rgb::Ones());
        info.push_back({scene.lights[i].name, scene.lights[i].temperature_k});
    }
    return LightStack(render_ambient(scene, cam), std::move(layers), std::move(scales), std::move(info));
}

KelvinColor temperature_to_rgb(double kelvin) {
    KelvinColor out;
    double k = kelvin;
    if (!std::isfinite(k) || k < 1000.0 || k > 12000.0) {
        out.clamped = true;
        k = std::isfinite(k) ? std::clamp(k, 1000.0, 12000.0) : 6600.0;
    }
    // Piecewise log/power fit of the Planckian locus in 8-bit sRGB units.
    const double t = k / 100.0;
    double r, g, b;
    if (t <= 66.0) {
        r = 255.0;
        g = 99.4708025861 * std::log(t) - 161.1195681661;
    } else {
        r = 329.698727446 * std::pow(t - 60.0, -0.1332047592);
        g = 288.1221695283 * std::pow(t - 60.0, -0.0755148492);
    }
    if (t >= 66.0) {
        b = 255.0;
    } else if (t <= 19.0) {
        b = 0.0;
    } else {
        b = 138.5177312231 * std::log(t - 10.0) - 305.0447927307;
    }
    Eigen::Array3d rgb(std::clamp(r, 0.0, 255.0), std::clamp(g, 0.0, 255.0), std::clamp(b, 0.0, 255.0));
    out.rgb = rgb / rgb.maxCoeff();
    return out;
}

}  // namespace luxmix
