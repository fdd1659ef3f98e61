#include "luxmix/scene_oracle.hpp"

#include "luxmix/rng.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace luxmix {

using nlohmann::json;

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
json arr_json(const Eigen::Array3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::runtime_error("expected a 3-vector");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json box_json(const Box3d& b) { return {{"min", vec_json(b.min)}, {"max", vec_json(b.max)}}; }
Box3d box_from(const json& j) { return Box3d{vec_from(j.at("min")), vec_from(j.at("max"))}; }

json camera_json(const Camera& c) {
    const Eigen::Quaterniond q(c.pose.linear());
    json j = {{"kind", c.kind == CameraKind::Equirect ? "equirect" : "perspective"},
              {"width", c.width},
              {"height", c.height},
              {"position", vec_json(c.pose.translation())},
              {"rotation", json::array({q.w(), q.x(), q.y(), q.z()})}};
    if (c.kind == CameraKind::Perspective) j["fov"] = c.fov_deg;
    return j;
}

Camera camera_from(const json& j) {
    const auto& r = j.at("rotation");
    const Eigen::Quaterniond q(r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>());
    const Pose pose = make_pose(q.normalized().toRotationMatrix(), vec_from(j.at("position")));
    if (j.at("kind").get<std::string>() == "equirect")
        return Camera::equirect(j.at("width").get<int>(), j.at("height").get<int>(), pose);
    return Camera::perspective(j.value("fov", 60.0), j.at("width").get<int>(), j.at("height").get<int>(), pose);
}

const char* kWallNames[6] = {"x_min", "x_max", "y_min", "y_max", "floor", "ceiling"};

}  // namespace

std::string scene_to_json(const BoxScene& scene) {
    json doc;
    doc["format"] = "luxscene/1";
    doc["room"] = box_json(scene.room);
    for (int w = 0; w < 6; ++w) doc["wall_albedo"][kWallNames[w]] = arr_json(scene.wall_albedo[std::size_t(w)]);
    doc["obstacles"] = json::array();
    for (const auto& o : scene.obstacles) {
        json jo = box_json(o.box);
        jo["albedo"] = arr_json(o.albedo);
        doc["obstacles"].push_back(jo);
    }
    doc["lights"] = json::array();
    for (const auto& l : scene.lights) {
        json jl = {{"name", l.name},
                   {"kind", l.kind == LightKind::Disk ? "disk" : "point"},
                   {"position", vec_json(l.position)},
                   {"intensity", arr_json(l.intensity)},
                   {"temperature", l.temperature_k},
                   {"fixture", box_json(l.fixture)},
                   {"controllable", l.controllable}};
        if (l.kind == LightKind::Disk) {
            jl["normal"] = vec_json(l.normal);
            jl["radius"] = l.radius;
        } else {
            jl["emitter_radius"] = l.emitter_radius;
        }
        doc["lights"].push_back(jl);
    }
    doc["ambient_env"] = arr_json(scene.ambient_env);
    doc["cameras"] = json::array();
    for (const auto& c : scene.cameras) doc["cameras"].push_back(camera_json(c));
    return doc.dump(2) + "\n";
}

BoxScene scene_from_json(const std::string& text) {
    const json doc = json::parse(text);
    if (doc.value("format", "") != "luxscene/1") throw std::runtime_error("expected format luxscene/1");
    BoxScene s;
    s.room = box_from(doc.at("room"));
    for (int w = 0; w < 6; ++w) s.wall_albedo[std::size_t(w)] = vec_from(doc.at("wall_albedo").at(kWallNames[w])).array();
    for (const auto& jo : doc.value("obstacles", json::array())) s.obstacles.push_back({box_from(jo), vec_from(jo.at("albedo")).array()});
    for (const auto& jl : doc.value("lights", json::array())) {
        Light l;
        l.name = jl.value("name", "light" + std::to_string(s.lights.size()));
        l.kind = jl.value("kind", "point") == "disk" ? LightKind::Disk : LightKind::Point;
        l.position = vec_from(jl.at("position"));
        l.intensity = vec_from(jl.at("intensity")).array();
        l.temperature_k = jl.value("temperature", 6600.0);
        l.fixture = box_from(jl.at("fixture"));
        l.controllable = jl.value("controllable", true);
        if (l.kind == LightKind::Disk) {
            l.normal = vec_from(jl.at("normal")).normalized();
            l.radius = jl.at("radius").get<double>();
        } else {
            l.emitter_radius = jl.value("emitter_radius", 0.05);
        }
        s.lights.push_back(l);
    }
    s.ambient_env = vec_from(doc.at("ambient_env")).array();
    for (const auto& jc : doc.value("cameras", json::array())) s.cameras.push_back(camera_from(jc));
    s.validate();
    return s;
}

void write_scene(const std::filesystem::path& path, const BoxScene& scene) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << scene_to_json(scene);
}

BoxScene read_scene(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return scene_from_json(ss.str());
}

namespace {

Eigen::Array3d tinted(Rng& rng, double lo, double hi, double tint) {
    const double base = rng.uniform(lo, hi);
    Eigen::Array3d a;
    for (int c = 0; c < 3; ++c) a[c] = std::clamp(base + rng.uniform(-tint, tint), 0.02, 0.95);
    return a;
}

bool overlaps(const Box3d& a, const Box3d& b, double margin) {
    return (a.min.array() - margin < b.max.array()).all() && (b.min.array() - margin < a.max.array()).all();
}

enum class Archetype { Ceiling, Wall, Table, Floor };

}  // namespace

BoxScene generate_scene(std::uint64_t seed, const SceneGenOptions& options) {
    if (options.lights < 0 || std::size_t(options.lights) > kMaxLights)
        throw std::invalid_argument("generate_scene: light count must be in [0, 6]");
    Rng rng(seed);
    BoxScene s;
    const Vec3 size(rng.uniform(3.5, 6.0), rng.uniform(3.0, 5.0), rng.uniform(2.5, 3.0));
    s.room = Box3d{Vec3::Zero(), size};
    for (int w = 0; w < 4; ++w) s.wall_albedo[std::size_t(w)] = tinted(rng, 0.55, 0.85, 0.06);
    s.wall_albedo[kFloor] = tinted(rng, 0.25, 0.5, 0.08);
    s.wall_albedo[kCeiling] = tinted(rng, 0.8, 0.9, 0.02);
    s.ambient_env = Eigen::Array3d(rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.7));

    // Table in the open floor area, then a cabinet and a sofa against walls.
    {
        const Vec3 half(rng.uniform(0.5, 0.8), rng.uniform(0.35, 0.5), 0.0);
        const double h = rng.uniform(0.72, 0.78);
        const Vec3 c(rng.uniform(1.0 + half.x(), size.x() - 1.0 - half.x()),
                     rng.uniform(1.0 + half.y(), size.y() - 1.0 - half.y()), 0.0);
        s.obstacles.push_back({Box3d{Vec3(c.x() - half.x(), c.y() - half.y(), 0.0), Vec3(c.x() + half.x(), c.y() + half.y(), h)},
                               tinted(rng, 0.3, 0.6, 0.1)});
    }
    for (int k = 0; k < 2; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const bool along_x = rng.uniform() < 0.5;
            const bool at_max = rng.uniform() < 0.5;
            const double width = rng.uniform(0.8, 1.6);
            const double depth = k == 0 ? rng.uniform(0.4, 0.6) : rng.uniform(0.8, 0.95);
            const double height = k == 0 ? rng.uniform(0.8, 1.8) : rng.uniform(0.4, 0.5);
            Box3d b;
            if (along_x) {
                const double x0 = rng.uniform(0.2, size.x() - width - 0.2);
                const double y0 = at_max ? size.y() - depth : 0.0;
                b = Box3d{Vec3(x0, y0, 0.0), Vec3(x0 + width, y0 + depth, height)};
            } else {
                const double y0 = rng.uniform(0.2, size.y() - width - 0.2);
                const double x0 = at_max ? size.x() - depth : 0.0;
                b = Box3d{Vec3(x0, y0, 0.0), Vec3(x0 + depth, y0 + width, height)};
            }
            b.max = b.max.cwiseMin(size);
            bool clash = false;
            for (const auto& o : s.obstacles) clash = clash || overlaps(o.box, b, 0.4);
            if (!clash) {
                s.obstacles.push_back({b, tinted(rng, 0.2, 0.7, 0.12)});
                break;
            }
        }
    }

    auto free_point = [&](const Vec3& p, double margin) {
        if (!s.room.contains(p, -margin)) return false;
        for (const auto& o : s.obstacles)
            if (o.box.contains(p, margin)) return false;
        return true;
    };

    const Archetype cycle[] = {Archetype::Ceiling, Archetype::Table, Archetype::Wall, Archetype::Floor, Archetype::Ceiling,
                               Archetype::Wall};
    for (int i = 0; i < options.lights; ++i) {
        Light l;
        l.name = "light" + std::to_string(i);
        l.temperature_k = rng.uniform(2200.0, 7500.0);
        const Eigen::Array3d tint = temperature_to_rgb(l.temperature_k).rgb;
        double power = 1.0;
        Archetype kind = cycle[i % 6];
        for (int attempt = 0; attempt < 100; ++attempt) {
            if (kind == Archetype::Ceiling) {
                l.kind = LightKind::Disk;
                l.radius = rng.uniform(0.12, 0.25);
                l.normal = -Vec3::UnitZ();
                l.position = Vec3(rng.uniform(0.8, size.x() - 0.8), rng.uniform(0.8, size.y() - 0.8), size.z() - 0.03);
                const double r = l.radius + 0.03;
                l.fixture = Box3d{l.position - Vec3(r, r, 0.05), Vec3(l.position.x() + r, l.position.y() + r, size.z())};
                power = rng.uniform(14.0, 22.0);
            } else if (kind == Archetype::Table) {
                const Box3d& table = s.obstacles.front().box;
                l.kind = LightKind::Point;
                l.emitter_radius = 0.06;
                l.position = Vec3(rng.uniform(table.min.x() + 0.15, table.max.x() - 0.15),
                                  rng.uniform(table.min.y() + 0.15, table.max.y() - 0.15), table.max.z() + rng.uniform(0.35, 0.45));
                l.fixture = Box3d{Vec3(l.position.x() - 0.12, l.position.y() - 0.12, table.max.z()),
                                  Vec3(l.position.x() + 0.12, l.position.y() + 0.12, l.position.z() + 0.1)};
                power = rng.uniform(1.5, 3.0);
            } else if (kind == Archetype::Wall) {
                l.kind = LightKind::Point;
                l.emitter_radius = 0.05;
                const int wall = int(rng.index(4));
                const double off = 0.4;
                const double z = rng.uniform(1.7, 2.1);
                const double along = rng.uniform(0.7, (wall < 2 ? size.y() : size.x()) - 0.7);
                switch (wall) {
                    case 0: l.position = Vec3(off, along, z); break;
                    case 1: l.position = Vec3(size.x() - off, along, z); break;
                    case 2: l.position = Vec3(along, off, z); break;
                    default: l.position = Vec3(along, size.y() - off, z); break;
                }
                Vec3 lo = l.position - Vec3::Constant(0.08), hi = l.position + Vec3::Constant(0.08);
                // Bracket runs back to the wall.
                if (wall == 0) lo.x() = 0.0;
                if (wall == 1) hi.x() = size.x();
                if (wall == 2) lo.y() = 0.0;
                if (wall == 3) hi.y() = size.y();
                l.fixture = Box3d{lo, hi};
                power = rng.uniform(2.0, 3.5);
            } else {
                l.kind = LightKind::Point;
                l.emitter_radius = 0.07;
                const double x = rng.uniform() < 0.5 ? 0.5 : size.x() - 0.5;
                const double y = rng.uniform() < 0.5 ? 0.5 : size.y() - 0.5;
                l.position = Vec3(x, y, rng.uniform(1.45, 1.6));
                l.fixture = Box3d{Vec3(x - 0.15, y - 0.15, 0.0), Vec3(x + 0.15, y + 0.15, l.position.z() + 0.12)};
                power = rng.uniform(4.0, 6.0);
            }
            bool ok = free_point(l.position, 0.02);
            for (const auto& other : s.lights) ok = ok && (other.position - l.position).norm() > 0.6;
            if (ok) break;
            kind = Archetype::Ceiling;  // always placeable
        }
        l.intensity = power * tint;
        s.lights.push_back(l);
    }

    const int height = std::max(1, options.equirect_width / 2);
    for (int c = 0; c < options.cameras; ++c) {
        Vec3 p = s.room.center();
        for (int attempt = 0; attempt < 200; ++attempt) {
            const Vec3 q(rng.uniform(0.6, size.x() - 0.6), rng.uniform(0.6, size.y() - 0.6), rng.uniform(1.5, 1.7));
            bool ok = free_point(q, 0.4);
            for (const auto& l : s.lights) ok = ok && (l.position - q).norm() > 0.5;
            if (ok) {
                p = q;
                break;
            }
        }
        s.cameras.push_back(Camera::equirect(2 * height, height, make_pose(Eigen::Matrix3d::Identity(), p)));
    }
    s.validate();
    return s;
}

}  // namespace luxmix
