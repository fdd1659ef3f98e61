#include "luxmix/service.hpp"

#include "luxmix/image_io.hpp"
#include "luxmix/scene_oracle.hpp"

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <fstream>

namespace luxmix {

using nlohmann::json;

Display parse_display(const std::string& name) {
    if (name == "curve") return Display::Curve;
    if (name == "agx") return Display::Agx;
    throw ServiceError(422, "unknown display transform '" + name + "'");
}

std::string display_name(Display d) { return d == Display::Agx ? "agx" : "curve"; }

Camera camera_from_json(const json& j, const Camera& base) {
    if (!j.is_object()) throw ServiceError(400, "camera must be an object");
    Vec3 position = base.position();
    const Vec2 ang = angles_from_direction(base.pose.linear().col(0));
    double azimuth = ang.x(), elevation = ang.y(), roll = 0.0;
    double fov = base.fov_deg;
    int width = base.width, height = base.height;
    try {
        if (j.contains("position")) {
            const auto p = j.at("position").get<std::vector<double>>();
            if (p.size() != 3) throw ServiceError(422, "camera position needs three entries");
            position = Vec3(p[0], p[1], p[2]);
        }
        azimuth = j.value("azimuth", azimuth);
        elevation = j.value("elevation", elevation);
        roll = j.value("roll", roll);
        fov = j.value("fov_deg", fov);
        width = j.value("width", width);
        height = j.value("height", height);
    } catch (const json::exception& e) {
        throw ServiceError(400, std::string("malformed camera: ") + e.what());
    }
    if (!position.allFinite() || !std::isfinite(azimuth) || !std::isfinite(elevation) || !std::isfinite(roll))
        throw ServiceError(422, "camera values must be finite");
    if (!(fov > 1.0 && fov < 179.0) || width < 1 || height < 1 || width > 4096 || height > 4096)
        throw ServiceError(422, "camera fov or size out of range");
    const Eigen::Matrix3d rot = rotation_from_view(azimuth, elevation) * Eigen::AngleAxisd(roll, Vec3::UnitX()).toRotationMatrix();
    return Camera::perspective(fov, width, height, make_pose(rot, position));
}

json camera_to_json(const Camera& cam) {
    const Vec2 ang = angles_from_direction(cam.pose.linear().col(0));
    // Roll is the angle of the camera's up axis about forward, relative to zero roll.
    const Eigen::Matrix3d level = rotation_from_view(ang.x(), ang.y());
    const Vec3 up = level.transpose() * cam.pose.linear().col(2);
    const Vec3 p = cam.position();
    return {{"position", {p.x(), p.y(), p.z()}}, {"azimuth", ang.x()},     {"elevation", ang.y()},
            {"roll", std::atan2(-up.y(), up.z())},  {"fov_deg", cam.fov_deg}, {"width", cam.width},
            {"height", cam.height}};
}

json kelvin_table(double from, double to, double step) {
    if (!(step > 0.0) || !(to >= from) || (to - from) / step > 100000.0) throw ServiceError(422, "bad kelvin range");
    json rows = json::array();
    for (int i = 0;; ++i) {
        const double k = from + i * step;
        if (k > to + 1e-9) break;
        const auto c = temperature_to_rgb(k);
        rows.push_back({{"kelvin", k}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}});
    }
    return rows;
}

struct RenderService::Session {
    SessionKind kind = SessionKind::Stack;
    Display display = Display::Curve;
    ToneCurve curve;
    std::vector<LightEntry> lights;

    LightStack stack;

    GaussianCloud<float> cloud;
    /// softplus of the raw coefficients, computed once per session.
    RowMatrix<float> coeffs;
    Camera camera;

    mutable std::shared_mutex state;
    RowMatrix<float> weights;
    mutable std::mutex render;
};

RenderService::RenderService() = default;
RenderService::~RenderService() = default;

std::string RenderService::reserve(std::string id) {
    std::unique_lock lock(mutex_);
    if (id.empty()) {
        do id = "s" + std::to_string(next_id_++);
        while (sessions_.count(id) || loading_.count(id));
    } else if (sessions_.count(id) || loading_.count(id)) {
        throw ServiceError(409, "session '" + id + "' already exists or is loading");
    }
    loading_[id] = true;
    return id;
}

std::string RenderService::insert(std::shared_ptr<Session> session, std::string id) {
    std::unique_lock lock(mutex_);
    loading_.erase(id);
    sessions_[id] = std::move(session);
    return id;
}

std::shared_ptr<RenderService::Session> RenderService::find(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
    return it->second;
}

namespace {

RowMatrix<float> stack_weights(const LightStack& stack) {
    RowMatrix<float> w(Eigen::Index(stack.light_count()) + 1, 3);
    w.row(0).setOnes();
    for (std::size_t i = 0; i < stack.light_count(); ++i) w.row(Eigen::Index(i) + 1) = stack.scales()[i].transpose();
    return w;
}

void check_weights(const RowMatrix<float>& w, Eigen::Index rows) {
    if (w.rows() != rows || w.cols() != 3)
        throw ServiceError(422, "expected " + std::to_string(rows) + " weight rows of 3, got " + std::to_string(w.rows()));
    if (!w.allFinite() || (w.array() < 0.0f).any()) throw ServiceError(422, "weights must be finite and nonnegative");
}

LdrImage display_image(const HdrImage& img, Display d, const ToneCurve& curve) {
    return d == Display::Agx ? tonemap_agx(img) : tonemap_curve(img, curve);
}

}  // namespace

std::shared_ptr<RenderService::Session> RenderService::stack_session(LightStack stack, const ToneCurve& curve, Display display) {
    if (!curve.valid()) throw ServiceError(422, "invalid tone curve");
    auto s = std::make_shared<Session>();
    s->kind = SessionKind::Stack;
    s->display = display;
    s->curve = curve;
    s->lights.push_back({"ambient", 0.0, Eigen::Array3f::Ones()});
    for (std::size_t i = 0; i < stack.light_count(); ++i) {
        const auto info = i < stack.info().size() ? stack.info()[i] : LightInfo{"light" + std::to_string(i + 1), 6600.0};
        s->lights.push_back({info.name, info.temperature_k, stack.scales()[i]});
    }
    s->weights = stack_weights(stack);
    s->stack = std::move(stack);
    return s;
}

std::shared_ptr<RenderService::Session> RenderService::cloud_session(RelightModel model, const Camera& camera, Display display) {
    try {
        model.cloud.validate();
    } catch (const std::exception& e) {
        throw ServiceError(422, e.what());
    }
    check_weights(model.weights, model.cloud.lights());
    if (!model.curve.valid()) throw ServiceError(422, "invalid tone curve");
    if (camera.kind != CameraKind::Perspective) throw ServiceError(422, "cloud sessions need a perspective camera");
    auto s = std::make_shared<Session>();
    s->kind = SessionKind::Cloud;
    s->display = display;
    s->curve = model.curve;
    for (int m = 0; m < model.cloud.lights(); ++m) {
        const std::size_t k = std::size_t(m);
        s->lights.push_back({k < model.light_names.size() ? model.light_names[k] : "light" + std::to_string(m), 0.0,
                             model.weights.row(m).array().transpose()});
    }
    s->coeffs = light_coefficients(model.cloud);
    s->weights = model.weights;
    s->cloud = std::move(model.cloud);
    s->camera = camera;
    return s;
}

std::string RenderService::add_stack(LightStack stack, const ToneCurve& curve, Display display, std::string id) {
    auto s = stack_session(std::move(stack), curve, display);
    return insert(std::move(s), reserve(std::move(id)));
}

std::string RenderService::add_cloud(RelightModel model, const Camera& camera, Display display, std::string id) {
    auto s = cloud_session(std::move(model), camera, display);
    return insert(std::move(s), reserve(std::move(id)));
}

std::string RenderService::load(const LoadRequest& request) {
    if (!std::filesystem::exists(request.path)) throw ServiceError(404, "no such file: " + request.path.string());
    // Hold the id while reading so a second load of the same id gets 409.
    const std::string id = reserve(request.id);
    try {
        std::shared_ptr<Session> s;
        if (request.kind == SessionKind::Stack) {
            ToneCurve curve;
            LightStack stack = load_stack(request.path, &curve);
            s = stack_session(std::move(stack), curve, request.display);
        } else {
            RelightModel model = read_model(request.path);
            Camera cam = request.camera.value_or(Camera{});
            if (!request.camera) {
                Pose pose = Pose::Identity();
                pose.translation() = model.cloud.positions.colwise().mean().cast<double>().transpose();
                cam = Camera::perspective(60.0, 512, 512, pose);
            }
            s = cloud_session(std::move(model), cam, request.display);
        }
        return insert(std::move(s), id);
    } catch (...) {
        std::unique_lock lock(mutex_);
        loading_.erase(id);
        try {
            throw;
        } catch (const ServiceError&) {
            throw;
        } catch (const std::exception& e) {
            throw ServiceError(422, e.what());
        }
    }
}

bool RenderService::close(const std::string& id) {
    std::unique_lock lock(mutex_);
    return sessions_.erase(id) > 0;
}

std::size_t RenderService::session_count() const {
    std::shared_lock lock(mutex_);
    return sessions_.size();
}

SessionKind RenderService::kind(const std::string& id) const { return find(id)->kind; }

std::vector<LightEntry> RenderService::lights(const std::string& id) const {
    const auto s = find(id);
    std::shared_lock lock(s->state);
    auto out = s->lights;
    for (std::size_t m = 0; m < out.size(); ++m) out[m].weight = s->weights.row(Eigen::Index(m)).array().transpose();
    return out;
}

void RenderService::set_weights(const std::string& id, const RowMatrix<float>& weights) {
    const auto s = find(id);
    check_weights(weights, Eigen::Index(s->lights.size()));
    std::unique_lock lock(s->state);
    s->weights = weights;
}

Camera RenderService::camera(const std::string& id) const {
    const auto s = find(id);
    if (s->kind != SessionKind::Cloud) throw ServiceError(422, "stack sessions have a fixed view");
    return s->camera;
}

RowMatrix<float> RenderService::weights(const std::string& id) const {
    const auto s = find(id);
    std::shared_lock lock(s->state);
    return s->weights;
}

RenderOutput RenderService::render(const std::string& id, const RenderRequest& request) const {
    const auto start = std::chrono::steady_clock::now();
    const auto s = find(id);
    RowMatrix<float> w;
    {
        std::shared_lock lock(s->state);
        w = request.weights.value_or(s->weights);
    }
    check_weights(w, Eigen::Index(s->lights.size()));
    const Display display = request.display.value_or(s->display);

    std::lock_guard one_at_a_time(s->render);
    HdrImage hdr;
    if (s->kind == SessionKind::Stack) {
        if (request.camera) throw ServiceError(422, "stack sessions have a fixed view");
        RemixWeights rw;
        rw.ambient_gain = w.row(0).array().transpose();
        for (Eigen::Index i = 1; i < w.rows(); ++i) rw.weights.push_back(w.row(i).array().transpose());
        hdr = remix(s->stack, rw);
    } else {
        const Camera& cam = request.camera ? *request.camera : s->camera;
        if (cam.kind != CameraKind::Perspective) throw ServiceError(422, "cloud sessions need a perspective camera");
        hdr = to_hdr(rasterize(s->cloud, cam, mix_coefficients(s->coeffs, w)));
    }
    RenderOutput out;
    if (request.hdr) {
        out.bytes = encode_lxhd(hdr);
        out.content_type = "application/octet-stream";
    } else {
        out.bytes = encode_png(display_image(hdr, display, s->curve), 1);
        out.content_type = "image/png";
    }
    out.milliseconds = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return out;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw ServiceError(400, std::string("malformed JSON: ") + e.what());
    }
}

RowMatrix<float> weights_from_json(const json& j) {
    if (!j.is_array()) throw ServiceError(400, "weights must be an array of [r, g, b] rows");
    RowMatrix<float> w(Eigen::Index(j.size()), 3);
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& row = j[i];
        if (row.is_number()) {
            w.row(Eigen::Index(i)).setConstant(row.get<float>());
            continue;
        }
        if (!row.is_array() || row.size() != 3) throw ServiceError(400, "each weight must be a number or [r, g, b]");
        for (std::size_t c = 0; c < 3; ++c) {
            if (!row[c].is_number()) throw ServiceError(400, "weights must be numbers");
            w(Eigen::Index(i), Eigen::Index(c)) = row[c].get<float>();
        }
    }
    return w;
}

json weights_to_json(const RowMatrix<float>& w) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < w.rows(); ++i) rows.push_back({w(i, 0), w(i, 1), w(i, 2)});
    return rows;
}

json lights_json(const RenderService& service, const std::string& id) {
    json lights = json::array();
    int index = 0;
    for (const auto& l : service.lights(id)) {
        json e{{"index", index++}, {"name", l.name}, {"weight", {l.weight[0], l.weight[1], l.weight[2]}}};
        e["kelvin"] = l.kelvin > 0.0 ? json(l.kelvin) : json(nullptr);
        lights.push_back(e);
    }
    return {{"id", id}, {"kind", service.kind(id) == SessionKind::Stack ? "stack" : "cloud"}, {"lights", lights}};
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(json{{"error", message}}.dump(), "application/json");
}

template <typename F>
auto guarded(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ServiceError& e) {
            send_error(res, e.status(), e.what());
        } catch (const json::exception& e) {
            send_error(res, 400, e.what());
        } catch (const std::invalid_argument& e) {
            send_error(res, 422, e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    };
}

}  // namespace

void install_routes(httplib::Server& server, RenderService& service, const std::filesystem::path& ui_dir) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, PATCH, DELETE, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Expose-Headers", "X-Render-Ms"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/healthz", [&service](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"status", "ok"}, {"sessions", service.session_count()}}.dump(), "application/json");
    });

    server.Get("/kelvin", guarded([](const httplib::Request& req, httplib::Response& res) {
        auto num = [&](const char* key, double fallback) {
            return req.has_param(key) ? std::stod(req.get_param_value(key)) : fallback;
        };
        res.set_content(kelvin_table(num("from", 1800.0), num("to", 10000.0), num("step", 100.0)).dump(), "application/json");
    }));

    server.Post("/sessions", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        LoadRequest load;
        const std::string kind = body.value("kind", "stack");
        if (kind == "stack") {
            load.kind = SessionKind::Stack;
            load.path = body.at("manifest").get<std::string>();
        } else if (kind == "cloud") {
            load.kind = SessionKind::Cloud;
            load.path = body.at("model").get<std::string>();
            if (body.contains("camera"))
                load.camera = camera_from_json(body["camera"], Camera::perspective(60.0, 512, 512, Pose::Identity()));
        } else {
            throw ServiceError(422, "kind must be 'stack' or 'cloud'");
        }
        load.id = body.value("id", "");
        load.display = parse_display(body.value("display", "curve"));
        const std::string id = service.load(load);
        res.status = 201;
        res.set_content(lights_json(service, id).dump(), "application/json");
    }));

    server.Get(R"(/sessions/([^/]+)/lights)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        res.set_content(lights_json(service, req.matches[1]).dump(), "application/json");
    }));

    server.Patch(R"(/sessions/([^/]+)/weights)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        if (!body.contains("weights")) throw ServiceError(400, "missing 'weights'");
        const std::string id = req.matches[1];
        service.set_weights(id, weights_from_json(body["weights"]));
        res.set_content(json{{"id", id}, {"weights", weights_to_json(service.weights(id))}}.dump(), "application/json");
    }));

    server.Post(R"(/sessions/([^/]+)/render)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        const std::string id = req.matches[1];
        RenderRequest r;
        if (body.contains("weights")) r.weights = weights_from_json(body["weights"]);
        if (body.contains("display")) r.display = parse_display(body["display"].get<std::string>());
        if (body.contains("camera")) {
            if (service.kind(id) != SessionKind::Cloud) throw ServiceError(422, "stack sessions have a fixed view");
            // Omitted camera fields fall back to the session's default view.
            r.camera = camera_from_json(body["camera"], service.camera(id));
        }
        r.hdr = body.value("format", "png") == "lxhd";
        const RenderOutput out = service.render(id, r);
        res.set_header("X-Render-Ms", std::to_string(out.milliseconds));
        res.set_content(reinterpret_cast<const char*>(out.bytes.data()), out.bytes.size(), out.content_type);
    }));

    server.Delete(R"(/sessions/([^/]+))", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        if (!service.close(req.matches[1])) throw ServiceError(404, "unknown session");
        res.status = 204;
    }));

    if (!ui_dir.empty() && std::filesystem::is_directory(ui_dir)) server.set_mount_point("/ui", ui_dir.string());
}

}  // namespace luxmix
