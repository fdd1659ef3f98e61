#pragma once

#include "luxmix/hdr.hpp"
#include "luxmix/light_stack.hpp"
#include "luxmix/relight.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace luxmix {

/// Carries the HTTP status the failure maps to.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

enum class Display { Curve, Agx };
enum class SessionKind { Stack, Cloud };

Display parse_display(const std::string& name);
std::string display_name(Display d);

/// {"position": [x, y, z], "azimuth", "elevation", "roll", "fov_deg", "width", "height"};
/// angles in radians, omitted fields keep the values of `base`.
Camera camera_from_json(const nlohmann::json& j, const Camera& base);
nlohmann::json camera_to_json(const Camera& cam);

struct LoadRequest {
    SessionKind kind = SessionKind::Stack;
    /// Stack manifest or cloud file.
    std::filesystem::path path;
    /// Caller-chosen id; generated when empty.
    std::string id;
    Display display = Display::Curve;
    /// Default view of a cloud session.
    std::optional<Camera> camera;
};

struct RenderRequest {
    /// M x 3 with row 0 the ambient gain; the session's weights when empty.
    std::optional<RowMatrix<float>> weights;
    std::optional<Camera> camera;
    std::optional<Display> display;
    /// Raw linear LXHD instead of a display PNG.
    bool hdr = false;
};

struct RenderOutput {
    std::vector<std::uint8_t> bytes;
    std::string content_type;
    double milliseconds = 0.0;
};

struct LightEntry {
    std::string name;
    /// Nominal color temperature; 0 when unknown (ambient, cloud slots).
    double kelvin = 0.0;
    Eigen::Array3f weight = Eigen::Array3f::Ones();
};

/// In-memory render sessions over light stacks and fitted clouds. Distinct
/// sessions render concurrently; one render at a time per session.
class RenderService {
public:
    RenderService();
    ~RenderService();

    /// Throws ServiceError: 404 missing file, 409 id in use or being loaded,
    /// 422 unreadable content.
    std::string load(const LoadRequest& request);
    /// Registers an in-memory stack.
    std::string add_stack(LightStack stack, const ToneCurve& curve, Display display = Display::Curve, std::string id = {});
    std::string add_cloud(RelightModel model, const Camera& camera, Display display = Display::Curve, std::string id = {});
    bool close(const std::string& id);

    SessionKind kind(const std::string& id) const;
    std::vector<LightEntry> lights(const std::string& id) const;
    /// 422 on a row-count mismatch or negative / non-finite entries.
    void set_weights(const std::string& id, const RowMatrix<float>& weights);
    RowMatrix<float> weights(const std::string& id) const;
    /// Default view of a cloud session.
    Camera camera(const std::string& id) const;
    RenderOutput render(const std::string& id, const RenderRequest& request) const;
    std::size_t session_count() const;

private:
    struct Session;
    static std::shared_ptr<Session> stack_session(LightStack stack, const ToneCurve& curve, Display display);
    static std::shared_ptr<Session> cloud_session(RelightModel model, const Camera& camera, Display display);
    std::shared_ptr<Session> find(const std::string& id) const;
    std::string insert(std::shared_ptr<Session> session, std::string id);
    std::string reserve(std::string id);

    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, bool> loading_;
    std::uint64_t next_id_ = 1;
};

/// Black-body table served to the UI: kelvin from..to inclusive by step.
nlohmann::json kelvin_table(double from, double to, double step);

/// Routes: POST /sessions, GET /sessions/{id}/lights, PATCH /sessions/{id}/weights,
/// POST /sessions/{id}/render, DELETE /sessions/{id}, GET /healthz, GET /kelvin;
/// static files under /ui when `ui_dir` exists. CORS is open.
void install_routes(httplib::Server& server, RenderService& service, const std::filesystem::path& ui_dir = {});

}  // namespace luxmix
