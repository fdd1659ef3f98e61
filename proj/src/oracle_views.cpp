#include "luxmix/oracle_views.hpp"

#include "luxmix/light_stack.hpp"
#include "luxmix/rng.hpp"
#include "luxmix/view_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace luxmix {

OracleViews oracle_views(const BoxScene& scene, const OracleViewOptions& options) {
    scene.validate();
    if (options.train < 2 || options.held_out < 0) throw std::invalid_argument("oracle_views: need at least two training views");
    if (scene.cameras.empty()) throw std::invalid_argument("oracle_views: scene has no cameras");
    if (!options.curve.valid()) throw std::invalid_argument("oracle_views: invalid tone curve");

    const std::size_t positions = std::min<std::size_t>(std::size_t(std::max(options.positions, 1)), scene.cameras.size());
    Rng rng(options.seed);
    std::vector<double> base(positions);
    std::vector<int> ring(positions, 0);
    for (std::size_t p = 0; p < positions; ++p) base[p] = rng.uniform(-std::numbers::pi, std::numbers::pi);
    for (int v = 0; v < options.train; ++v) ++ring[std::size_t(v) % positions];

    auto request = [&](double azimuth, double elevation) {
        ViewRequest req;
        req.azimuth = std::remainder(azimuth, 2.0 * std::numbers::pi);
        req.elevation = elevation;
        req.fov_deg = options.fov_deg;
        req.width = options.width;
        req.height = options.height;
        return req;
    };
    auto make_view = [&](const Camera& cam) {
        const LightStack stack = render_stack(scene, cam);
        TrainView tv{cam, {stack.ambient()}, compose_input(stack, options.curve)};
        for (const auto& layer : stack.layers()) tv.targets.push_back(layer);
        return tv;
    };

    OracleViews out;
    out.light_names.push_back("ambient");
    for (std::size_t i : scene.controllable_lights()) out.light_names.push_back(scene.lights[i].name);
    for (int v = 0; v < options.train; ++v) {
        const std::size_t p = std::size_t(v) % positions;
        const int k = v / int(positions);
        const double step = 2.0 * std::numbers::pi / ring[p];
        const Camera cam = request(base[p] + k * step, k % 2 ? -options.elevation : options.elevation).camera(scene.cameras[p]);
        out.train.push_back(make_view(cam));
        out.train_depth.push_back(render_depth(scene, cam));
    }
    std::vector<std::vector<int>> gaps(positions);
    for (std::size_t p = 0; p < positions; ++p) {
        gaps[p].resize(std::size_t(ring[p]));
        for (int k = 0; k < ring[p]; ++k) gaps[p][std::size_t(k)] = k;
        for (std::size_t i = gaps[p].size(); i > 1; --i) std::swap(gaps[p][i - 1], gaps[p][rng.index(i)]);
    }
    for (int h = 0; h < options.held_out; ++h) {
        const std::size_t p = std::size_t(h) % positions;
        const auto& g = gaps[p];
        const int k = g[std::size_t(h / int(positions)) % g.size()];
        const double step = 2.0 * std::numbers::pi / ring[p];
        out.held_out.push_back(make_view(request(base[p] + (k + 0.5) * step, 0.0).camera(scene.cameras[p])));
    }
    return out;
}

GaussianCloud<float> init_from_views(const OracleViews& views, const InitOptions& options) {
    std::vector<PointSample> points;
    for (std::size_t v = 0; v < views.train.size(); ++v) {
        const auto p = unproject_depth(views.train_depth[v], views.train[v].camera, views.train[v].original);
        points.insert(points.end(), p.begin(), p.end());
    }
    return init_cloud(points, options);
}

}  // namespace luxmix
