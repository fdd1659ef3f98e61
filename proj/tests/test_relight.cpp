#include <doctest.h>

#include <luxmix/relight.hpp>
#include <luxmix/rng.hpp>

#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace luxmix;

namespace {

Camera view_camera(int w, int h, double yaw) {
    Pose pose = Pose::Identity();
    pose.linear() = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    return Camera::perspective(60.0, w, h, pose);
}

template <typename S>
GaussianCloud<S> random_cloud(Rng& rng, int n, int lights) {
    GaussianCloud<S> c(n, lights);
    for (int i = 0; i < n; ++i) {
        const double depth = rng.uniform(1.5, 3.5);
        c.positions.row(i) << S(depth), S(rng.uniform(-0.4, 0.4) * depth), S(rng.uniform(-0.3, 0.3) * depth);
        for (int k = 0; k < 3; ++k) c.log_scales(i, k) = S(std::log(rng.uniform(0.08, 0.3)));
        for (int k = 0; k < 4; ++k) c.rotations(i, k) = S(rng.normal());
        const double op = rng.uniform(0.2, 0.8);
        c.opacities[i] = S(std::log(op / (1.0 - op)));
        for (int k = 0; k < c.coeffs.cols(); ++k) c.coeffs(i, k) = S(rng.uniform(-2.0, 0.5));
    }
    return c;
}

PointRows random_points(Rng& rng, int n) {
    PointRows p(n, 3);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.uniform(-1.0, 1.0);
    return p;
}

std::vector<TrainView> random_views(Rng& rng, int count, int lights, int w, int h) {
    std::vector<TrainView> views;
    for (int v = 0; v < count; ++v) {
        TrainView tv{view_camera(w, h, 0.05 * v), {}, test::random_ldr(rng, w, h)};
        for (int l = 0; l < lights; ++l) tv.targets.push_back(test::random_hdr(rng, w, h, 0.0, 0.6));
        views.push_back(std::move(tv));
    }
    return views;
}

// Views whose targets are exactly what `cloud` renders.
std::vector<TrainView> consistent_views(const GaussianCloud<float>& cloud, const RowMatrix<float>& weights, const ToneCurve& curve,
                                        int count, int w, int h) {
    std::vector<TrainView> views;
    for (int v = 0; v < count; ++v) {
        const Camera cam = view_camera(w, h, 0.08 * v - 0.08);
        TrainView tv{cam, {}, LdrImage(w, h)};
        for (int l = 0; l < cloud.lights(); ++l) tv.targets.push_back(render_light(cloud, cam, l));
        HdrImage comp(w, h);
        for (int l = 0; l < cloud.lights(); ++l)
            comp.pixels() += tv.targets[std::size_t(l)].pixels().rowwise() * weights.row(l).array();
        tv.original = LdrImage(w, h);
        tv.original.pixels() = comp.pixels().unaryExpr([&](float x) { return float(std::min<double>(curve.apply(x), 1.0)); });
        views.push_back(std::move(tv));
    }
    return views;
}

}  // namespace

TEST_CASE("fit config validation") {
    FitConfig c;
    CHECK_NOTHROW(c.validate());
    c.knn_k = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.lr.coeff = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.iters_frozen = -1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.curve_init.gamma = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("grid knn equals brute force") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        PointRows p = random_points(rng, 50);
        if (trial % 4 == 1) p.col(2).setZero();                      // planar
        if (trial % 4 == 2) p.col(1) *= 1e-3;                        // thin slab
        if (trial % 4 == 3) p.bottomRows(10) = p.topRows(10).eval();  // duplicates force ties
        for (int k : {1, 3, 8}) {
            const auto grid = knn_graph(p, k);
            const auto brute = knn_graph_brute(p, k);
            CHECK(grid.neighbors == brute.neighbors);
        }
    }
    PointRows big = random_points(rng, 3000);
    CHECK(knn_graph(big, 8).neighbors == knn_graph_brute(big, 8).neighbors);
    CHECK_THROWS_AS(knn_graph(random_points(rng, 8), 8), std::invalid_argument);
}

TEST_CASE("smoothness of two splats is their squared coefficient distance") {
    PointRows p(2, 3);
    p << 0, 0, 0, 1, 0, 0;
    const auto g = knn_graph(p, 1);
    RowMatrix<double> L(2, 6);
    L << 0.1, 0.2, 0.3, 1.0, 0.0, 2.0, 0.4, -0.1, 0.3, 0.5, 0.5, 2.5;
    CHECK(smooth_loss(L, g) == doctest::Approx((L.row(0) - L.row(1)).squaredNorm()).epsilon(1e-14));
    L.row(1) = L.row(0);
    CHECK(smooth_loss(L, g) == 0.0);
}

TEST_CASE("smoothness gradient matches finite differences") {
    Rng rng(5);
    const PointRows p = random_points(rng, 30);
    const auto g = knn_graph(p, 4);
    RowMatrix<double> L(30, 6);
    for (Eigen::Index i = 0; i < L.size(); ++i) L.data()[i] = rng.uniform(0.0, 2.0);
    RowMatrix<double> grad = RowMatrix<double>::Zero(30, 6);
    smooth_loss(L, g, &grad);
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < L.size(); ++k) {
        const double saved = L.data()[k];
        L.data()[k] = saved + h;
        const double up = smooth_loss(L, g);
        L.data()[k] = saved - h;
        const double down = smooth_loss(L, g);
        L.data()[k] = saved;
        CHECK(grad.data()[k] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("olat L1 of a constant offset is the offset") {
    Rng rng(11);
    const auto cloud = random_cloud<float>(rng, 30, 3);
    auto views = consistent_views(cloud, RowMatrix<float>::Ones(3, 3), {2.2, 1e-3}, 2, 24, 18);
    for (double delta : {0.05, 0.25}) {
        auto shifted = views;
        for (auto& v : shifted)
            for (auto& t : v.targets) t.pixels() -= float(delta);
        CHECK(loss_olat(cloud, shifted, 0.0) == doctest::Approx(delta).epsilon(1e-5));
    }
}

TEST_CASE("consistent data is a fixed point") {
    Rng rng(12);
    const auto cloud = random_cloud<float>(rng, 30, 3);
    RowMatrix<float> w(3, 3);
    w << 0.3f, 0.3f, 0.3f, 1.0f, 0.8f, 0.6f, 0.5f, 0.7f, 1.2f;
    const ToneCurve curve{2.2, 1e-3};
    const auto views = consistent_views(cloud, w, curve, 2, 24, 18);
    CHECK(loss_olat(cloud, views, 0.2) < 1e-6);
    CHECK(loss_comp(cloud, views, w, curve) < 1e-6);

    FitState<float> s{cloud, w, 2.2f, 1e-3f};
    FitGrad<float> grad(s);
    ObjectiveTerms terms;
    terms.lambda_comp = 0.0;
    objective(s, std::span<const TrainView>(views), terms, &grad);
    CHECK(grad.cloud.coeffs.cwiseAbs().maxCoeff() < 1e-6f);
    CHECK(grad.cloud.positions.cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("stage-2 gradients match finite differences") {
    Rng rng(21);
    auto cloud = random_cloud<double>(rng, 24, 3);
    const auto views = random_views(rng, 2, 3, 20, 16);
    RowMatrix<double> w(3, 3);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(0.2, 1.0);
    FitState<double> s{cloud, w, 2.1, 2e-3};
    const auto knn = knn_graph(cloud.positions, 4);
    ObjectiveTerms terms;
    terms.lambda_smooth = 0.5;
    terms.knn = &knn;
    RasterSettings<double> raster;
    raster.early_stop = 0.0;

    FitGrad<double> grad(s);
    const auto rep = objective(s, std::span<const TrainView>(views), terms, &grad, raster);
    CHECK(rep.l_olat > 0.0);
    CHECK(rep.l_comp > 0.0);
    CHECK(rep.l_smooth > 0.0);
    CHECK(rep.total == doctest::Approx(rep.l_olat + rep.l_comp + 0.5 * rep.l_smooth));

    auto eval = [&] { return objective(s, std::span<const TrainView>(views), terms, static_cast<FitGrad<double>*>(nullptr), raster).total; };
    const double h = 1e-6;
    auto check = [&](const char* name, auto* param, const auto* analytic, Eigen::Index count) {
        INFO(name);
        double worst = 0.0, largest = 0.0;
        for (Eigen::Index k = 0; k < count; ++k) {
            const double saved = param[k];
            param[k] = saved + h;
            const double up = eval();
            param[k] = saved - h;
            const double down = eval();
            param[k] = saved;
            const double fd = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(analytic[k] - fd) / (std::abs(fd) + 1e-3));
            largest = std::max(largest, std::abs(analytic[k]));
        }
        CHECK(worst < 1e-4);
        CHECK(largest > 0.0);
    };
    auto& c = s.cloud;
    check("positions", c.positions.data(), grad.cloud.positions.data(), c.positions.size());
    check("log_scales", c.log_scales.data(), grad.cloud.log_scales.data(), c.log_scales.size());
    check("rotations", c.rotations.data(), grad.cloud.rotations.data(), c.rotations.size());
    check("opacities", c.opacities.data(), grad.cloud.opacities.data(), c.opacities.size());
    check("coeffs", c.coeffs.data(), grad.cloud.coeffs.data(), c.coeffs.size());
    check("weights", s.weights.data(), grad.weights.data(), s.weights.size());
    check("gamma", &s.gamma, &grad.gamma, 1);
    check("beta", &s.beta, &grad.beta, 1);
}

TEST_CASE("stage-1 gradients match finite differences") {
    Rng rng(22);
    auto cloud = random_cloud<double>(rng, 24, 1);
    const auto views = random_views(rng, 2, 0, 20, 16);
    RasterSettings<double> raster;
    raster.early_stop = 0.0;
    CloudGrad<double> grad(cloud);
    stage1_objective(cloud, std::span<const TrainView>(views), 0.2, &grad, raster);
    auto eval = [&] { return stage1_objective(cloud, std::span<const TrainView>(views), 0.2, static_cast<CloudGrad<double>*>(nullptr), raster); };
    auto worst_error = [&](auto& param, const auto& analytic) {
        const double h = 1e-6;
        double worst = 0.0;
        for (Eigen::Index k = 0; k < param.size(); ++k) {
            const double saved = param.data()[k];
            param.data()[k] = saved + h;
            const double up = eval();
            param.data()[k] = saved - h;
            const double down = eval();
            param.data()[k] = saved;
            const double fd = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(analytic.data()[k] - fd) / (std::abs(fd) + 1e-3));
        }
        return worst;
    };
    CHECK(worst_error(cloud.coeffs, grad.coeffs) < 1e-4);
    CHECK(worst_error(cloud.positions, grad.positions) < 1e-4);
    CHECK(worst_error(cloud.opacities, grad.opacities) < 1e-4);
}

TEST_CASE("stage-1 loss decreases") {
    Rng rng(31);
    const auto truth = random_cloud<float>(rng, 40, 1);
    std::vector<TrainView> views;
    for (int v = 0; v < 3; ++v) {
        const Camera cam = view_camera(32, 24, 0.06 * (v - 1));
        TrainView tv{cam, {}, LdrImage(32, 24)};
        tv.original.pixels() = render_light(truth, cam, 0).pixels().min(1.0f);
        views.push_back(std::move(tv));
    }
    auto start = truth;
    for (Eigen::Index i = 0; i < start.size(); ++i) {
        start.coeffs.row(i).setConstant(-0.5f);
        start.positions.row(i) += (Eigen::RowVector3f::Random() * 0.05f);
    }
    FitConfig cfg;
    cfg.iters_stage1 = 100;
    cfg.lr.coeff = 2e-2;
    std::vector<TelemetryRow> rows;
    const auto fitted = fit_stage1(start, views, cfg, &rows);
    CHECK(rows.size() == 100);
    const double before = stage1_objective(start, std::span<const TrainView>(views), 0.2);
    const double after = stage1_objective(fitted, std::span<const TrainView>(views), 0.2);
    CHECK(after < 0.5 * before);
}

TEST_CASE("zero iterations return the initialization") {
    Rng rng(41);
    const auto cloud = random_cloud<float>(rng, 20, 1);
    const auto views = random_views(rng, 2, 3, 16, 12);
    FitConfig cfg;
    cfg.iters_stage1 = cfg.iters_joint = cfg.iters_frozen = 0;
    const auto s1 = fit_stage1(cloud, views, cfg);
    CHECK(s1.positions == cloud.positions);
    CHECK(s1.coeffs == cloud.coeffs);

    const std::vector<double> scales{0.5, 1.0, 2.0};
    const auto model = fit_stage2(cloud, views, cfg, scales);
    const auto init = stage2_initial_state(cloud, 3, cfg, scales);
    CHECK(model.cloud.coeffs == init.cloud.coeffs);
    CHECK(model.weights == init.weights);
    CHECK(model.curve.gamma == doctest::Approx(2.2));
    CHECK(model.curve.offset == doctest::Approx(1e-3));
    CHECK(model.weights(2, 1) == 2.0f);
    // Slots split the base color evenly.
    const RowMatrix<float> eff = light_coefficients(init.cloud);
    const RowMatrix<float> sum = eff.middleCols(0, 3) + eff.middleCols(3, 3) + eff.middleCols(6, 3);
    CHECK((sum - light_coefficients(cloud)).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("frozen phase leaves geometry bit-identical") {
    Rng rng(51);
    const auto cloud = random_cloud<float>(rng, 30, 1);
    const auto views = random_views(rng, 2, 3, 16, 12);
    FitConfig cfg;
    cfg.iters_joint = 0;
    cfg.iters_frozen = 6;
    cfg.smooth_every = 2;
    std::vector<TelemetryRow> rows;
    const auto model = fit_stage2(cloud, views, cfg, {}, &rows);
    CHECK(model.cloud.positions == cloud.positions);
    CHECK(model.cloud.log_scales == cloud.log_scales);
    CHECK(model.cloud.rotations == cloud.rotations);
    CHECK(model.cloud.opacities == cloud.opacities);
    CHECK(model.cloud.coeffs != stage2_initial_state(cloud, 3, cfg).cloud.coeffs);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].loss.l_smooth == 0.0);
    CHECK(rows[1].loss.l_smooth > 0.0);

    cfg.iters_joint = 2;
    cfg.iters_frozen = 0;
    CHECK(fit_stage2(cloud, views, cfg).cloud.positions != cloud.positions);
}

TEST_CASE("weights and offset stay nonnegative") {
    Rng rng(52);
    const auto cloud = random_cloud<float>(rng, 20, 1);
    const auto views = random_views(rng, 2, 2, 16, 12);
    FitConfig cfg;
    cfg.iters_joint = 30;
    cfg.iters_frozen = 0;
    cfg.lr.weight = 0.5;
    cfg.lr.beta = 0.5;
    const auto model = fit_stage2(cloud, views, cfg, std::vector<double>{1e-3, 1e-3});
    CHECK(model.weights.minCoeff() >= 0.0f);
    CHECK(model.curve.offset >= 0.0);
}

TEST_CASE("depth unprojection and point initialization") {
    const Camera cam = view_camera(16, 12, 0.3);
    ScalarRaster depth = ScalarRaster::Constant(12, 16, 2.0f);
    depth(0, 0) = 0.0f;
    depth(1, 1) = std::numeric_limits<float>::infinity();
    const LdrImage colors(16, 12, 0.5f);
    const auto pts = unproject_depth(depth, cam, colors);
    CHECK(pts.size() == 16 * 12 - 2);
    for (const auto& p : pts) CHECK((p.position - cam.position()).norm() == doctest::Approx(2.0));
    CHECK(unproject_depth(depth, cam, colors, 2).size() == 8 * 6 - 1);

    // A regular lattice keeps one splat per site; scale is the lattice spacing.
    std::vector<PointSample> grid;
    for (int x = 0; x < 10; ++x)
        for (int y = 0; y < 10; ++y) grid.push_back({Vec3(0.1 * x + 0.05, 0.1 * y + 0.05, 0.0), Eigen::Array3f(0.2f, 0.4f, 0.6f)});
    InitOptions opt;
    opt.voxel = 0.05;
    const auto c = init_cloud(grid, opt);
    CHECK(c.size() == 100);
    CHECK(std::exp(c.log_scales(55, 0)) == doctest::Approx(0.1).epsilon(1e-4));
    CHECK(softplus(c.coeffs(0, 1)) == doctest::Approx(0.4).epsilon(1e-5));
    CHECK(sigmoid(c.opacities[0]) == doctest::Approx(0.5));
    opt.max_points = 30;
    CHECK(init_cloud(grid, opt).size() <= 30);
}

TEST_CASE("model files round trip") {
    Rng rng(61);
    RelightModel m;
    m.cloud = random_cloud<float>(rng, 17, 4);
    m.weights = RowMatrix<float>::Constant(4, 3, 0.75f);
    m.weights(2, 1) = 1.5f;
    m.curve = {2.05, 0.002};
    m.light_names = {"ambient", "a", "b", "c"};
    const auto dir = std::filesystem::temp_directory_path() / "luxmix_model_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "scene.lxg";
    write_model(path, m);
    const auto back = read_model(path);
    CHECK(back.cloud.positions == m.cloud.positions);
    CHECK(back.cloud.rotations == m.cloud.rotations);
    CHECK(back.cloud.coeffs == m.cloud.coeffs);
    CHECK(back.weights == m.weights);
    CHECK(back.curve.gamma == m.curve.gamma);
    CHECK(back.light_names == m.light_names);
    CHECK(std::filesystem::file_size(path) == 10 + 8 + 17 * (3 + 3 + 4 + 1 + 12) * 4);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("LUXGAUSS", 8);
    }
    CHECK_THROWS_AS(read_model(path), std::runtime_error);
    std::filesystem::resize_file(path, 20);
    CHECK_THROWS_AS(read_model(path), std::runtime_error);
    std::filesystem::remove_all(dir);
}
