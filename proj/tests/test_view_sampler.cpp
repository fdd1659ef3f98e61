#include <doctest.h>

#include <luxmix/hdr.hpp>
#include <luxmix/metrics.hpp>
#include <luxmix/scene_oracle.hpp>
#include <luxmix/view_sampler.hpp>

#include "test_util.hpp"

#include <numbers>

using namespace luxmix;

namespace {

constexpr double kPi = std::numbers::pi;

// Independent all-pixel overlap: every pixel of a, exact depth agreement test.
double brute_overlap(const ScalarRaster& da, const Camera& ca, const ScalarRaster& db, const Camera& cb, double tol) {
    int valid = 0, agree = 0;
    for (int y = 0; y < ca.height; ++y)
        for (int x = 0; x < ca.width; ++x) {
            if (!(da(y, x) > 0)) continue;
            ++valid;
            const Vec3 p = ca.position() + double(da(y, x)) * ca.pixel_direction(x, y);
            const Vec3 local = cb.pose.linear().transpose() * (p - cb.position());
            if (local.x() <= 0) continue;
            const double f = cb.focal();
            const double u = 0.5 * cb.width - f * local.y() / local.x();
            const double v = 0.5 * cb.height - f * local.z() / local.x();
            if (u < 0 || v < 0 || u >= cb.width || v >= cb.height) continue;
            if (std::abs(local.norm() - db(int(v), int(u))) <= tol) ++agree;
        }
    return valid ? double(agree) / valid : 0.0;
}

BoxScene test_scene(std::uint64_t seed, int pano_width) {
    SceneGenOptions opt;
    opt.lights = 3;
    opt.equirect_width = pano_width;
    opt.cameras = 2;
    return generate_scene(seed, opt);
}

}  // namespace

TEST_CASE("ViewRequest validation") {
    CHECK_THROWS_AS((ViewRequest{0, 0, 15}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((ViewRequest{0, 0, 130}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((ViewRequest{0, 2.0, 60}.validate()), std::invalid_argument);
    CHECK_NOTHROW((ViewRequest{1.0, -1.0, 90}.validate()));
    CHECK_THROWS_AS(equirect_to_perspective(HdrImage(10, 10), ViewRequest{}), std::invalid_argument);
}

TEST_CASE("equirect_to_perspective basics") {
    const HdrImage flat(64, 32, 0.37f);
    const HdrImage crop = equirect_to_perspective(flat, ViewRequest{0.4, 0.2, 70, 17, 13});
    CHECK(((crop.pixels() - 0.37f).abs() <= 1e-6f).all());

    Rng rng(40);
    const HdrImage pano = test::random_hdr(rng, 64, 32, 0.0, 5.0);
    const HdrImage center = equirect_to_perspective(pano, ViewRequest{0, 0, 60, 33, 33});
    const Eigen::Array3f expect = 0.25f * (pano.pixel(31, 15) + pano.pixel(32, 15) + pano.pixel(31, 16) + pano.pixel(32, 16)).transpose();
    CHECK(((center.pixel(16, 16).transpose() - expect).abs() <= 1e-5f).all());

    for (int trial = 0; trial < 10; ++trial) {
        const ViewRequest req{rng.uniform(-kPi, kPi), rng.uniform(-1.5, 1.5), rng.uniform(25, 115), 24, 20};
        const HdrImage out = equirect_to_perspective(pano, req);
        for (int c = 0; c < 3; ++c) {
            CHECK(out.pixels().col(c).minCoeff() >= pano.pixels().col(c).minCoeff() - 1e-6f);
            CHECK(out.pixels().col(c).maxCoeff() <= pano.pixels().col(c).maxCoeff() + 1e-6f);
        }
    }
}

TEST_CASE("resampled panorama matches a direct perspective render") {
    const BoxScene s = test_scene(41, 1024);
    const Camera& pano_cam = s.cameras[0];
    const HdrImage pano = render_full(s, pano_cam);
    const ToneCurve curve{2.2, 0.0};
    for (const ViewRequest req : {ViewRequest{0.7, -0.2, 60, 128, 128}, ViewRequest{-2.2, 0.3, 60, 128, 128}}) {
        const HdrImage resampled = equirect_to_perspective(pano, req);
        const HdrImage direct = render_full(s, req.camera(pano_cam));
        const double db = psnr(tonemap_curve(resampled, curve), tonemap_curve(direct, curve)).db;
        INFO("psnr " << db);
        CHECK(db >= 35.0);
    }
}

TEST_CASE("pick_light_view") {
    Rng rng(42);
    Mask one = Mask::Constant(64, 128, false);
    one(20, 90) = true;
    const ViewRequest v = pick_light_view(one, 60, 0.0, rng);
    const Vec2 ang = angles_from_direction(equirect_pixel_direction(90, 20, 128, 64));
    CHECK(v.azimuth == doctest::Approx(ang.x()).epsilon(1e-12));
    CHECK(v.elevation == doctest::Approx(ang.y()).epsilon(1e-12));

    Mask sym = Mask::Constant(64, 128, false);
    sym.block(28, 60, 5, 8).setConstant(true);  // columns 60..67 straddle the forward axis
    CHECK(std::abs(pick_light_view(sym, 60, 0.0, rng).azimuth) <= 1e-12);

    // Antipodal blobs: the larger one wins.
    Mask anti = Mask::Constant(64, 128, false);
    anti.block(31, 0, 2, 3).setConstant(true);
    anti.block(31, 64, 2, 3).setConstant(true);
    anti.block(31, 67, 2, 1).setConstant(true);
    const Vec3 c = spherical_centroid(anti);
    CHECK(c.x() > 0.9);

    CHECK_THROWS_AS(pick_light_view(Mask::Constant(64, 128, false), 60, 0.0, rng), std::invalid_argument);

    for (int trial = 0; trial < 50; ++trial) {
        Mask m = test::random_mask(rng, 64, 32, 0.0);
        const int x = int(rng.index(56)), y = int(rng.index(26));
        m.block(y, x, 1 + rng.index(6), 1 + rng.index(8)).setConstant(true);
        const ViewRequest req = pick_light_view(m, rng.uniform(30, 100), rng.uniform(0, 1.0), rng, 40, 30);
        const Camera cam = req.camera(Camera::equirect(64, 32, Pose::Identity()));
        const auto px = cam.project(spherical_centroid(m));
        REQUIRE(px.has_value());
        CHECK(cam.in_bounds(*px));
    }
}

TEST_CASE("covisibility") {
    const BoxScene s = test_scene(43, 64);
    const Vec3 pos = s.cameras[0].position();
    const Camera a = Camera::perspective(60, 48, 48, make_pose(rotation_from_view(0.3, 0.0), pos));
    const ScalarRaster da = render_depth(s, a);
    const double tol = 0.02 * s.diagonal();

    const auto same = covisibility(da, a, da, a, tol);
    CHECK(same.valid);
    CHECK(same.overlap == doctest::Approx(1.0));

    BoxScene empty = s;
    empty.obstacles.clear();
    const Camera fwd = Camera::perspective(60, 48, 48, make_pose(rotation_from_view(0.0, 0.0), pos));
    const Camera bwd = Camera::perspective(60, 48, 48, make_pose(rotation_from_view(kPi, 0.0), pos));
    CHECK(covisibility(render_depth(empty, fwd), fwd, render_depth(empty, bwd), bwd, tol).overlap == 0.0);

    const Camera b = Camera::perspective(60, 48, 48, make_pose(rotation_from_view(0.3 + kPi / 6, 0.05), pos + Vec3(0.2, -0.1, 0)));
    const ScalarRaster db = render_depth(s, b);
    const auto r = covisibility(da, a, db, b, tol);
    CHECK(r.overlap == doctest::Approx(brute_overlap(da, a, db, b, tol)).epsilon(0.02).scale(1.0));
    CHECK(r.overlap > 0.2);

    CHECK_FALSE(covisibility(ScalarRaster::Zero(48, 48), a, db, b, tol).valid);
}

TEST_CASE("sample_trajectory") {
    const BoxScene s = test_scene(44, 256);
    std::vector<PanoSource> panos;
    for (const Camera& cam : s.cameras) {
        Mask lights = Mask::Constant(cam.height, cam.width, false);
        for (std::size_t i = 0; i < s.lights.size(); ++i) lights = lights || render_light_masks(s, i, cam).emissive;
        panos.push_back({render_depth(s, cam), lights, cam});
    }
    TrajectoryOptions opt;
    opt.tol = 0.02 * s.diagonal();

    SUBCASE("single view is the light-centered view") {
        opt.count = 1;
        opt.jitter = 0.0;
        const Trajectory t = sample_trajectory(panos, opt, 7);
        REQUIRE(t.views.size() == 1);
        const auto& v = t.views[0];
        const Vec2 ang = angles_from_direction(spherical_centroid(panos[v.source].light_mask));
        CHECK(v.view.azimuth == doctest::Approx(ang.x()));
        CHECK(v.view.elevation == doctest::Approx(ang.y()));
    }
    SUBCASE("no overlap requirement") {
        opt.count = 6;
        opt.min_overlap = 0.0;
        const Trajectory t = sample_trajectory(panos, opt, 8);
        CHECK(t.views.size() == 6);
        CHECK_FALSE(t.partial);
    }
    SUBCASE("overlap constraint holds at full resolution") {
        opt.count = 6;
        const Trajectory t = sample_trajectory(panos, opt, 9);
        CHECK(t.views.size() == 6);
        CHECK(t.coverage.size() == t.views.size());
        for (std::size_t i = 1; i < t.coverage.size(); ++i) CHECK(t.coverage[i] >= t.coverage[i - 1]);
        for (std::size_t i = 1; i < t.views.size(); ++i) {
            const Camera ca = t.views[i - 1].view.camera(panos[t.views[i - 1].source].camera);
            const Camera cb = t.views[i].view.camera(panos[t.views[i].source].camera);
            const double o = brute_overlap(render_depth(s, ca), ca, render_depth(s, cb), cb, opt.tol);
            CHECK(o >= opt.min_overlap - 0.02);
            CHECK(central_clearance(render_depth(s, cb)) >= opt.min_clearance - 0.05);
        }
        const Trajectory again = sample_trajectory(panos, opt, 9);
        CHECK(trajectory_to_json(again) == trajectory_to_json(t));
        CHECK(trajectory_to_json(trajectory_from_json(trajectory_to_json(t))) == trajectory_to_json(t));
    }
    SUBCASE("impossible constraint is reported as partial") {
        opt.count = 3;
        opt.min_clearance = 100.0;
        opt.max_draws = 50;
        const Trajectory t = sample_trajectory(panos, opt, 10);
        CHECK(t.partial);
        CHECK(t.views.size() == 1);
    }
}
