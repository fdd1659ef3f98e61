#include <doctest.h>

#include <luxmix/light_stack.hpp>

#include "test_util.hpp"

#include <Eigen/Dense>

#include <filesystem>

using namespace luxmix;
using test::constant_hdr;
using test::random_hdr;

namespace {

LightStack random_stack(Rng& rng, int w, int h, std::size_t n) {
    std::vector<HdrImage> layers;
    std::vector<Rgb> scales;
    for (std::size_t i = 0; i < n; ++i) {
        layers.push_back(random_hdr(rng, w, h, 0.0, 2.0));
        scales.push_back(Rgb(float(rng.uniform(0.1, 3)), float(rng.uniform(0.1, 3)), float(rng.uniform(0.1, 3))));
    }
    return LightStack(random_hdr(rng, w, h, 0.0, 0.5), std::move(layers), std::move(scales));
}

RemixWeights random_weights(Rng& rng, std::size_t n) {
    RemixWeights w;
    for (std::size_t i = 0; i < n; ++i)
        w.weights.push_back(Rgb(float(rng.uniform(0, 4)), float(rng.uniform(0, 4)), float(rng.uniform(0, 4))));
    w.ambient_gain = Rgb(float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), float(rng.uniform(0, 2)));
    return w;
}

float max_abs_diff(const HdrImage& a, const HdrImage& b) { return (a.pixels() - b.pixels()).abs().maxCoeff(); }

}  // namespace

TEST_CASE("LightStack rejects inconsistent construction") {
    CHECK_THROWS_AS(LightStack(constant_hdr(2, 2, 0), {constant_hdr(3, 2, 0)}, {Rgb::Ones()}), std::invalid_argument);
    CHECK_THROWS_AS(LightStack(constant_hdr(2, 2, 0), {constant_hdr(2, 2, 0)}, {}), std::invalid_argument);
    CHECK_THROWS_AS(LightStack(constant_hdr(2, 2, 0), {constant_hdr(2, 2, 0)}, {Rgb(-1, 0, 0)}), std::invalid_argument);
}

TEST_CASE("remix") {
    const LightStack stack(constant_hdr(3, 2, 0.1f), {constant_hdr(3, 2, 0.2f), constant_hdr(3, 2, 0.3f)},
                           {Rgb::Ones(), Rgb::Ones()});
    RemixWeights zero{{Rgb::Zero(), Rgb::Zero()}, Rgb::Ones()};
    CHECK((remix(stack, zero).pixels() == stack.ambient().pixels()).all());

    RemixWeights w{{Rgb::Constant(2), Rgb::Constant(1)}, Rgb::Ones()};
    const double scalar_oracle = 0.1 + 2 * 0.2 + 1 * 0.3;
    CHECK(((remix(stack, w).pixels() - float(scalar_oracle)).abs() <= 1e-6f).all());

    CHECK_THROWS_AS(remix(stack, RemixWeights{{Rgb::Ones()}, Rgb::Ones()}), std::invalid_argument);
}

TEST_CASE("remix with the stored scales is the linear input") {
    Rng rng(20);
    const LightStack stack = random_stack(rng, 5, 4, 3);
    HdrImage expected = stack.ambient();
    for (std::size_t i = 0; i < 3; ++i)
        for (Eigen::Index p = 0; p < expected.pixel_count(); ++p)
            for (int c = 0; c < 3; ++c) expected.pixels()(p, c) += stack.scales()[i][c] * stack.layers()[i].pixels()(p, c);
    CHECK(max_abs_diff(remix(stack, RemixWeights::from_scales(stack)), expected) <= 1e-5f);
}

TEST_CASE("remix additivity and homogeneity") {
    Rng rng(21);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = rng.index(5) + 1;
        const LightStack stack = random_stack(rng, 6, 5, n);
        const RemixWeights w1 = random_weights(rng, n);
        RemixWeights w2 = random_weights(rng, n);
        w2.ambient_gain = Rgb::Zero();
        RemixWeights sum = w1;
        for (std::size_t i = 0; i < n; ++i) sum.weights[i] += w2.weights[i];
        HdrImage added = remix(stack, w1);
        added.pixels() += remix(stack, w2).pixels();
        CHECK(max_abs_diff(remix(stack, sum), added) <= 1e-5f);

        const float alpha = float(rng.uniform(0, 5));
        RemixWeights scaled = w1;
        for (auto& x : scaled.weights) x *= alpha;
        scaled.ambient_gain *= alpha;
        HdrImage expect = remix(stack, w1);
        expect.pixels() *= alpha;
        CHECK(max_abs_diff(remix(stack, scaled), expect) <= 1e-4f);
    }
}

TEST_CASE("compose_input") {
    const LightStack empty(constant_hdr(2, 2, 1.7f), {}, {});
    CHECK((compose_input(empty, {1.0, 0.0}).pixels() == 1.0f).all());

    Rng rng(22);
    const LightStack base = random_stack(rng, 4, 4, 2);
    const LightStack off(base.ambient(), base.layers(), {Rgb::Zero(), Rgb::Zero()});
    CHECK((compose_input(off, {2.2, 0.0}).pixels() == tonemap_curve(base.ambient(), {2.2, 0.0}).pixels()).all());
}

TEST_CASE("one_light_off") {
    Rng rng(23);
    const LightStack stack = random_stack(rng, 6, 6, 3);
    const HdrImage full = remix(stack, RemixWeights::from_scales(stack));
    CHECK((one_light_off(full, stack.layers()[0], Rgb::Zero()).pixels() == full.pixels()).all());

    for (std::size_t k = 0; k < 3; ++k) {
        RemixWeights w = RemixWeights::from_scales(stack);
        w.weights[k] = Rgb::Zero();
        CHECK(max_abs_diff(one_light_off(full, stack.layers()[k], stack.scales()[k]), remix(stack, w)) <= 1e-5f);
    }

    const LightStack single(random_hdr(rng, 4, 4), {random_hdr(rng, 4, 4)}, {Rgb(0.5f, 1.5f, 2.0f)});
    CHECK(max_abs_diff(one_light_off(remix(single, RemixWeights::from_scales(single)), single.layers()[0], single.scales()[0]),
                       single.ambient()) <= 1e-6f);

    // Clamped at zero rather than going negative.
    CHECK((one_light_off(constant_hdr(2, 2, 0.1f), constant_hdr(2, 2, 1.0f), Rgb::Ones()).pixels() == 0.0f).all());
    CHECK_THROWS_AS(one_light_off(constant_hdr(2, 2, 0), constant_hdr(2, 3, 0), Rgb::Ones()), std::invalid_argument);
}

TEST_CASE("augment_compose") {
    Rng rng(24);
    const HdrImage full = random_hdr(rng, 5, 5);
    const std::vector<HdrImage> layers = {random_hdr(rng, 5, 5), random_hdr(rng, 5, 5)};
    CHECK((augment_compose(full, {}, {}).pixels() == full.pixels()).all());

    const std::vector<HdrImage> twice = {layers[0], layers[0]};
    const std::vector<Rgb> ones = {Rgb::Ones(), Rgb::Ones()};
    const std::vector<Rgb> two = {Rgb::Constant(2)};
    CHECK(max_abs_diff(augment_compose(full, twice, ones), augment_compose(full, std::span(layers).first(1), two)) <= 1e-6f);

    const std::vector<Rgb> extra = {Rgb(0.3f, 0.2f, 0.1f), Rgb(1.0f, 0.0f, 2.0f)};
    const LightStack stack(full, layers, {Rgb::Zero(), Rgb::Zero()});
    CHECK(max_abs_diff(augment_compose(full, layers, extra), remix(stack, RemixWeights{extra, Rgb::Ones()})) <= 1e-6f);
    CHECK_THROWS_AS(augment_compose(full, layers, std::span(extra).first(1)), std::invalid_argument);
}

TEST_CASE("nnls against brute-force enumeration of active sets") {
    Rng rng(25);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 12, n = int(rng.index(4)) + 1;
        Eigen::MatrixXd A(m, n);
        for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.uniform(-1, 1);
        Eigen::VectorXd b(m);
        for (int i = 0; i < m; ++i) b[i] = rng.uniform(-1, 1);
        const Eigen::VectorXd x = nnls(A, b);
        CHECK((x.array() >= 0.0).all());

        double best = (b).squaredNorm();
        for (int subset = 1; subset < (1 << n); ++subset) {
            std::vector<int> cols;
            for (int j = 0; j < n; ++j)
                if (subset & (1 << j)) cols.push_back(j);
            Eigen::MatrixXd sub(m, Eigen::Index(cols.size()));
            for (std::size_t k = 0; k < cols.size(); ++k) sub.col(Eigen::Index(k)) = A.col(cols[k]);
            const Eigen::VectorXd s = sub.colPivHouseholderQr().solve(b);
            if ((s.array() < 0.0).any()) continue;
            best = std::min(best, (sub * s - b).squaredNorm());
        }
        CHECK((A * x - b).squaredNorm() <= best + 1e-9);
    }
}

TEST_CASE("solve_scales") {
    Rng rng(26);
    SUBCASE("round trip recovers known weights") {
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = rng.index(4) + 1;
            const LightStack stack = random_stack(rng, 8, 8, n);
            const RemixWeights w = random_weights(rng, n);
            const HdrImage target = remix(stack, w);
            const auto sol = solve_scales(stack.ambient(), stack.layers(), target);
            CHECK_FALSE(sol.degenerate);
            for (std::size_t i = 0; i < n; ++i)
                for (int c = 0; c < 3; ++c) CHECK(sol.scales[i][c] == doctest::Approx(w.weights[i][c]).epsilon(1e-4).scale(1e-3));
            CHECK(((sol.residual <= 1e-6 * sol.target_norm)).all());
        }
    }
    SUBCASE("ambient-only target") {
        const LightStack stack = random_stack(rng, 8, 8, 2);
        const auto sol = solve_scales(stack.ambient(), stack.layers(), stack.ambient());
        for (int c = 0; c < 3; ++c) {
            CHECK(sol.ambient_gain[c] == doctest::Approx(1.0).epsilon(1e-5));
            CHECK(sol.scales[0][c] == doctest::Approx(0.0).epsilon(1e-5));
            CHECK(sol.scales[1][c] == doctest::Approx(0.0).epsilon(1e-5));
        }
    }
    SUBCASE("rank-deficient layers still reach the target") {
        const HdrImage amb = random_hdr(rng, 8, 8), layer = random_hdr(rng, 8, 8);
        const std::vector<HdrImage> layers = {layer, layer};
        const LightStack stack(amb, layers, {Rgb::Ones(), Rgb::Ones()});
        const HdrImage target = remix(stack, RemixWeights{{Rgb(1.0f, 0.5f, 2.0f), Rgb(0.5f, 0.5f, 0.0f)}, Rgb::Ones()});
        const auto sol = solve_scales(amb, layers, target);
        const HdrImage back = remix(LightStack(amb, layers, sol.scales), RemixWeights{sol.scales, sol.ambient_gain});
        CHECK(max_abs_diff(back, target) <= 1e-4f);
    }
    SUBCASE("degenerate input") {
        const std::vector<HdrImage> zeros = {constant_hdr(4, 4, 0)};
        const auto sol = solve_scales(constant_hdr(4, 4, 0), zeros, constant_hdr(4, 4, 1));
        CHECK(sol.degenerate);
        CHECK((sol.scales[0] == 0.0f).all());
        CHECK((sol.residual == sol.target_norm).all());
    }
}

namespace {

// Pixel center p is in the convex hull of the points iff it is a convex
// combination of at most three of them (Caratheodory in 2-D).
bool brute_in_hull(const std::vector<Eigen::Vector2d>& pts, const Eigen::Vector2d& p) {
    const double eps = 1e-9;
    for (const auto& a : pts)
        if ((a - p).norm() < eps) return true;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const Eigen::Vector2d d = pts[j] - pts[i];
            const Eigen::Vector2d e = p - pts[i];
            const double cr = d.x() * e.y() - d.y() * e.x();
            const double t = d.dot(e) / d.squaredNorm();
            if (std::abs(cr) < eps && t >= -eps && t <= 1 + eps) return true;
            for (std::size_t k = j + 1; k < pts.size(); ++k) {
                Eigen::Matrix2d M;
                M << pts[j] - pts[i], pts[k] - pts[i];
                if (std::abs(M.determinant()) < eps) continue;
                const Eigen::Vector2d uv = M.inverse() * e;
                if (uv.x() >= -eps && uv.y() >= -eps && uv.sum() <= 1 + eps) return true;
            }
        }
    return false;
}

std::vector<Eigen::Vector2d> set_pixels(const Mask& m) {
    std::vector<Eigen::Vector2d> pts;
    for (Eigen::Index y = 0; y < m.rows(); ++y)
        for (Eigen::Index x = 0; x < m.cols(); ++x)
            if (m(y, x)) pts.emplace_back(double(x), double(y));
    return pts;
}

}  // namespace

TEST_CASE("convex_hull_mask") {
    Mask one = Mask::Constant(5, 5, false);
    one(2, 3) = true;
    CHECK((convex_hull_mask(one) == one).all());

    Mask rect = Mask::Constant(8, 9, false);
    rect.block(2, 1, 3, 5).setConstant(true);
    CHECK((convex_hull_mask(rect) == rect).all());

    Mask diag = Mask::Constant(5, 5, false);
    diag(0, 0) = diag(4, 4) = true;
    const Mask hull = convex_hull_mask(diag);
    const auto pts = set_pixels(diag);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) CHECK(hull(y, x) == brute_in_hull(pts, Eigen::Vector2d(x, y)));
    CHECK(hull.count() == 5);

    CHECK_THROWS_AS(convex_hull_mask(Mask::Constant(3, 3, false)), std::invalid_argument);
}

TEST_CASE("convex_hull_mask matches the brute-force hull on random masks") {
    Rng rng(27);
    for (int trial = 0; trial < 40; ++trial) {
        const int w = int(rng.index(10)) + 3, h = int(rng.index(10)) + 3;
        Mask m = test::random_mask(rng, w, h, rng.uniform(0.02, 0.2));
        if (!m.any()) m(0, 0) = true;
        const Mask hull = convex_hull_mask(m);
        CHECK(is_subset(m, hull));
        const auto pts = set_pixels(m);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) CHECK(hull(y, x) == brute_in_hull(pts, Eigen::Vector2d(x, y)));

        // Convexity: sampled points on segments between set pixels are set.
        const auto hp = set_pixels(hull);
        for (int s = 0; s < 30; ++s) {
            const auto& a = hp[rng.index(hp.size())];
            const auto& b = hp[rng.index(hp.size())];
            for (int step = 0; step <= 8; ++step) {
                const Eigen::Vector2d p = a + (b - a) * (step / 8.0);
                const Eigen::Vector2d r = p.array().round();
                if ((p - r).norm() < 1e-12) CHECK(hull(Eigen::Index(r.y()), Eigen::Index(r.x())));
            }
        }
    }
}

TEST_CASE("dilate_small_mask") {
    Mask big = Mask::Constant(6, 6, false);
    big.block(0, 0, 3, 3).setConstant(true);
    CHECK((dilate_small_mask(big, 9, 1) == big).all());

    Mask one = Mask::Constant(7, 7, false);
    one(3, 3) = true;
    const Mask d = dilate_small_mask(one, 9, 1);
    CHECK(d.count() == 9);
    CHECK(d.block(2, 2, 3, 3).all());

    Mask two = Mask::Constant(20, 20, false);
    two(5, 5) = two(14, 12) = true;
    // Simulated by hand: each step grows every 1-px-radius blob; the blobs stay disjoint.
    Mask sim = two;
    int steps = 0;
    while (sim.count() < 25 && steps < 8) {
        Mask next = sim;
        for (int y = 0; y < 20; ++y)
            for (int x = 0; x < 20; ++x)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < 20 && xx >= 0 && xx < 20 && sim(yy, xx)) next(y, x) = true;
                    }
        sim = next;
        ++steps;
    }
    const Mask grown = dilate_small_mask(two, 25, 1);
    CHECK((grown == sim).all());
    CHECK(grown.count() >= 25);

    CHECK(dilate_small_mask(Mask::Constant(4, 4, false), 9, 1).count() == 0);
    CHECK(default_min_mask_area(512, 512) == 64);
    CHECK(default_min_mask_area(32, 32) == 1);
}

TEST_CASE("build_light_masks nesting") {
    Rng rng(28);
    for (int trial = 0; trial < 30; ++trial) {
        const Mask e = test::random_mask(rng, 16, 12, 0.01);
        const Mask f = test::random_mask(rng, 16, 12, 0.05);
        const auto m = build_light_masks(e, f, 20);
        CHECK(is_subset(m.emissive, m.fixture));
        CHECK(is_subset(m.fixture, m.hull));
        CHECK(m.empty == !e.any());
    }
}

TEST_CASE("stack manifest round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "luxmix_test_stack";
    fs::create_directories(dir);
    Rng rng(29);
    const LightStack stack(random_hdr(rng, 6, 4), {random_hdr(rng, 6, 4), random_hdr(rng, 6, 4)},
                           {Rgb(1, 2, 3), Rgb(0.5f, 0.5f, 0.5f)}, {{"lamp", 2700}, {"ceiling", 5000}});
    const std::vector<Mask> masks = {test::random_mask(rng, 6, 4, 0.3), test::random_mask(rng, 6, 4, 0.3)};
    save_stack(dir / "s.json", stack, {2.0, 0.01}, masks);
    ToneCurve curve;
    const LightStack back = load_stack(dir / "s.json", &curve);
    CHECK(curve.gamma == 2.0);
    CHECK(curve.offset == 0.01);
    REQUIRE(back.light_count() == 2);
    CHECK(back.info()[0].name == "lamp");
    CHECK(back.info()[1].temperature_k == 5000);
    CHECK((back.scales()[0] == Rgb(1, 2, 3)).all());
    CHECK((back.layers()[1].pixels() == stack.layers()[1].pixels()).all());
    CHECK((back.ambient().pixels() == stack.ambient().pixels()).all());
    const auto manifest = read_stack_manifest(dir / "s.json");
    REQUIRE(manifest.masks.size() == 2);
}
