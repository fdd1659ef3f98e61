#include "luxmix/light_stack.hpp"

#include "luxmix/image_io.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace luxmix {

using nlohmann::json;

LightStack::LightStack(HdrImage ambient, std::vector<HdrImage> layers, std::vector<Rgb> scales,
                       std::vector<LightInfo> info)
    : ambient_(std::move(ambient)), layers_(std::move(layers)), scales_(std::move(scales)), info_(std::move(info)) {
    if (scales_.size() != layers_.size()) throw std::invalid_argument("LightStack: one scale per layer required");
    for (const auto& layer : layers_) require_same_shape(ambient_, layer, "LightStack");
    for (const auto& s : scales_) {
        if (!s.allFinite() || (s < 0.0f).any()) throw std::invalid_argument("LightStack: scales must be finite and >= 0");
    }
    if (info_.empty()) {
        for (std::size_t i = 0; i < layers_.size(); ++i) info_.push_back({"light" + std::to_string(i), 6600.0});
    }
    if (info_.size() != layers_.size()) throw std::invalid_argument("LightStack: one info entry per layer required");
}

HdrImage remix(const LightStack& stack, const RemixWeights& w) {
    if (w.weights.size() != stack.light_count()) throw std::invalid_argument("remix: weight count does not match light count");
    HdrImage out(stack.width(), stack.height());
    auto& p = out.pixels();
    p = stack.ambient().pixels().rowwise() * w.ambient_gain.transpose();
    for (std::size_t i = 0; i < stack.light_count(); ++i) {
        p += stack.layers()[i].pixels().rowwise() * w.weights[i].transpose();
    }
    return out;
}

LdrImage compose_input(const LightStack& stack, const ToneCurve& curve) {
    return tonemap_curve(remix(stack, RemixWeights::from_scales(stack)), curve);
}

HdrImage one_light_off(const HdrImage& full, const HdrImage& layer, const Rgb& c) {
    require_same_shape(full, layer, "one_light_off");
    HdrImage out(full.width(), full.height());
    out.pixels() = (full.pixels() - (layer.pixels().rowwise() * c.transpose())).max(0.0f);
    return out;
}

HdrImage augment_compose(const HdrImage& full, std::span<const HdrImage> layers, std::span<const Rgb> extra_scales) {
    if (layers.size() != extra_scales.size()) throw std::invalid_argument("augment_compose: one scale per layer required");
    HdrImage out = full;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        require_same_shape(full, layers[i], "augment_compose");
        out.pixels() += layers[i].pixels().rowwise() * extra_scales[i].transpose();
    }
    return out;
}

Eigen::VectorXd nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int max_iterations) {
    const Eigen::Index n = A.cols();
    if (max_iterations <= 0) max_iterations = int(3 * n + 10);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    std::vector<bool> passive(std::size_t(n), false);
    const double tol = 10.0 * std::numeric_limits<double>::epsilon() * A.cwiseAbs().colwise().sum().maxCoeff() *
                       double(std::max(A.rows(), n));

    auto solve_passive = [&](Eigen::VectorXd& s) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index j = 0; j < n; ++j)
            if (passive[std::size_t(j)]) idx.push_back(j);
        s.setZero(n);
        if (idx.empty()) return;
        Eigen::MatrixXd sub(A.rows(), Eigen::Index(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) sub.col(Eigen::Index(k)) = A.col(idx[k]);
        const Eigen::VectorXd sol = sub.completeOrthogonalDecomposition().solve(b);
        for (std::size_t k = 0; k < idx.size(); ++k) s[idx[k]] = sol[Eigen::Index(k)];
    };

    Eigen::VectorXd w = A.transpose() * (b - A * x);
    Eigen::VectorXd s(n);
    for (int outer = 0; outer < max_iterations; ++outer) {
        Eigen::Index best = -1;
        double best_w = tol;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!passive[std::size_t(j)] && w[j] > best_w) {
                best_w = w[j];
                best = j;
            }
        }
        if (best < 0) break;
        passive[std::size_t(best)] = true;
        solve_passive(s);
        for (int inner = 0; inner < max_iterations; ++inner) {
            bool feasible = true;
            double alpha = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j) {
                if (passive[std::size_t(j)] && s[j] <= 0.0) {
                    feasible = false;
                    alpha = std::min(alpha, x[j] / (x[j] - s[j]));
                }
            }
            if (feasible) break;
            x += alpha * (s - x);
            for (Eigen::Index j = 0; j < n; ++j) {
                if (passive[std::size_t(j)] && x[j] <= tol) {
                    passive[std::size_t(j)] = false;
                    x[j] = 0.0;
                }
            }
            solve_passive(s);
        }
        x = s;
        w = A.transpose() * (b - A * x);
    }
    return x.cwiseMax(0.0);
}

ScaleSolution solve_scales(const HdrImage& ambient, std::span<const HdrImage> layers, const HdrImage& target) {
    require_same_shape(ambient, target, "solve_scales");
    for (const auto& l : layers) require_same_shape(ambient, l, "solve_scales");
    if (target.pixel_count() == 0) throw std::invalid_argument("solve_scales: empty target");

    const Eigen::Index rows = target.pixel_count();
    const Eigen::Index cols = Eigen::Index(layers.size()) + 1;
    ScaleSolution sol;
    sol.scales.assign(layers.size(), Rgb::Zero());
    for (int c = 0; c < 3; ++c) {
        Eigen::MatrixXd A(rows, cols);
        A.col(0) = ambient.pixels().col(c).cast<double>();
        for (std::size_t i = 0; i < layers.size(); ++i) A.col(Eigen::Index(i) + 1) = layers[i].pixels().col(c).cast<double>();
        const Eigen::VectorXd b = target.pixels().col(c).cast<double>();
        sol.target_norm[c] = b.norm();
        if (A.cwiseAbs().maxCoeff() == 0.0) {
            sol.degenerate = true;
            sol.residual[c] = sol.target_norm[c];
            continue;
        }
        const Eigen::VectorXd x = nnls(A, b);
        sol.ambient_gain[c] = static_cast<float>(x[0]);
        for (std::size_t i = 0; i < layers.size(); ++i) sol.scales[i][c] = static_cast<float>(x[Eigen::Index(i) + 1]);
        sol.residual[c] = (A * x - b).norm();
    }
    return sol;
}

Mask convex_hull_mask(const Mask& fixture) {
    using Point = Eigen::Matrix<std::int64_t, 2, 1>;
    std::vector<Point> pts;
    for (Eigen::Index y = 0; y < fixture.rows(); ++y)
        for (Eigen::Index x = 0; x < fixture.cols(); ++x)
            if (fixture(y, x)) pts.emplace_back(x, y);
    if (pts.empty()) throw std::invalid_argument("convex_hull_mask: empty mask");

    // Andrew's monotone chain; collinear points dropped, counter-clockwise order.
    std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y()); });
    auto cross = [](const Point& o, const Point& a, const Point& b) {
        return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
    };
    std::vector<Point> hull;
    if (pts.size() < 3) {
        hull = pts;
        if (hull.size() == 2 && hull[0] == hull[1]) hull.pop_back();
    } else {
        hull.resize(2 * pts.size());
        std::size_t k = 0;
        for (const auto& p : pts) {
            while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
            hull[k++] = p;
        }
        for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
            while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
            hull[k++] = pts[i];
        }
        hull.resize(k - 1);
    }

    auto inside = [&](const Point& p) {
        if (hull.size() == 1) return p == hull[0];
        if (hull.size() == 2) {
            if (cross(hull[0], hull[1], p) != 0) return false;
            return p.x() >= std::min(hull[0].x(), hull[1].x()) && p.x() <= std::max(hull[0].x(), hull[1].x()) &&
                   p.y() >= std::min(hull[0].y(), hull[1].y()) && p.y() <= std::max(hull[0].y(), hull[1].y());
        }
        for (std::size_t i = 0; i < hull.size(); ++i) {
            if (cross(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
        }
        return true;
    };

    std::int64_t x0 = pts.front().x(), x1 = pts.back().x(), y0 = pts.front().y(), y1 = y0;
    for (const auto& p : pts) {
        y0 = std::min(y0, p.y());
        y1 = std::max(y1, p.y());
    }
    Mask out = Mask::Constant(fixture.rows(), fixture.cols(), false);
    for (std::int64_t y = y0; y <= y1; ++y)
        for (std::int64_t x = x0; x <= x1; ++x)
            if (inside(Point(x, y))) out(y, x) = true;
    return out;
}

namespace {

Mask dilate_once(const Mask& m, int radius) {
    Mask out = Mask::Constant(m.rows(), m.cols(), false);
    const Eigen::Index rows = m.rows(), cols = m.cols();
    for (Eigen::Index y = 0; y < rows; ++y) {
        for (Eigen::Index x = 0; x < cols; ++x) {
            if (!m(y, x)) continue;
            const Eigen::Index ya = std::max<Eigen::Index>(0, y - radius), yb = std::min(rows - 1, y + radius);
            const Eigen::Index xa = std::max<Eigen::Index>(0, x - radius), xb = std::min(cols - 1, x + radius);
            out.block(ya, xa, yb - ya + 1, xb - xa + 1).setConstant(true);
        }
    }
    return out;
}

}  // namespace

Mask dilate_small_mask(const Mask& emissive, Eigen::Index min_area, int radius, int max_iterations) {
    Mask out = emissive;
    if (radius <= 0 || out.count() == 0) return out;
    for (int it = 0; it < max_iterations && out.count() < min_area; ++it) out = dilate_once(out, radius);
    return out;
}

Eigen::Index default_min_mask_area(int width, int height) {
    const double area = 64.0 * double(width) * double(height) / (512.0 * 512.0);
    return std::max<Eigen::Index>(1, Eigen::Index(std::lround(area)));
}

bool is_subset(const Mask& inner, const Mask& outer) {
    if (inner.rows() != outer.rows() || inner.cols() != outer.cols()) return false;
    return !(inner && !outer).any();
}

LightMasks build_light_masks(const Mask& emissive, const Mask& fixture, Eigen::Index min_area, int radius) {
    if (emissive.rows() != fixture.rows() || emissive.cols() != fixture.cols())
        throw std::invalid_argument("build_light_masks: mask dimensions differ");
    LightMasks masks;
    masks.empty = emissive.count() == 0;
    masks.emissive = masks.empty ? emissive : dilate_small_mask(emissive, min_area, radius);
    masks.fixture = fixture || masks.emissive;
    masks.hull = masks.fixture.any() ? convex_hull_mask(masks.fixture)
                                     : Mask::Constant(fixture.rows(), fixture.cols(), false);
    if (!is_subset(masks.emissive, masks.fixture) || !is_subset(masks.fixture, masks.hull))
        throw std::logic_error("build_light_masks: mask nesting violated");
    return masks;
}

namespace {

json rgb_json(const Rgb& c) { return json::array({c[0], c[1], c[2]}); }

Rgb rgb_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::runtime_error("expected an RGB triple");
    return Rgb(j[0].get<float>(), j[1].get<float>(), j[2].get<float>());
}

}  // namespace

StackManifest read_stack_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const json doc = json::parse(in);
    if (doc.value("format", "") != "luxstack/1") throw std::runtime_error(path.string() + ": expected format luxstack/1");
    StackManifest m;
    m.ambient = doc.at("ambient").get<std::string>();
    for (const auto& light : doc.at("lights")) {
        m.layers.emplace_back(light.at("layer").get<std::string>());
        m.scales.push_back(rgb_from_json(light.at("scale")));
        m.info.push_back({light.value("name", "light" + std::to_string(m.info.size())), light.value("temperature", 6600.0)});
        m.masks.emplace_back(light.value("mask", ""));
    }
    if (doc.contains("tone_curve")) {
        m.curve.gamma = doc["tone_curve"].value("gamma", 2.2);
        m.curve.offset = doc["tone_curve"].value("offset", 0.0);
    }
    return m;
}

void write_stack_manifest(const std::filesystem::path& path, const StackManifest& m) {
    json doc;
    doc["format"] = "luxstack/1";
    doc["ambient"] = m.ambient.generic_string();
    doc["lights"] = json::array();
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        json light;
        light["name"] = i < m.info.size() ? m.info[i].name : "light" + std::to_string(i);
        light["temperature"] = i < m.info.size() ? m.info[i].temperature_k : 6600.0;
        light["layer"] = m.layers[i].generic_string();
        light["scale"] = rgb_json(m.scales[i]);
        if (i < m.masks.size() && !m.masks[i].empty()) light["mask"] = m.masks[i].generic_string();
        doc["lights"].push_back(light);
    }
    doc["tone_curve"] = {{"gamma", m.curve.gamma}, {"offset", m.curve.offset}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

LightStack load_stack(const std::filesystem::path& manifest_path, ToneCurve* curve) {
    const StackManifest m = read_stack_manifest(manifest_path);
    const auto dir = manifest_path.parent_path();
    HdrImage ambient = read_hdr(dir / m.ambient);
    std::vector<HdrImage> layers;
    for (const auto& p : m.layers) layers.push_back(read_hdr(dir / p));
    if (curve) *curve = m.curve;
    return LightStack(std::move(ambient), std::move(layers), m.scales, m.info);
}

void save_stack(const std::filesystem::path& manifest_path, const LightStack& stack, const ToneCurve& curve,
                std::span<const Mask> hull_masks) {
    const auto dir = manifest_path.parent_path();
    const auto stem = manifest_path.stem().string();
    StackManifest m;
    m.ambient = stem + "_ambient.lxhd";
    write_lxhd(dir / m.ambient, stack.ambient());
    for (std::size_t i = 0; i < stack.light_count(); ++i) {
        const std::string layer = stem + "_light" + std::to_string(i) + ".lxhd";
        write_lxhd(dir / layer, stack.layers()[i]);
        m.layers.emplace_back(layer);
        if (i < hull_masks.size()) {
            const std::string mask = stem + "_mask" + std::to_string(i) + ".png";
            write_mask_png(dir / mask, hull_masks[i]);
            m.masks.emplace_back(mask);
        }
    }
    m.scales = stack.scales();
    m.info = stack.info();
    m.curve = curve;
    write_stack_manifest(manifest_path, m);
}

}  // namespace luxmix
