#include "luxmix/relight.hpp"

#include "luxmix/metrics.hpp"
#include "luxmix/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace luxmix {

using nlohmann::json;

void FitConfig::validate() const {
    if (iters_stage1 < 0 || iters_joint < 0 || iters_frozen < 0) throw std::invalid_argument("fit: iteration counts must be nonnegative");
    if (!(lambda_dssim >= 0.0 && lambda_comp >= 0.0 && lambda_smooth >= 0.0))
        throw std::invalid_argument("fit: loss weights must be nonnegative");
    if (knn_k < 1 || smooth_every < 1) throw std::invalid_argument("fit: knn_k and smooth_every must be positive");
    if (!curve_init.valid()) throw std::invalid_argument("fit: invalid initial tone curve");
    for (double v : {lr.position, lr.position_final, lr.log_scale, lr.rotation, lr.opacity, lr.coeff, lr.weight, lr.gamma, lr.beta})
        if (!(v > 0.0 && std::isfinite(v))) throw std::invalid_argument("fit: learning rates must be positive");
}

// ---------------------------------------------------------------------------
// KNN

namespace {

struct Candidate {
    double d2;
    std::uint32_t j;
    bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && j < o.j); }
};

void require_knn(const PointRows& points, int k) {
    if (k < 1) throw std::invalid_argument("knn: k must be positive");
    if (points.rows() <= k) throw std::invalid_argument("knn: need more points than neighbors");
}

}  // namespace

KnnGraph knn_graph_brute(const PointRows& points, int k) {
    require_knn(points, k);
    const Eigen::Index n = points.rows();
    KnnGraph g{k, std::vector<std::uint32_t>(std::size_t(n) * std::size_t(k))};
    std::vector<Candidate> all;
    for (Eigen::Index i = 0; i < n; ++i) {
        all.clear();
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) all.push_back({(points.row(i) - points.row(j)).squaredNorm(), std::uint32_t(j)});
        std::partial_sort(all.begin(), all.begin() + k, all.end());
        for (int a = 0; a < k; ++a) g.neighbors[std::size_t(i) * k + a] = all[std::size_t(a)].j;
    }
    return g;
}

KnnGraph knn_graph(const PointRows& points, int k) {
    require_knn(points, k);
    const Eigen::Index n = points.rows();
    const Eigen::RowVector3d lo = points.colwise().minCoeff(), hi = points.colwise().maxCoeff();
    const Eigen::RowVector3d extent = (hi - lo).cwiseMax(1e-9);
    // About two points per occupied cell for surface-like and volume-like sets.
    double h = std::max({extent.maxCoeff() / 1024.0, std::cbrt(extent.prod() * 2.0 / double(n)), 1e-9});
    std::array<long long, 3> dims{};
    for (;;) {
        for (int a = 0; a < 3; ++a) dims[std::size_t(a)] = std::max(1LL, (long long)std::ceil(extent[a] / h));
        if (dims[0] * dims[1] * dims[2] <= 4 * (long long)n + 64) break;
        h *= 1.5;
    }
    auto cell_of = [&](Eigen::Index i) {
        std::array<long long, 3> c{};
        for (int a = 0; a < 3; ++a)
            c[std::size_t(a)] = std::clamp((long long)std::floor((points(i, a) - lo[a]) / h), 0LL, dims[std::size_t(a)] - 1);
        return c;
    };
    auto flat = [&](long long x, long long y, long long z) { return std::size_t((z * dims[1] + y) * dims[0] + x); };
    const std::size_t cells = std::size_t(dims[0] * dims[1] * dims[2]);
    std::vector<std::uint32_t> offsets(cells + 1, 0), items(static_cast<std::size_t>(n));
    std::vector<std::size_t> cell_index(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto c = cell_of(i);
        cell_index[std::size_t(i)] = flat(c[0], c[1], c[2]);
        ++offsets[cell_index[std::size_t(i)] + 1];
    }
    for (std::size_t c = 0; c < cells; ++c) offsets[c + 1] += offsets[c];
    {
        std::vector<std::uint32_t> fill(offsets.begin(), offsets.end() - 1);
        for (Eigen::Index i = 0; i < n; ++i) items[fill[cell_index[std::size_t(i)]]++] = std::uint32_t(i);
    }

    KnnGraph g{k, std::vector<std::uint32_t>(std::size_t(n) * std::size_t(k))};
    std::vector<Candidate> heap;
    const long long max_ring = std::max({dims[0], dims[1], dims[2]});
    for (Eigen::Index i = 0; i < n; ++i) {
        heap.clear();
        const auto c = cell_of(i);
        auto visit = [&](long long x, long long y, long long z) {
            if (x < 0 || y < 0 || z < 0 || x >= dims[0] || y >= dims[1] || z >= dims[2]) return;
            const std::size_t cell = flat(x, y, z);
            for (std::uint32_t s = offsets[cell]; s < offsets[cell + 1]; ++s) {
                const std::uint32_t j = items[s];
                if (j == std::uint32_t(i)) continue;
                const Candidate cand{(points.row(i) - points.row(j)).squaredNorm(), j};
                if (heap.size() < std::size_t(k)) {
                    heap.push_back(cand);
                    std::push_heap(heap.begin(), heap.end());
                } else if (cand < heap.front()) {
                    std::pop_heap(heap.begin(), heap.end());
                    heap.back() = cand;
                    std::push_heap(heap.begin(), heap.end());
                }
            }
        };
        for (long long r = 0; r <= max_ring; ++r) {
            for (long long dz = -r; dz <= r; ++dz)
                for (long long dy = -r; dy <= r; ++dy) {
                    const bool face = std::abs(dz) == r || std::abs(dy) == r;
                    for (long long dx = -r; dx <= r; dx += face ? 1 : 2 * std::max(r, 1LL))
                        visit(c[0] + dx, c[1] + dy, c[2] + dz);
                }
            // Anything beyond ring r is at least r cells away.
            const double bound = double(r) * h;
            if (heap.size() == std::size_t(k) && heap.front().d2 < bound * bound) break;
        }
        std::sort_heap(heap.begin(), heap.end());
        for (int a = 0; a < k; ++a) g.neighbors[std::size_t(i) * k + a] = heap[std::size_t(a)].j;
    }
    return g;
}

template <typename Scalar>
Scalar smooth_loss(const RowMatrix<Scalar>& coeffs, const KnnGraph& graph, RowMatrix<Scalar>* grad) {
    const Eigen::Index n = coeffs.rows();
    if (std::size_t(n) != graph.size()) throw std::invalid_argument("smooth_loss: graph and coefficients disagree on the count");
    if (grad && (grad->rows() != n || grad->cols() != coeffs.cols())) throw std::invalid_argument("smooth_loss: gradient shape mismatch");
    const Scalar scale = Scalar(1) / (Scalar(n) * Scalar(graph.k));
    Scalar total = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (std::uint32_t j : graph.of(std::size_t(i))) {
            const auto diff = (coeffs.row(i) - coeffs.row(j)).eval();
            total += diff.squaredNorm();
            if (grad) {
                grad->row(i) += Scalar(2) * scale * diff;
                grad->row(j) -= Scalar(2) * scale * diff;
            }
        }
    return total * scale;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

template <typename Scalar>
Plane luminance_of(const RowMatrix<Scalar>& rgb, int w, int h) {
    Plane p(h, w);
    for (Eigen::Index i = 0; i < rgb.rows(); ++i)
        p.data()[i] = 0.2126 * double(rgb(i, 0)) + 0.7152 * double(rgb(i, 1)) + 0.0722 * double(rgb(i, 2));
    return p;
}

// Mean L1 plus lambda (1 - SSIM_lum) / 2 of a P x 3 prediction. Adds
// scale * dL/dpred into d_pred.
template <typename Scalar, typename Target>
double photometric(const RowMatrix<Scalar>& pred, const Target& target, int w, int h, double lambda, double scale,
                   RowMatrix<Scalar>* d_pred) {
    const Eigen::Index count = pred.rows() * 3;
    const RowMatrix<Scalar> tgt = target.template cast<Scalar>().matrix();
    const RowMatrix<Scalar> diff = pred - tgt;
    const double l1 = double(diff.cwiseAbs().sum()) / double(count);
    double dssim = 0.0;
    if (lambda > 0.0) {
        Plane g_lum;
        const Plane lp = luminance_of(pred, w, h);
        const Plane lt = luminance_of(tgt, w, h);
        const double s = d_pred ? ssim_plane_grad(lp, lt, g_lum) : ssim_plane(lp, lt);
        dssim = 0.5 * (1.0 - s);
        if (d_pred) {
            const double k = -0.5 * lambda * scale;
            for (Eigen::Index i = 0; i < pred.rows(); ++i) {
                const double gl = k * g_lum.data()[i];
                (*d_pred)(i, 0) += Scalar(0.2126 * gl);
                (*d_pred)(i, 1) += Scalar(0.7152 * gl);
                (*d_pred)(i, 2) += Scalar(0.0722 * gl);
            }
        }
    }
    if (d_pred) {
        const Scalar k = Scalar(scale / double(count));
        *d_pred += diff.unaryExpr([k](Scalar v) { return v > 0 ? k : (v < 0 ? -k : Scalar(0)); });
    }
    return l1 + lambda * dssim;
}

template <typename Scalar>
RowMatrix<Scalar> softplus_rows(const RowMatrix<Scalar>& raw) {
    return raw.unaryExpr([](Scalar x) { return softplus(x); });
}

template <typename Scalar>
RowMatrix<Scalar> softplus_slope(const RowMatrix<Scalar>& raw) {
    return raw.unaryExpr([](Scalar x) { return sigmoid(x); });
}

void require_views(std::span<const TrainView> views, int lights, bool need_targets) {
    if (views.empty()) throw std::invalid_argument("fit: no training views");
    for (const auto& v : views) {
        if (v.camera.kind != CameraKind::Perspective) throw std::invalid_argument("fit: training cameras must be perspective");
        if (v.original.width() != v.camera.width || v.original.height() != v.camera.height)
            throw std::invalid_argument("fit: original view size does not match its camera");
        if (!need_targets) continue;
        if (int(v.targets.size()) != lights) throw std::invalid_argument("fit: per-light target count does not match the cloud");
        for (const auto& t : v.targets)
            if (!t.same_shape(v.original)) throw std::invalid_argument("fit: target size does not match its view");
    }
}

}  // namespace

template <typename Scalar>
LossReport objective(const FitState<Scalar>& state, std::span<const TrainView> views, const ObjectiveTerms& terms,
                     FitGrad<Scalar>* grad, const RasterSettings<Scalar>& raster) {
    const auto& cloud = state.cloud;
    const int m = cloud.lights();
    require_views(views, m, true);
    if (state.weights.rows() != m || state.weights.cols() != 3) throw std::invalid_argument("objective: weights must be M x 3");
    const RowMatrix<Scalar> coeffs = softplus_rows(cloud.coeffs);
    const double gamma = double(state.gamma), beta = double(state.beta);
    const double view_scale = 1.0 / double(views.size());

    LossReport rep;
    CloudGrad<Scalar> scratch = grad && !terms.geometry ? CloudGrad<Scalar>(cloud) : CloudGrad<Scalar>(GaussianCloud<Scalar>(0, m));
    RowMatrix<Scalar> d_coeffs;
    if (grad) d_coeffs = RowMatrix<Scalar>::Zero(cloud.size(), 3 * m);

    for (const TrainView& view : views) {
        const int w = view.camera.width, h = view.camera.height;
        const Eigen::Index pixels = Eigen::Index(w) * h;
        const auto fwd = rasterize(cloud, view.camera, coeffs, raster);
        RowMatrix<Scalar> d_image;
        if (grad) d_image = RowMatrix<Scalar>::Zero(pixels, 3 * m);

        for (int l = 0; l < m; ++l) {
            const RowMatrix<Scalar> pred = fwd.image.middleCols(3 * l, 3);
            RowMatrix<Scalar> d_pred;
            if (grad) d_pred = RowMatrix<Scalar>::Zero(pixels, 3);
            rep.l_olat += view_scale / m *
                          photometric(pred, view.targets[std::size_t(l)].pixels(), w, h, terms.lambda_dssim, view_scale / m,
                                      grad ? &d_pred : nullptr);
            if (grad) d_image.middleCols(3 * l, 3) += d_pred;
        }

        if (terms.comp) {
            const auto& ori = view.original.pixels();
            const double k = view_scale / double(pixels * 3);
            double sum = 0.0;
            for (Eigen::Index p = 0; p < pixels; ++p)
                for (int c = 0; c < 3; ++c) {
                    double comp = 0.0;
                    for (int l = 0; l < m; ++l) comp += double(state.weights(l, c)) * double(fwd.image(p, 3 * l + c));
                    const double base = std::max(comp + beta, 0.0);
                    const double raw = std::pow(base, 1.0 / gamma);
                    const double t = std::min(raw, 1.0);
                    const double diff = t - double(ori(p, c));
                    sum += std::abs(diff);
                    if (!grad || diff == 0.0 || raw >= 1.0 || base < 1e-8) continue;
                    const double d_t = terms.lambda_comp * k * (diff > 0 ? 1.0 : -1.0);
                    const double d_x = d_t * raw / (gamma * base);
                    grad->gamma += Scalar(-d_t * raw * std::log(base) / (gamma * gamma));
                    grad->beta += Scalar(d_x);
                    for (int l = 0; l < m; ++l) {
                        d_image(p, 3 * l + c) += Scalar(d_x * double(state.weights(l, c)));
                        grad->weights(l, c) += Scalar(d_x * double(fwd.image(p, 3 * l + c)));
                    }
                }
            rep.l_comp += sum * view_scale / double(pixels * 3);
        }

        if (grad) {
            RowMatrix<Scalar> d_colors = RowMatrix<Scalar>::Zero(cloud.size(), 3 * m);
            rasterize_backward(cloud, view.camera, coeffs, fwd, d_image, terms.geometry ? grad->cloud : scratch, d_colors, raster);
            d_coeffs += d_colors;
        }
    }

    if (terms.knn) {
        RowMatrix<Scalar> d_smooth;
        if (grad) d_smooth = RowMatrix<Scalar>::Zero(cloud.size(), 3 * m);
        rep.l_smooth = double(smooth_loss(coeffs, *terms.knn, grad ? &d_smooth : nullptr));
        if (grad) d_coeffs += Scalar(terms.lambda_smooth) * d_smooth;
    }
    if (grad) grad->cloud.coeffs += d_coeffs.cwiseProduct(softplus_slope(cloud.coeffs));
    rep.total = rep.l_olat + terms.lambda_comp * rep.l_comp + terms.lambda_smooth * rep.l_smooth;
    return rep;
}

template <typename Scalar>
double stage1_objective(const GaussianCloud<Scalar>& cloud, std::span<const TrainView> views, double lambda_dssim,
                        CloudGrad<Scalar>* grad, const RasterSettings<Scalar>& raster) {
    require_views(views, 0, false);
    const RowMatrix<Scalar> colors = softplus_rows(RowMatrix<Scalar>(cloud.coeffs.leftCols(3)));
    const double view_scale = 1.0 / double(views.size());
    double total = 0.0;
    for (const TrainView& view : views) {
        const int w = view.camera.width, h = view.camera.height;
        const auto fwd = rasterize(cloud, view.camera, colors, raster);
        RowMatrix<Scalar> d_image;
        if (grad) d_image = RowMatrix<Scalar>::Zero(fwd.image.rows(), 3);
        total += view_scale * photometric(fwd.image, view.original.pixels(), w, h, lambda_dssim, view_scale, grad ? &d_image : nullptr);
        if (grad) {
            RowMatrix<Scalar> d_colors = RowMatrix<Scalar>::Zero(cloud.size(), 3);
            rasterize_backward(cloud, view.camera, colors, fwd, d_image, *grad, d_colors, raster);
            grad->coeffs.leftCols(3) += d_colors.cwiseProduct(softplus_slope(RowMatrix<Scalar>(cloud.coeffs.leftCols(3))));
        }
    }
    return total;
}

double loss_olat(const GaussianCloud<float>& cloud, std::span<const TrainView> views, double lambda_dssim) {
    FitState<float> s{cloud, RowMatrix<float>::Ones(cloud.lights(), 3), 2.2f, 0.0f};
    ObjectiveTerms t;
    t.lambda_dssim = lambda_dssim;
    t.comp = false;
    return objective(s, views, t).l_olat;
}

double loss_comp(const GaussianCloud<float>& cloud, std::span<const TrainView> views, const RowMatrix<float>& weights,
                 const ToneCurve& curve) {
    if (!curve.valid()) throw std::invalid_argument("loss_comp: invalid tone curve");
    FitState<float> s{cloud, weights, float(curve.gamma), float(curve.offset)};
    ObjectiveTerms t;
    t.lambda_dssim = 0.0;
    return objective(s, views, t).l_comp;
}

double loss_smooth(const GaussianCloud<float>& cloud, int k) {
    return double(smooth_loss(softplus_rows(cloud.coeffs), knn_graph(cloud.positions.cast<double>(), k)));
}

// ---------------------------------------------------------------------------
// Initialization

std::vector<PointSample> unproject_depth(const ScalarRaster& depth, const Camera& cam, const LdrImage& colors, int stride) {
    if (depth.rows() != cam.height || depth.cols() != cam.width || colors.width() != cam.width || colors.height() != cam.height)
        throw std::invalid_argument("unproject_depth: depth, colors and camera sizes differ");
    if (stride < 1) throw std::invalid_argument("unproject_depth: stride must be positive");
    std::vector<PointSample> out;
    for (int y = 0; y < cam.height; y += stride)
        for (int x = 0; x < cam.width; x += stride) {
            const float d = depth(y, x);
            if (!(d > 0.0f) || !std::isfinite(d)) continue;
            out.push_back({cam.position() + double(d) * cam.pixel_direction(x, y), colors.pixel(x, y).transpose()});
        }
    return out;
}

GaussianCloud<float> init_cloud(std::span<const PointSample> points, const InitOptions& options) {
    if (points.size() < 4) throw std::invalid_argument("init_cloud: need at least four points");
    if (!(options.voxel > 0.0) || options.max_points < 4 || options.lights < 1 || !(options.opacity > 0.0 && options.opacity < 1.0))
        throw std::invalid_argument("init_cloud: invalid options");
    struct Acc {
        Vec3 pos = Vec3::Zero();
        Eigen::Array3d color = Eigen::Array3d::Zero();
        int count = 0;
        std::size_t first = 0;
    };
    std::vector<Acc> merged;
    for (double voxel = options.voxel;; voxel *= 1.15) {
        std::unordered_map<std::uint64_t, std::size_t> slot;
        merged.clear();
        for (std::size_t i = 0; i < points.size(); ++i) {
            const Vec3 c = (points[i].position / voxel).array().floor();
            const auto key = (std::uint64_t(std::int64_t(c.x()) & 0x1fffff) << 42) | (std::uint64_t(std::int64_t(c.y()) & 0x1fffff) << 21) |
                             std::uint64_t(std::int64_t(c.z()) & 0x1fffff);
            auto [it, fresh] = slot.try_emplace(key, merged.size());
            if (fresh) merged.push_back({Vec3::Zero(), Eigen::Array3d::Zero(), 0, i});
            Acc& a = merged[it->second];
            a.pos += points[i].position;
            a.color += points[i].color.cast<double>();
            ++a.count;
        }
        if (merged.size() <= options.max_points) break;
    }
    if (merged.size() < 4) throw std::invalid_argument("init_cloud: too few distinct voxels");

    const Eigen::Index n = Eigen::Index(merged.size());
    PointRows pos(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) pos.row(i) = (merged[std::size_t(i)].pos / merged[std::size_t(i)].count).transpose();
    const KnnGraph nn = knn_graph(pos, 3);

    GaussianCloud<float> cloud(n, options.lights);
    const float logit = float(std::log(options.opacity / (1.0 - options.opacity)));
    for (Eigen::Index i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::uint32_t j : nn.of(std::size_t(i))) mean += (pos.row(i) - pos.row(j)).norm();
        mean = std::max(mean / 3.0, 1e-4);
        cloud.positions.row(i) = pos.row(i).cast<float>();
        cloud.log_scales.row(i).setConstant(float(std::log(mean)));
        cloud.opacities[i] = logit;
        const Eigen::Array3d color = merged[std::size_t(i)].color / merged[std::size_t(i)].count;
        for (int c = 0; c < 3; ++c) cloud.coeffs(i, c) = float(inverse_softplus(std::max(color[c], 1e-4)));
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// Optimization

namespace {

/// Adam with bias correction over one dense parameter block.
template <typename Matrix>
struct Adam {
    Matrix m, v;
    long long t = 0;

    explicit Adam(const Matrix& like) : m(Matrix::Zero(like.rows(), like.cols())), v(Matrix::Zero(like.rows(), like.cols())) {}

    void step(Matrix& param, const Matrix& grad, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
        ++t;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
        const auto mh = m.array() / c1;
        const auto vh = v.array() / c2;
        param.array() -= lr * mh / (vh.sqrt() + eps);
    }
};

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Float parameters are updated through double moments so tiny steps are not lost.
template <typename Block>
struct AdamF {
    Adam<Mat> adam;
    explicit AdamF(const Block& like) : adam(Mat::Zero(like.rows(), like.cols())) {}
    void step(Block& param, const Block& grad, double lr) {
        Mat p = param.template cast<double>();
        adam.step(p, grad.template cast<double>(), lr);
        param = p.template cast<float>();
    }
};

double scene_extent(const GaussianCloud<float>& cloud) {
    if (cloud.size() == 0) return 1.0;
    return std::max(double((cloud.positions.colwise().maxCoeff() - cloud.positions.colwise().minCoeff()).norm()), 1e-3);
}

double decayed(double start, double end, int it, int total) {
    if (total <= 1) return start;
    return start * std::pow(end / start, double(it) / double(total - 1));
}

struct GeometryAdam {
    AdamF<GaussianCloud<float>::Points> positions, log_scales;
    AdamF<GaussianCloud<float>::Quats> rotations;
    AdamF<GaussianCloud<float>::Vector> opacities;
    explicit GeometryAdam(const GaussianCloud<float>& c)
        : positions(c.positions), log_scales(c.log_scales), rotations(c.rotations), opacities(c.opacities) {}

    void step(GaussianCloud<float>& c, const CloudGrad<float>& g, const LearningRates& lr, double position_lr) {
        positions.step(c.positions, g.positions, position_lr);
        log_scales.step(c.log_scales, g.log_scales, lr.log_scale);
        rotations.step(c.rotations, g.rotations, lr.rotation);
        opacities.step(c.opacities, g.opacities, lr.opacity);
    }
};

/// Cycles through the views in a fresh seeded order each epoch.
class ViewSchedule {
public:
    ViewSchedule(std::size_t count, std::uint64_t seed) : rng_(seed), order_(count) {}
    std::size_t next() {
        if (pos_ == 0) {
            std::iota(order_.begin(), order_.end(), std::size_t(0));
            for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
        }
        const std::size_t v = order_[pos_];
        pos_ = (pos_ + 1) % order_.size();
        return v;
    }

private:
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

}  // namespace

GaussianCloud<float> fit_stage1(GaussianCloud<float> cloud, std::span<const TrainView> views, const FitConfig& config,
                                std::vector<TelemetryRow>* telemetry) {
    config.validate();
    cloud.validate();
    if (views.size() < 2) throw std::invalid_argument("fit_stage1: at least two views required");
    require_views(views, 0, false);
    const double extent = scene_extent(cloud);
    GeometryAdam geo(cloud);
    AdamF<RowMatrix<float>> color(RowMatrix<float>(cloud.coeffs.leftCols(3)));
    ViewSchedule schedule(views.size(), config.seed);
    CloudGrad<float> grad(cloud);
    for (int it = 0; it < config.iters_stage1; ++it) {
        const std::size_t v = schedule.next();
        grad.set_zero();
        const double loss = stage1_objective(cloud, views.subspan(v, 1), config.lambda_dssim, &grad, config.raster);
        geo.step(cloud, grad, config.lr, extent * decayed(config.lr.position, config.lr.position_final, it, config.iters_stage1));
        RowMatrix<float> base = cloud.coeffs.leftCols(3);
        color.step(base, RowMatrix<float>(grad.coeffs.leftCols(3)), config.lr.coeff);
        cloud.coeffs.leftCols(3) = base;
        if (telemetry) telemetry->push_back({it, {loss, 0.0, 0.0, loss}});
    }
    return cloud;
}

FitState<float> stage2_initial_state(const GaussianCloud<float>& stage1, int lights, const FitConfig& config,
                                     std::span<const double> initial_scales) {
    if (lights < 1) throw std::invalid_argument("fit_stage2: at least one light slot required");
    if (!initial_scales.empty() && int(initial_scales.size()) != lights)
        throw std::invalid_argument("fit_stage2: one initial scale per light required");
    stage1.validate();
    FitState<float> s;
    s.cloud = GaussianCloud<float>(stage1.size(), lights);
    s.cloud.positions = stage1.positions;
    s.cloud.log_scales = stage1.log_scales;
    s.cloud.rotations = stage1.rotations;
    s.cloud.opacities = stage1.opacities;
    for (Eigen::Index i = 0; i < stage1.size(); ++i)
        for (int c = 0; c < 3; ++c) {
            const float base = softplus(stage1.coeffs(i, c));
            const float raw = inverse_softplus(std::max(base / float(lights), 1e-6f));
            for (int l = 0; l < lights; ++l) s.cloud.coeffs(i, 3 * l + c) = raw;
        }
    s.weights = RowMatrix<float>::Ones(lights, 3);
    for (std::size_t l = 0; l < initial_scales.size(); ++l) {
        if (!(initial_scales[l] >= 0.0) || !std::isfinite(initial_scales[l])) throw std::invalid_argument("fit_stage2: invalid initial scale");
        s.weights.row(Eigen::Index(l)).setConstant(float(initial_scales[l]));
    }
    s.gamma = float(config.curve_init.gamma);
    s.beta = float(config.curve_init.offset);
    return s;
}

RelightModel fit_stage2(const GaussianCloud<float>& stage1, std::span<const TrainView> views, const FitConfig& config,
                        std::span<const double> initial_scales, std::vector<TelemetryRow>* telemetry) {
    config.validate();
    if (views.empty() || views.front().targets.empty()) throw std::invalid_argument("fit_stage2: no per-light targets");
    const int lights = int(views.front().targets.size());
    require_views(views, lights, true);
    FitState<float> s = stage2_initial_state(stage1, lights, config, initial_scales);

    const double extent = scene_extent(s.cloud);
    GeometryAdam geo(s.cloud);
    AdamF<RowMatrix<float>> coeffs(s.cloud.coeffs), weights(s.weights);
    Adam<Mat> gamma(Mat::Zero(1, 1)), beta(Mat::Zero(1, 1));
    ViewSchedule schedule(views.size(), config.seed ^ 0x5eed2ULL);
    FitGrad<float> grad(s);
    KnnGraph knn;
    ObjectiveTerms terms;
    terms.lambda_dssim = config.lambda_dssim;
    terms.lambda_comp = config.lambda_comp;
    terms.lambda_smooth = config.lambda_smooth;

    const int total = config.iters_joint + config.iters_frozen;
    for (int it = 0; it < total; ++it) {
        const bool frozen = it >= config.iters_joint;
        terms.geometry = !frozen;
        terms.knn = nullptr;
        if (frozen && s.cloud.size() > config.knn_k) {
            if (knn.k == 0) knn = knn_graph(s.cloud.positions.cast<double>(), config.knn_k);
            if ((it - config.iters_joint + 1) % config.smooth_every == 0) terms.knn = &knn;
        }
        const std::size_t v = schedule.next();
        grad.cloud.set_zero();
        grad.weights.setZero();
        grad.gamma = grad.beta = 0.0f;
        const LossReport rep = objective(s, views.subspan(v, 1), terms, &grad, config.raster);

        if (!frozen)
            geo.step(s.cloud, grad.cloud, config.lr, extent * decayed(config.lr.position, config.lr.position_final, it, config.iters_joint));
        coeffs.step(s.cloud.coeffs, grad.cloud.coeffs, config.lr.coeff);
        weights.step(s.weights, grad.weights, config.lr.weight);
        s.weights = s.weights.cwiseMax(0.0f);
        Mat g(1, 1), b(1, 1);
        g(0, 0) = s.gamma;
        b(0, 0) = s.beta;
        gamma.step(g, Mat::Constant(1, 1, grad.gamma), config.lr.gamma);
        beta.step(b, Mat::Constant(1, 1, grad.beta), config.lr.beta);
        s.gamma = float(std::max(g(0, 0), 0.1));
        s.beta = float(std::max(b(0, 0), 0.0));
        if (telemetry) telemetry->push_back({it, rep});
    }

    RelightModel model;
    model.cloud = std::move(s.cloud);
    model.weights = s.weights;
    model.curve = {double(s.gamma), double(s.beta)};
    model.light_names.push_back("ambient");
    for (int l = 1; l < lights; ++l) model.light_names.push_back("light" + std::to_string(l));
    return model;
}

void write_telemetry_csv(const std::filesystem::path& path, std::span<const TelemetryRow> rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(9);
    out << "iteration,l_olat,l_comp,l_smooth,total\n";
    for (const auto& r : rows)
        out << r.iteration << ',' << r.loss.l_olat << ',' << r.loss.l_comp << ',' << r.loss.l_smooth << ',' << r.loss.total << '\n';
}

// ---------------------------------------------------------------------------
// Cloud files

namespace {

static_assert(std::endian::native == std::endian::little, "cloud files are written in host order");

constexpr char kCloudMagic[] = "luxgauss/1";
constexpr std::size_t kMagicSize = sizeof(kCloudMagic) - 1;

template <typename Derived>
void put(std::ofstream& out, const Eigen::DenseBase<Derived>& block) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m = block;
    out.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * sizeof(float)));
}

template <typename Derived>
void get(std::ifstream& in, Eigen::PlainObjectBase<Derived>& m) {
    in.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * sizeof(float)));
    if (!in) throw std::runtime_error("cloud file truncated");
}

}  // namespace

void write_model(const std::filesystem::path& path, const RelightModel& model) {
    const auto& c = model.cloud;
    c.validate();
    if (model.weights.rows() != c.lights() || model.weights.cols() != 3) throw std::invalid_argument("write_model: weights must be M x 3");
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out.write(kCloudMagic, kMagicSize);
        const std::uint32_t header[2] = {std::uint32_t(c.size()), std::uint32_t(c.lights())};
        out.write(reinterpret_cast<const char*>(header), sizeof(header));
        put(out, c.positions);
        put(out, c.log_scales);
        put(out, c.rotations);
        put(out, c.opacities);
        put(out, c.coeffs);
        if (!out) throw std::runtime_error("failed writing " + path.string());
    }
    json j;
    j["format"] = kCloudMagic;
    j["count"] = c.size();
    j["lights"] = c.lights();
    j["light_names"] = model.light_names;
    j["weights"] = json::array();
    for (Eigen::Index l = 0; l < model.weights.rows(); ++l)
        j["weights"].push_back({model.weights(l, 0), model.weights(l, 1), model.weights(l, 2)});
    j["gamma"] = model.curve.gamma;
    j["beta"] = model.curve.offset;
    std::ofstream side(path.string() + ".json");
    if (!side) throw std::runtime_error("cannot write sidecar for " + path.string());
    side << j.dump(2) << '\n';
}

RelightModel read_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[kMagicSize];
    in.read(magic, kMagicSize);
    if (!in || std::memcmp(magic, kCloudMagic, kMagicSize) != 0) throw std::runtime_error("not a luxgauss/1 cloud: " + path.string());
    std::uint32_t header[2];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || header[1] == 0) throw std::runtime_error("cloud header invalid");
    RelightModel model;
    auto& c = model.cloud;
    c = GaussianCloud<float>(Eigen::Index(header[0]), int(header[1]));
    get(in, c.positions);
    get(in, c.log_scales);
    get(in, c.rotations);
    get(in, c.opacities);
    get(in, c.coeffs);
    if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("cloud file has trailing bytes");
    c.validate();

    std::ifstream side(path.string() + ".json");
    if (!side) throw std::runtime_error("missing sidecar " + path.string() + ".json");
    const json j = json::parse(side);
    if (j.at("format") != kCloudMagic || j.at("count") != c.size() || j.at("lights") != c.lights())
        throw std::runtime_error("sidecar does not match cloud " + path.string());
    model.light_names = j.at("light_names").get<std::vector<std::string>>();
    const auto& w = j.at("weights");
    if (w.size() != std::size_t(c.lights())) throw std::runtime_error("sidecar weight count mismatch");
    model.weights = RowMatrix<float>(c.lights(), 3);
    for (int l = 0; l < c.lights(); ++l)
        for (int ch = 0; ch < 3; ++ch) model.weights(l, ch) = w.at(std::size_t(l)).at(std::size_t(ch)).get<float>();
    model.curve = {j.at("gamma").get<double>(), j.at("beta").get<double>()};
    if (!model.curve.valid()) throw std::runtime_error("sidecar tone curve invalid");
    return model;
}

#define LUXMIX_INSTANTIATE(S)                                                                                      \
    template S smooth_loss(const RowMatrix<S>&, const KnnGraph&, RowMatrix<S>*);                                   \
    template LossReport objective(const FitState<S>&, std::span<const TrainView>, const ObjectiveTerms&, FitGrad<S>*, \
                                  const RasterSettings<S>&);                                                      \
    template double stage1_objective(const GaussianCloud<S>&, std::span<const TrainView>, double, CloudGrad<S>*,     \
                                     const RasterSettings<S>&);

LUXMIX_INSTANTIATE(float)
LUXMIX_INSTANTIATE(double)

}  // namespace luxmix
