#include "luxmix/metrics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace luxmix {

const Eigen::Array<double, kSsimWindow, 1>& ssim_kernel() {
    static const Eigen::Array<double, kSsimWindow, 1> k = [] {
        Eigen::Array<double, kSsimWindow, 1> g;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        }
        return Eigen::Array<double, kSsimWindow, 1>(g / g.sum());
    }();
    return k;
}

namespace {

/// Valid-mode separable Gaussian filter: output (h - 10) x (w - 10).
Plane filter_valid(const Plane& in) {
    const auto& g = ssim_kernel();
    const Eigen::Index oh = in.rows() - kSsimWindow + 1, ow = in.cols() - kSsimWindow + 1;
    Plane rows_done(in.rows(), ow);
    for (Eigen::Index y = 0; y < in.rows(); ++y)
        for (Eigen::Index x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) s += g[k] * in(y, x + k);
            rows_done(y, x) = s;
        }
    Plane out(oh, ow);
    for (Eigen::Index y = 0; y < oh; ++y)
        for (Eigen::Index x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) s += g[k] * rows_done(y + k, x);
            out(y, x) = s;
        }
    return out;
}

/// Adjoint of filter_valid: scatters a (h - 10) x (w - 10) map back to h x w.
Plane filter_valid_adjoint(const Plane& in, Eigen::Index h, Eigen::Index w) {
    const auto& g = ssim_kernel();
    Plane cols_done = Plane::Zero(h, in.cols());
    for (Eigen::Index y = 0; y < in.rows(); ++y)
        for (Eigen::Index x = 0; x < in.cols(); ++x)
            for (int k = 0; k < kSsimWindow; ++k) cols_done(y + k, x) += g[k] * in(y, x);
    Plane out = Plane::Zero(h, w);
    for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < in.cols(); ++x)
            for (int k = 0; k < kSsimWindow; ++k) out(y, x + k) += g[k] * cols_done(y, x);
    return out;
}

struct SsimTerms {
    Plane mu_a, mu_b, var_a, var_b, cov;
};

SsimTerms moments(const Plane& a, const Plane& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("ssim: plane dimensions differ");
    if (a.rows() < kSsimWindow || a.cols() < kSsimWindow) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    SsimTerms t;
    t.mu_a = filter_valid(a);
    t.mu_b = filter_valid(b);
    t.var_a = filter_valid(a * a) - t.mu_a.square();
    t.var_b = filter_valid(b * b) - t.mu_b.square();
    t.cov = filter_valid(a * b) - t.mu_a * t.mu_b;
    return t;
}

}  // namespace

double ssim_plane(const Plane& a, const Plane& b, double peak) {
    const SsimTerms t = moments(a, b);
    const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
    const Plane s = ((2.0 * t.mu_a * t.mu_b + c1) * (2.0 * t.cov + c2)) /
                    ((t.mu_a.square() + t.mu_b.square() + c1) * (t.var_a + t.var_b + c2));
    return s.mean();
}

double ssim_plane_grad(const Plane& a, const Plane& b, Plane& grad_a, double peak) {
    const SsimTerms t = moments(a, b);
    const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
    const Plane a1 = 2.0 * t.mu_a * t.mu_b + c1;
    const Plane a2 = 2.0 * t.cov + c2;
    const Plane b1 = t.mu_a.square() + t.mu_b.square() + c1;
    const Plane b2 = t.var_a + t.var_b + c2;
    const Plane s = (a1 * a2) / (b1 * b2);
    const double n = double(s.size());

    // Partials of S with respect to the local raw moments E[a], E[a^2], E[ab].
    const Plane d_mean = (2.0 * t.mu_b * a2 / (b1 * b2) - 2.0 * t.mu_a * s / b1 + 2.0 * t.mu_a * s / b2 -
                          2.0 * t.mu_b * a1 / (b1 * b2)) / n;
    const Plane d_sq = -s / b2 / n;
    const Plane d_cross = 2.0 * a1 / (b1 * b2) / n;

    grad_a = filter_valid_adjoint(d_mean, a.rows(), a.cols()) +
             2.0 * a * filter_valid_adjoint(d_sq, a.rows(), a.cols()) +
             b * filter_valid_adjoint(d_cross, a.rows(), a.cols());
    return s.mean();
}

void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "scene,view,light,psnr,ssim,scale_r,scale_g,scale_b\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.scene << ',' << r.view << ',' << r.light << ',' << r.result.psnr << ',' << r.result.ssim << ','
            << r.result.scales[0] << ',' << r.result.scales[1] << ',' << r.result.scales[2] << '\n';
    }
}

}  // namespace luxmix
