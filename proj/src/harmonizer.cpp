#include "luxmix/harmonizer.hpp"

#include "luxmix/light_stack.hpp"
#include "luxmix/scene_oracle.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace luxmix {

using nlohmann::json;

double pose_distance(const Pose& a, const Pose& b, double w_rot) {
    return (a.translation() - b.translation()).norm() + w_rot * rotation_angle(a.linear(), b.linear());
}

void PoseGraph::validate() const {
    std::set<int> ids;
    for (const auto& f : frames)
        if (!ids.insert(f.id).second) throw std::invalid_argument("pose graph: duplicate frame id " + std::to_string(f.id));
    if (source_refs.empty()) throw std::invalid_argument("pose graph: no source references");
    std::set<int> refs;
    for (int r : source_refs) {
        if (!ids.count(r)) throw std::invalid_argument("pose graph: unknown source reference " + std::to_string(r));
        if (!refs.insert(r).second) throw std::invalid_argument("pose graph: duplicate source reference " + std::to_string(r));
    }
}

const Frame& PoseGraph::frame(int id) const {
    for (const auto& f : frames)
        if (f.id == id) return f;
    throw std::invalid_argument("pose graph: unknown frame " + std::to_string(id));
}

PassPlan plan_passes(const PoseGraph& graph, const PlanOptions& options) {
    graph.validate();
    const int budget = options.capacity - int(graph.source_refs.size());
    if (budget < (options.chain ? 2 : 1))
        throw std::invalid_argument("plan_passes: capacity " + std::to_string(options.capacity) + " leaves no room for targets");
    const std::set<int> sources(graph.source_refs.begin(), graph.source_refs.end());

    std::vector<const Frame*> processed;
    std::vector<const Frame*> pending;
    for (const auto& f : graph.frames) (sources.count(f.id) ? processed : pending).push_back(&f);

    struct Candidate {
        const Frame* frame;
        double distance;
        const Frame* nearest;
    };
    PassPlan plan;
    while (!pending.empty()) {
        std::vector<Candidate> ranked;
        for (const Frame* u : pending) {
            Candidate c{u, std::numeric_limits<double>::infinity(), nullptr};
            for (const Frame* p : processed) {
                const double d = pose_distance(u->pose, p->pose, options.w_rot);
                if (d < c.distance || (d == c.distance && c.nearest && p->id < c.nearest->id)) c = {u, d, p};
            }
            ranked.push_back(c);
        }
        std::sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
            return a.distance < b.distance || (a.distance == b.distance && a.frame->id < b.frame->id);
        });

        Pass pass;
        pass.references = graph.source_refs;
        for (const Candidate& c : ranked) {
            const bool chained = options.chain && !sources.count(c.nearest->id) && c.distance <= options.chain_max_distance &&
                                 std::find(pass.chain_refs.begin(), pass.chain_refs.end(), c.nearest->id) == pass.chain_refs.end();
            if (int(pass.targets.size() + pass.chain_refs.size()) + 1 + int(chained) > budget) break;
            if (chained) pass.chain_refs.push_back(c.nearest->id);
            pass.targets.push_back(c.frame->id);
            pass.distances.push_back(c.distance);
        }
        for (int id : pass.targets) {
            const auto it = std::find_if(pending.begin(), pending.end(), [id](const Frame* f) { return f->id == id; });
            processed.push_back(*it);
            pending.erase(it);
        }
        plan.passes.push_back(std::move(pass));
    }
    return plan;
}

void validate_plan(const PoseGraph& graph, const PassPlan& plan, int capacity) {
    graph.validate();
    const std::set<int> sources(graph.source_refs.begin(), graph.source_refs.end());
    std::set<int> done(sources);
    std::size_t targets = 0;
    for (std::size_t k = 0; k < plan.passes.size(); ++k) {
        const Pass& p = plan.passes[k];
        const std::string where = "plan pass " + std::to_string(k) + ": ";
        if (p.targets.empty()) throw std::invalid_argument(where + "no targets");
        if (p.distances.size() != p.targets.size()) throw std::invalid_argument(where + "one distance per target required");
        const std::set<int> refs(p.references.begin(), p.references.end());
        if (!std::includes(refs.begin(), refs.end(), sources.begin(), sources.end()))
            throw std::invalid_argument(where + "source references missing");
        if (p.targets.size() + p.references.size() + p.chain_refs.size() > std::size_t(capacity))
            throw std::invalid_argument(where + "over capacity");
        for (int r : p.references)
            if (!done.count(r)) throw std::invalid_argument(where + "reference " + std::to_string(r) + " not yet available");
        for (int c : p.chain_refs)
            if (!done.count(c)) throw std::invalid_argument(where + "chained frame " + std::to_string(c) + " not yet available");
        for (int t : p.targets) {
            graph.frame(t);
            if (!done.insert(t).second) throw std::invalid_argument(where + "frame " + std::to_string(t) + " scheduled twice");
        }
        targets += p.targets.size();
    }
    if (targets + sources.size() != graph.frames.size()) throw std::invalid_argument("plan: not every frame is scheduled");
}

std::string plan_to_json(const PassPlan& plan) {
    json passes = json::array();
    for (const Pass& p : plan.passes)
        passes.push_back({{"targets", p.targets}, {"references", p.references}, {"chain_refs", p.chain_refs}, {"distances", p.distances}});
    return json{{"format", "luxplan/1"}, {"passes", passes}}.dump(2);
}

PassPlan plan_from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.at("format") != "luxplan/1") throw std::invalid_argument("not a luxplan/1 document");
    PassPlan plan;
    for (const auto& p : j.at("passes"))
        plan.passes.push_back({p.at("targets").get<std::vector<int>>(), p.at("references").get<std::vector<int>>(),
                               p.at("chain_refs").get<std::vector<int>>(), p.at("distances").get<std::vector<double>>()});
    return plan;
}

void write_plan(const std::filesystem::path& path, const PassPlan& plan) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << plan_to_json(plan) << '\n';
}

std::vector<Decomposition> OraclePropagator::invoke(std::span<const ReferenceView>, std::span<const FrameView> targets) {
    std::vector<Decomposition> out;
    for (const auto& t : targets) {
        const LightStack stack = render_stack(*scene_, t.camera);
        Decomposition d{{stack.ambient()}, Mask::Ones(t.camera.height, t.camera.width)};
        d.layers.insert(d.layers.end(), stack.layers().begin(), stack.layers().end());
        out.push_back(std::move(d));
    }
    return out;
}

Decomposition reproject(std::span<const ReferenceView> references, const FrameView& target, double depth_tol, double w_rot) {
    if (references.empty()) throw std::invalid_argument("reproject: no references");
    const Camera& cam = target.camera;
    if (target.depth.rows() != cam.height || target.depth.cols() != cam.width)
        throw std::invalid_argument("reproject: target depth does not match its camera");
    const std::size_t layers = references.front().layers->layers.size();
    for (const auto& r : references) {
        if (r.layers->layers.size() != layers) throw std::invalid_argument("reproject: references disagree on the layer count");
        const Camera& rc = r.view->camera;
        if (r.view->depth.rows() != rc.height || r.view->depth.cols() != rc.width)
            throw std::invalid_argument("reproject: reference depth does not match its camera");
        for (const auto& l : r.layers->layers)
            if (l.width() != rc.width || l.height() != rc.height) throw std::invalid_argument("reproject: reference layer size mismatch");
    }
    std::vector<const ReferenceView*> order;
    for (const auto& r : references) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(), [&](const ReferenceView* a, const ReferenceView* b) {
        return pose_distance(a->view->camera.pose, cam.pose, w_rot) < pose_distance(b->view->camera.pose, cam.pose, w_rot);
    });

    Decomposition out{std::vector<HdrImage>(layers, HdrImage(cam.width, cam.height)), Mask::Zero(cam.height, cam.width)};
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const double d = target.depth(y, x);
            if (!(d > 0.0) || !std::isfinite(d)) continue;
            const Vec3 point = cam.position() + d * cam.pixel_direction(x, y);
            for (const ReferenceView* r : order) {
                const Camera& rc = r->view->camera;
                const auto px = rc.project(point);
                if (!px || !rc.in_bounds(*px)) continue;
                const double expected = (point - rc.position()).norm();
                const double fx = px->x() - 0.5, fy = px->y() - 0.5;
                const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
                const double ax = fx - x0, ay = fy - y0;
                double wsum = 0.0;
                std::array<std::pair<int, double>, 4> taps{};
                int used = 0;
                for (int j = 0; j < 2; ++j)
                    for (int i = 0; i < 2; ++i) {
                        const int sx = x0 + i, sy = y0 + j;
                        if (sx < 0 || sy < 0 || sx >= rc.width || sy >= rc.height) continue;
                        const double w = (i ? ax : 1.0 - ax) * (j ? ay : 1.0 - ay);
                        if (w <= 0.0 || std::abs(double(r->view->depth(sy, sx)) - expected) > depth_tol) continue;
                        taps[std::size_t(used++)] = {sy * rc.width + sx, w};
                        wsum += w;
                    }
                if (wsum < 1e-6) continue;
                for (std::size_t l = 0; l < layers; ++l) {
                    Eigen::Array3f v = Eigen::Array3f::Zero();
                    for (int t = 0; t < used; ++t)
                        v += float(taps[std::size_t(t)].second / wsum) * r->layers->layers[l].pixels().row(taps[std::size_t(t)].first).transpose();
                    out.layers[l].pixel(x, y) = v.transpose();
                }
                out.coverage(y, x) = true;
                break;
            }
        }
    return out;
}

std::vector<Decomposition> ReprojectPropagator::invoke(std::span<const ReferenceView> references, std::span<const FrameView> targets) {
    std::vector<Decomposition> out;
    for (const auto& t : targets) out.push_back(reproject(references, t, tol_, w_rot_));
    return out;
}

std::map<int, Decomposition> execute(const PoseGraph& graph, const PassPlan& plan, Propagator& propagator,
                                     const std::map<int, FrameView>& views, const std::map<int, Decomposition>& sources) {
    validate_plan(graph, plan, propagator.capacity());
    for (const auto& f : graph.frames)
        if (!views.count(f.id)) throw std::invalid_argument("execute: no view for frame " + std::to_string(f.id));
    std::map<int, Decomposition> result;
    for (int r : graph.source_refs) {
        const auto it = sources.find(r);
        if (it == sources.end()) throw std::invalid_argument("execute: no decomposition for source reference " + std::to_string(r));
        result.emplace(r, it->second);
    }
    for (std::size_t k = 0; k < plan.passes.size(); ++k) {
        const Pass& pass = plan.passes[k];
        std::vector<ReferenceView> refs;
        for (int id : pass.references) refs.push_back({&views.at(id), &result.at(id)});
        for (int id : pass.chain_refs) refs.push_back({&views.at(id), &result.at(id)});
        std::vector<FrameView> targets;
        for (int id : pass.targets) targets.push_back(views.at(id));
        std::vector<Decomposition> out;
        try {
            out = propagator.invoke(refs, targets);
        } catch (const std::exception& e) {
            throw std::runtime_error("execute: pass " + std::to_string(k) + " failed: " + e.what());
        }
        if (out.size() != targets.size())
            throw std::runtime_error("execute: pass " + std::to_string(k) + " returned the wrong number of views");
        for (std::size_t t = 0; t < out.size(); ++t) result.emplace(pass.targets[t], std::move(out[t]));
    }
    return result;
}

}  // namespace luxmix
