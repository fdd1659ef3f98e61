#pragma once

#include "luxmix/geometry.hpp"
#include "luxmix/image.hpp"

#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace luxmix {

struct BoxScene;

/// Translation distance plus w_rot (m/rad) times the geodesic rotation angle.
double pose_distance(const Pose& a, const Pose& b, double w_rot = 0.5);

struct Frame {
    int id = 0;
    Pose pose = Pose::Identity();
};

struct PoseGraph {
    std::vector<Frame> frames;
    /// Frames whose decomposition is given up front.
    std::vector<int> source_refs;

    /// Unique ids, nonempty source_refs, every source ref present.
    void validate() const;
    const Frame& frame(int id) const;
};

struct Pass {
    std::vector<int> targets;
    /// Always the source references.
    std::vector<int> references;
    /// Earlier outputs used as secondary references.
    std::vector<int> chain_refs;
    /// Min distance to the processed set at selection time, per target.
    std::vector<double> distances;
};

struct PassPlan {
    std::vector<Pass> passes;
};

struct PlanOptions {
    int capacity = 15;
    bool chain = true;
    double w_rot = 0.5;
    /// Chain only when the nearest processed frame is at most this far away.
    double chain_max_distance = std::numeric_limits<double>::infinity();
};

/// Greedy pass scheduling; ties go to the smaller frame id. Throws
/// std::invalid_argument when capacity cannot fit the references plus one
/// target (plus one chained frame when chaining).
PassPlan plan_passes(const PoseGraph& graph, const PlanOptions& options = {});

/// Throws std::invalid_argument on partition, capacity, anchoring or
/// ordering violations.
void validate_plan(const PoseGraph& graph, const PassPlan& plan, int capacity);

// "luxplan/1"
std::string plan_to_json(const PassPlan& plan);
PassPlan plan_from_json(const std::string& text);
void write_plan(const std::filesystem::path& path, const PassPlan& plan);

struct FrameView {
    int id = 0;
    Camera camera;
    /// Ray distance per pixel.
    ScalarRaster depth;
};

/// Per-light layers of one frame plus which pixels are known.
struct Decomposition {
    std::vector<HdrImage> layers;
    Mask coverage;
};

struct ReferenceView {
    const FrameView* view = nullptr;
    const Decomposition* layers = nullptr;
};

class Propagator {
public:
    virtual ~Propagator() = default;
    virtual int capacity() const = 0;
    virtual std::vector<Decomposition> invoke(std::span<const ReferenceView> references, std::span<const FrameView> targets) = 0;
};

/// Renders the true decomposition at each target pose; ignores references.
class OraclePropagator : public Propagator {
public:
    explicit OraclePropagator(const BoxScene& scene, int capacity = 15) : scene_(&scene), capacity_(capacity) {}
    int capacity() const override { return capacity_; }
    std::vector<Decomposition> invoke(std::span<const ReferenceView> references, std::span<const FrameView> targets) override;

private:
    const BoxScene* scene_;
    int capacity_;
};

/// Pulls each target pixel from the nearest reference (by pose distance)
/// that sees the same surface point within `depth_tol`; bilinear over
/// depth-consistent neighbors. Unfilled pixels are 0 with coverage false.
class ReprojectPropagator : public Propagator {
public:
    explicit ReprojectPropagator(double depth_tol, int capacity = 15, double w_rot = 0.5)
        : tol_(depth_tol), capacity_(capacity), w_rot_(w_rot) {}
    int capacity() const override { return capacity_; }
    std::vector<Decomposition> invoke(std::span<const ReferenceView> references, std::span<const FrameView> targets) override;

private:
    double tol_;
    int capacity_;
    double w_rot_;
};

/// Warps the reference layers into one target view.
Decomposition reproject(std::span<const ReferenceView> references, const FrameView& target, double depth_tol, double w_rot = 0.5);

/// Runs the passes in order. `views` must hold every frame; `sources` the
/// decompositions of the source references. Returns all decompositions by id.
std::map<int, Decomposition> execute(const PoseGraph& graph, const PassPlan& plan, Propagator& propagator,
                                     const std::map<int, FrameView>& views, const std::map<int, Decomposition>& sources);

}  // namespace luxmix
