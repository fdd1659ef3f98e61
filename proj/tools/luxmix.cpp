#include <luxmix/harmonizer.hpp>
#include <luxmix/image_io.hpp>
#include <luxmix/light_stack.hpp>
#include <luxmix/metrics.hpp>
#include <luxmix/oracle_views.hpp>
#include <luxmix/relight.hpp>
#include <luxmix/rng.hpp>
#include <luxmix/scene_oracle.hpp>
#include <luxmix/service.hpp>
#include <luxmix/view_sampler.hpp>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace luxmix;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Malformed input; exits with status 2.
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& out, const std::string& text) {
    if (out == "-") {
        std::cout << text << '\n';
        return;
    }
    std::ofstream f(out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << text << '\n';
}

HdrImage read_linear(const fs::path& path) {
    const std::string ext = path.extension().string();
    if (ext == ".pfm") return read_pfm(path);
    if (ext == ".lxhd") return read_lxhd(path);
    if (ext == ".hdr") return read_hdr(path);
    if (ext == ".png") return read_png(path).reinterpret<LinearEncoding>();
    throw UsageError("unsupported image type: " + path.string());
}

void write_linear(const fs::path& path, const HdrImage& img) {
    const std::string ext = path.extension().string();
    if (ext == ".pfm") return write_pfm(path, img);
    if (ext == ".lxhd") return write_lxhd(path, img);
    if (ext == ".hdr") return write_hdr(path, img);
    throw UsageError("unsupported HDR output type: " + path.string());
}

Camera scene_camera(const BoxScene& scene, int index) {
    if (index < 0 || index >= int(scene.cameras.size()))
        throw UsageError("camera index " + std::to_string(index) + " out of range (scene has " + std::to_string(scene.cameras.size()) + ")");
    return scene.cameras[std::size_t(index)];
}

/// "r,g,b;r,g,b;..." or "s;s;..." rows, row 0 the ambient gain.
RowMatrix<float> parse_weights(const std::string& text) {
    std::vector<std::array<float, 3>> rows;
    std::stringstream all(text);
    std::string row;
    while (std::getline(all, row, ';')) {
        std::vector<float> v;
        std::stringstream rs(row);
        std::string item;
        while (std::getline(rs, item, ',')) {
            try {
                std::size_t used = 0;
                v.push_back(std::stof(item, &used));
                if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw UsageError("bad weight '" + item + "'");
            }
        }
        if (v.size() == 1) v = {v[0], v[0], v[0]};
        if (v.size() != 3) throw UsageError("each weight row needs 1 or 3 values: '" + row + "'");
        rows.push_back({v[0], v[1], v[2]});
    }
    RowMatrix<float> w(Eigen::Index(rows.size()), 3);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < 3; ++c) w(Eigen::Index(i), c) = rows[i][std::size_t(c)];
    return w;
}

// ---------------------------------------------------------------------------

struct GenScene {
    std::uint64_t seed = 0;
    int lights = 3;
    int width = 2048;
    int cameras = 4;
    std::string out = "-";
};

int gen_scene(const GenScene& o) {
    write_text(o.out, scene_to_json(generate_scene(o.seed, {o.lights, o.width, o.cameras})));
    return 0;
}

struct RenderOlat {
    std::string scene;
    std::string out_dir;
    int camera = 0;
    int width = 0;
    double fov = 0.0;
    double azimuth = 0.0, elevation = 0.0;
    double gamma = 2.2;
    std::uint64_t seed = 0;
};

int render_olat(const RenderOlat& o) {
    const BoxScene scene = read_scene(o.scene);
    Camera cam = scene_camera(scene, o.camera);
    if (o.fov > 0.0) {
        ViewRequest req{o.azimuth, o.elevation, o.fov, o.width > 0 ? o.width : 512, o.width > 0 ? o.width : 512};
        req.validate();
        cam = req.camera(cam);
    } else if (o.width > 0) {
        cam = Camera::equirect(o.width, o.width / 2, cam.pose);
    }
    const LightStack stack = render_stack(scene, cam);
    std::vector<Mask> hulls;
    for (std::size_t l : scene.controllable_lights()) hulls.push_back(render_light_masks(scene, l, cam).hull);
    fs::create_directories(o.out_dir);
    const ToneCurve curve{o.gamma, 0.0};
    save_stack(fs::path(o.out_dir) / "stack.json", stack, curve, hulls);
    write_png(fs::path(o.out_dir) / "input.png", compose_input(stack, curve));
    write_lxhd(fs::path(o.out_dir) / "depth.lxhd", [&] {
        const ScalarRaster d = render_depth(scene, cam);
        HdrImage img(cam.width, cam.height);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) img.pixel(x, y).setConstant(float(d(y, x)));
        return img;
    }());
    std::printf("%zu lights, %dx%d -> %s\n", stack.light_count(), cam.width, cam.height, o.out_dir.c_str());
    return 0;
}

struct DecomposeCheck {
    std::string scene;
    int width = 256;
    double tol = 1e-5;
    std::uint64_t seed = 0;
};

int decompose_check(const DecomposeCheck& o) {
    const BoxScene scene = read_scene(o.scene);
    double worst = 0.0;
    for (const Camera& pano : scene.cameras) {
        const Camera cam = Camera::equirect(o.width, o.width / 2, pano.pose);
        HdrImage sum = render_ambient(scene, cam);
        for (std::size_t l : scene.controllable_lights()) sum.pixels() += render_olat(scene, l, cam).pixels();
        worst = std::max(worst, double((render_full(scene, cam).pixels() - sum.pixels()).abs().maxCoeff()));
    }
    std::printf("max superposition residual %.3e over %zu cameras\n", worst, scene.cameras.size());
    return worst <= o.tol ? 0 : 1;
}

struct SampleViews {
    std::string scene;
    std::string out = "-";
    TrajectoryOptions options;
    int pano_width = 512;
    std::uint64_t seed = 0;
};

int sample_views(const SampleViews& o) {
    const BoxScene scene = read_scene(o.scene);
    std::vector<PanoSource> panos;
    for (const Camera& c : scene.cameras) {
        const Camera cam = Camera::equirect(o.pano_width, o.pano_width / 2, c.pose);
        Mask lights = Mask::Zero(cam.height, cam.width);
        for (std::size_t l : scene.controllable_lights()) lights = lights || render_light_masks(scene, l, cam).emissive;
        panos.push_back({render_depth(scene, cam), lights, cam});
    }
    const Trajectory t = sample_trajectory(panos, o.options, o.seed);
    write_text(o.out, trajectory_to_json(t));
    std::fprintf(stderr, "%zu views%s, coverage %.3f\n", t.views.size(), t.partial ? " (partial)" : "",
                 t.coverage.empty() ? 0.0 : t.coverage.back());
    return 0;
}

struct Fit {
    std::string scene;
    std::string out;
    bool stage2 = false;
    std::string telemetry;
    OracleViewOptions views;
    InitOptions init;
    FitConfig config;
    std::uint64_t seed = 0;
};

int fit(Fit o) {
    const BoxScene scene = read_scene(o.scene);
    o.views.seed = o.seed;
    o.config.seed = o.seed;
    o.config.validate();
    const OracleViews data = oracle_views(scene, o.views);
    o.init.lights = 1;
    const GaussianCloud<float> init = init_from_views(data, o.init);
    std::fprintf(stderr, "%td splats from %zu training views\n", init.size(), data.train.size());
    std::vector<TelemetryRow> tel;
    GaussianCloud<float> cloud = fit_stage1(init, data.train, o.config, &tel);
    RelightModel model;
    if (o.stage2) {
        std::vector<TelemetryRow> tel2;
        model = fit_stage2(cloud, data.train, o.config, {}, &tel2);
        // Stage-2 rows follow stage 1 in one iteration sequence.
        for (auto& r : tel2) r.iteration += o.config.iters_stage1;
        tel.insert(tel.end(), tel2.begin(), tel2.end());
    } else {
        model.cloud = std::move(cloud);
        model.weights = RowMatrix<float>::Ones(1, 3);
        model.curve = o.views.curve;
        model.light_names = {"ambient"};
    }
    write_model(o.out, model);
    if (!o.telemetry.empty()) write_telemetry_csv(o.telemetry, tel);
    std::fprintf(stderr, "wrote %s (%td splats, %d lights)\n", o.out.c_str(), model.cloud.size(), model.cloud.lights());
    return 0;
}

struct Remix {
    std::string input;
    std::string out;
    std::string weights;
    std::string camera;
    std::string display = "curve";
    std::uint64_t seed = 0;
};

int remix_cmd(const Remix& o) {
    RenderService service;
    LoadRequest load;
    load.path = o.input;
    load.kind = fs::path(o.input).extension() == ".json" ? SessionKind::Stack : SessionKind::Cloud;
    load.display = parse_display(o.display);
    if (!o.camera.empty()) {
        if (load.kind == SessionKind::Stack) throw UsageError("--camera applies to cloud models only");
        load.camera = camera_from_json(json::parse(o.camera), Camera::perspective(60.0, 512, 512, Pose::Identity()));
    }
    const std::string id = service.load(load);
    RenderRequest req;
    if (!o.weights.empty()) req.weights = parse_weights(o.weights);
    const fs::path out(o.out);
    req.hdr = out.extension() != ".png";
    const RenderOutput r = service.render(id, req);
    if (req.hdr)
        write_linear(out, decode_lxhd(r.bytes));
    else {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + o.out);
        f.write(reinterpret_cast<const char*>(r.bytes.data()), std::streamsize(r.bytes.size()));
    }
    std::fprintf(stderr, "rendered in %.1f ms\n", r.milliseconds);
    return 0;
}

struct Plan {
    std::string graph;
    int random_frames = 0;
    int random_refs = 1;
    std::string out = "-";
    PlanOptions options;
    std::uint64_t seed = 0;
};

// {"frames": [{"id", "position": [x, y, z], "azimuth", "elevation"}], "source_refs": [...]}
PoseGraph graph_from_json(const json& j) {
    PoseGraph g;
    for (const auto& f : j.at("frames")) {
        const auto p = f.at("position").get<std::vector<double>>();
        if (p.size() != 3) throw UsageError("frame position needs three entries");
        g.frames.push_back({f.at("id").get<int>(),
                            make_pose(rotation_from_view(f.value("azimuth", 0.0), f.value("elevation", 0.0)), Vec3(p[0], p[1], p[2]))});
    }
    g.source_refs = j.at("source_refs").get<std::vector<int>>();
    return g;
}

int plan_cmd(const Plan& o) {
    PoseGraph g;
    if (!o.graph.empty()) {
        g = graph_from_json(json::parse(slurp(o.graph)));
    } else {
        if (o.random_frames <= o.random_refs || o.random_refs < 1) throw UsageError("--random needs more frames than --refs");
        Rng rng(o.seed);
        for (int i = 0; i < o.random_frames; ++i)
            g.frames.push_back({i, make_pose(rotation_from_view(rng.uniform(-3.1, 3.1), rng.uniform(-0.4, 0.4)),
                                             Vec3(rng.uniform(0, 4), rng.uniform(0, 4), 1.5))});
        for (int r = 0; r < o.random_refs; ++r) g.source_refs.push_back(r);
    }
    const PassPlan plan = plan_passes(g, o.options);
    validate_plan(g, plan, o.options.capacity);
    write_text(o.out, plan_to_json(plan));
    std::fprintf(stderr, "%zu frames in %zu passes\n", g.frames.size(), plan.passes.size());
    return 0;
}

struct Eval {
    std::string pred, gt;
    std::string model, scene;
    std::string csv;
    OracleViewOptions views;
    std::uint64_t seed = 0;
};

int eval_cmd(Eval o) {
    std::vector<EvalRow> rows;
    if (!o.pred.empty()) {
        if (o.gt.empty()) throw UsageError("--pred needs --gt");
        const HdrImage pred = read_linear(o.pred), gt = read_linear(o.gt);
        rows.push_back({"", fs::path(o.pred).filename().string(), "", evaluate(pred, gt)});
    } else {
        if (o.model.empty() || o.scene.empty()) throw UsageError("give --pred/--gt or --model/--scene");
        const RelightModel model = read_model(o.model);
        o.views.seed = o.seed;
        const OracleViews data = oracle_views(read_scene(o.scene), o.views);
        if (int(data.light_names.size()) != model.cloud.lights())
            throw UsageError("model has " + std::to_string(model.cloud.lights()) + " light slots, scene has " +
                             std::to_string(data.light_names.size()));
        const ToneCurve display{2.2, 0.0};
        for (std::size_t v = 0; v < data.held_out.size(); ++v) {
            const TrainView& view = data.held_out[v];
            for (int m = 0; m < model.cloud.lights(); ++m) {
                const auto r = channel_rescale(render_light(model.cloud, view.camera, m), view.targets[std::size_t(m)]);
                const EvalResult e = evaluate(tonemap_curve(r.image, display), tonemap_curve(view.targets[std::size_t(m)], display));
                rows.push_back({o.scene, "held" + std::to_string(v), data.light_names[std::size_t(m)], {e.psnr, e.psnr_capped, e.ssim, r.scales.cast<double>()}});
            }
            const LdrImage comp = tonemap_curve(render_remix(model.cloud, view.camera, model.weights), model.curve);
            const auto p = psnr(comp, view.original);
            rows.push_back({o.scene, "held" + std::to_string(v), "composite", {p.db, p.capped, ssim(comp, view.original), Eigen::Array3d::Ones()}});
        }
    }
    for (const auto& r : rows)
        std::printf("%-8s %-10s psnr %7.3f ssim %.5f\n", r.view.c_str(), r.light.c_str(), r.result.psnr, r.result.ssim);
    if (!o.csv.empty()) write_eval_csv(o.csv, rows);
    return 0;
}

struct Serve {
    std::string host = "127.0.0.1";
    int port = 0;
    std::string ui = "webui/dist";
    std::vector<std::string> preload;
    std::uint64_t seed = 0;
};

httplib::Server* g_server = nullptr;

int serve(const Serve& o) {
    int port = o.port;
    if (port == 0) {
        const char* env = std::getenv("LUXMIX_PORT");
        if (env) {
            try {
                port = std::stoi(env);
            } catch (const std::exception&) {
                throw UsageError(std::string("LUXMIX_PORT is not a number: ") + env);
            }
        } else {
            port = 8080;
        }
    }
    if (port < 1 || port > 65535) throw UsageError("port out of range: " + std::to_string(port));
    RenderService service;
    for (const auto& p : o.preload) {
        LoadRequest req;
        req.path = p;
        req.kind = fs::path(p).extension() == ".json" ? SessionKind::Stack : SessionKind::Cloud;
        std::fprintf(stderr, "loaded %s as session %s\n", p.c_str(), service.load(req).c_str());
    }
    httplib::Server server;
    install_routes(server, service, o.ui);
    g_server = &server;
    std::signal(SIGINT, [](int) { g_server->stop(); });
    std::signal(SIGTERM, [](int) { g_server->stop(); });
    if (!server.bind_to_port(o.host, port)) throw std::runtime_error("cannot bind " + o.host + ":" + std::to_string(port));
    std::fprintf(stderr, "listening on http://%s:%d\n", o.host.c_str(), port);
    server.listen_after_bind();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"luxmix: multi-light decomposition, relightable splats and the render service"};
    app.require_subcommand(1);

    GenScene gs;
    auto* c_gen = app.add_subcommand("gen-scene", "Write a procedural room scene (luxscene/1)");
    c_gen->add_option("--seed", gs.seed);
    c_gen->add_option("--lights", gs.lights, "Controllable lights")->check(CLI::Range(1, int(kMaxLights)));
    c_gen->add_option("--width", gs.width, "Equirect camera width")->check(CLI::PositiveNumber);
    c_gen->add_option("--cameras", gs.cameras)->check(CLI::PositiveNumber);
    c_gen->add_option("-o,--out", gs.out, "Output path, - for stdout");

    RenderOlat ro;
    auto* c_olat = app.add_subcommand("render-olat", "Render an ambient + OLAT stack with hull masks");
    c_olat->add_option("scene", ro.scene)->required()->check(CLI::ExistingFile);
    c_olat->add_option("-o,--out-dir", ro.out_dir)->required();
    c_olat->add_option("--camera", ro.camera, "Scene camera index");
    c_olat->add_option("--width", ro.width, "Equirect width, or perspective size with --fov");
    c_olat->add_option("--fov", ro.fov, "Perspective crop instead of the panorama");
    c_olat->add_option("--azimuth", ro.azimuth);
    c_olat->add_option("--elevation", ro.elevation);
    c_olat->add_option("--gamma", ro.gamma)->check(CLI::PositiveNumber);
    c_olat->add_option("--seed", ro.seed);

    DecomposeCheck dc;
    auto* c_dec = app.add_subcommand("decompose-check", "Print the max superposition residual of a scene");
    c_dec->add_option("scene", dc.scene)->required()->check(CLI::ExistingFile);
    c_dec->add_option("--width", dc.width)->check(CLI::Range(8, 8192));
    c_dec->add_option("--tol", dc.tol);
    c_dec->add_option("--seed", dc.seed);

    SampleViews sv;
    auto* c_views = app.add_subcommand("sample-views", "Sample a covisible perspective trajectory (luxtraj/1)");
    c_views->add_option("scene", sv.scene)->required()->check(CLI::ExistingFile);
    c_views->add_option("-o,--out", sv.out);
    c_views->add_option("--count", sv.options.count)->check(CLI::PositiveNumber);
    c_views->add_option("--min-overlap", sv.options.min_overlap);
    c_views->add_option("--fov", sv.options.fov_deg);
    c_views->add_option("--size", sv.options.width)->each([&](const std::string&) { sv.options.height = sv.options.width; });
    c_views->add_option("--pano-width", sv.pano_width)->check(CLI::Range(16, 8192));
    c_views->add_option("--seed", sv.seed);

    Fit ft;
    auto* c_fit = app.add_subcommand("fit", "Fit a splat cloud to oracle views of a scene (luxgauss/1)");
    c_fit->add_option("scene", ft.scene)->required()->check(CLI::ExistingFile);
    c_fit->add_option("-o,--out", ft.out)->required();
    c_fit->add_flag("--stage2", ft.stage2, "Also run the relightable stage");
    c_fit->add_option("--telemetry", ft.telemetry, "Loss CSV");
    c_fit->add_option("--iters1", ft.config.iters_stage1);
    c_fit->add_option("--iters-joint", ft.config.iters_joint);
    c_fit->add_option("--iters-frozen", ft.config.iters_frozen);
    c_fit->add_option("--smooth-every", ft.config.smooth_every);
    c_fit->add_option("--train", ft.views.train)->check(CLI::PositiveNumber);
    c_fit->add_option("--held-out", ft.views.held_out)->check(CLI::NonNegativeNumber);
    c_fit->add_option("--size", ft.views.width)->check(CLI::Range(8, 2048))->each([&](const std::string&) { ft.views.height = ft.views.width; });
    c_fit->add_option("--max-points", ft.init.max_points)->check(CLI::PositiveNumber);
    c_fit->add_option("--seed", ft.seed);

    Remix rx;
    auto* c_remix = app.add_subcommand("remix", "Render a stack or model with new light weights");
    c_remix->add_option("input", rx.input, "Stack manifest (.json) or model (.lxg)")->required()->check(CLI::ExistingFile);
    c_remix->add_option("-o,--out", rx.out, ".png, or .pfm / .lxhd / .hdr for linear output")->required();
    c_remix->add_option("-w,--weights", rx.weights, "Rows 'r,g,b;...' or 's;...', ambient first");
    c_remix->add_option("--camera", rx.camera, "Camera JSON for models");
    c_remix->add_option("--display", rx.display)->check(CLI::IsMember({"curve", "agx"}));
    c_remix->add_option("--seed", rx.seed);

    Plan pl;
    auto* c_plan = app.add_subcommand("plan", "Schedule harmonization passes over a pose graph (luxplan/1)");
    c_plan->add_option("graph", pl.graph, "Pose graph JSON")->check(CLI::ExistingFile);
    c_plan->add_option("--random", pl.random_frames, "Plan a random graph of this many frames instead");
    c_plan->add_option("--refs", pl.random_refs);
    c_plan->add_option("--capacity", pl.options.capacity)->check(CLI::PositiveNumber);
    c_plan->add_flag("--no-chain", [&](std::int64_t) { pl.options.chain = false; });
    c_plan->add_option("--w-rot", pl.options.w_rot)->check(CLI::NonNegativeNumber);
    c_plan->add_option("--chain-max-distance", pl.options.chain_max_distance);
    c_plan->add_option("-o,--out", pl.out);
    c_plan->add_option("--seed", pl.seed);

    Eval ev;
    auto* c_eval = app.add_subcommand("eval", "PSNR/SSIM after per-channel rescale");
    c_eval->add_option("--pred", ev.pred)->check(CLI::ExistingFile);
    c_eval->add_option("--gt", ev.gt)->check(CLI::ExistingFile);
    c_eval->add_option("--model", ev.model)->check(CLI::ExistingFile);
    c_eval->add_option("--scene", ev.scene)->check(CLI::ExistingFile);
    c_eval->add_option("--train", ev.views.train)->check(CLI::PositiveNumber);
    c_eval->add_option("--held-out", ev.views.held_out)->check(CLI::NonNegativeNumber);
    c_eval->add_option("--size", ev.views.width)->check(CLI::Range(8, 2048))->each([&](const std::string&) { ev.views.height = ev.views.width; });
    c_eval->add_option("--csv", ev.csv);
    c_eval->add_option("--seed", ev.seed);

    Serve sr;
    auto* c_serve = app.add_subcommand("serve", "Run the HTTP render service");
    c_serve->add_option("--host", sr.host);
    c_serve->add_option("--port", sr.port, "Defaults to $LUXMIX_PORT, then 8080")->check(CLI::Range(1, 65535));
    c_serve->add_option("--ui", sr.ui, "Static UI directory served under /ui");
    c_serve->add_option("--preload", sr.preload, "Stacks or models to open at startup")->check(CLI::ExistingFile);
    c_serve->add_option("--seed", sr.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*c_gen) return gen_scene(gs);
        if (*c_olat) return render_olat(ro);
        if (*c_dec) return decompose_check(dc);
        if (*c_views) return sample_views(sv);
        if (*c_fit) return fit(ft);
        if (*c_remix) return remix_cmd(rx);
        if (*c_plan) return plan_cmd(pl);
        if (*c_eval) return eval_cmd(ev);
        if (*c_serve) return serve(sr);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "error: malformed JSON: %s\n", e.what());
        return 2;
    } catch (const ServiceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.status() == 422 || e.status() == 400 ? 2 : 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
