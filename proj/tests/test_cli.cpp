#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct WorkDir {
    fs::path path;
    WorkDir() : path(fs::temp_directory_path() / ("luxmix_cli_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~WorkDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

const fs::path& workdir() {
    static const WorkDir dir;
    return dir.path;
}

int run(const std::string& args) {
    const std::string cmd = "cd '" + workdir().string() + "' && '" LUXMIX_BINARY "' " + args + " > last.out 2> last.err";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(workdir() / p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("gen-scene is deterministic") {
    REQUIRE(run("gen-scene --seed 7 --lights 3 --width 128 -o a.json") == 0);
    REQUIRE(run("gen-scene --seed 7 --lights 3 --width 128 -o b.json") == 0);
    CHECK(slurp("a.json") == slurp("b.json"));
    REQUIRE(run("gen-scene --seed 8 --lights 3 --width 128 -o c.json") == 0);
    CHECK(slurp("a.json") != slurp("c.json"));
}

TEST_CASE("decompose-check reports a tiny residual") {
    REQUIRE(run("gen-scene --seed 3 --lights 4 --width 128 -o s.json") == 0);
    CHECK(run("decompose-check s.json --width 64") == 0);
    const std::string out = slurp("last.out");
    const auto at = out.find("residual ");
    REQUIRE(at != std::string::npos);
    CHECK(std::stod(out.substr(at + 9)) <= 1e-5);
}

TEST_CASE("render-olat, remix and eval") {
    REQUIRE(run("gen-scene --seed 4 --lights 2 --width 128 -o s.json") == 0);
    REQUIRE(run("render-olat s.json -o stack --fov 70 --width 48") == 0);
    CHECK(fs::exists(workdir() / "stack" / "stack.json"));
    CHECK(fs::exists(workdir() / "stack" / "input.png"));
    REQUIRE(run("remix stack/stack.json -o same.png") == 0);
    // Stored scales reproduce the input exactly.
    CHECK(run("eval --pred same.png --gt stack/input.png") == 0);
    CHECK(slurp("last.out").find("psnr  99.000") != std::string::npos);
    CHECK(run("remix stack/stack.json -o dark.pfm -w '1;0;0'") == 0);
    CHECK(run("remix stack/stack.json -o bad.png -w '1;0'") == 2);
    CHECK(run("remix stack/stack.json -o bad.png -w '1;x;0'") == 2);
}

TEST_CASE("plan writes a valid schedule") {
    CHECK(run("plan --random 40 --refs 2 --capacity 9 --seed 5 -o p1.json") == 0);
    CHECK(run("plan --random 40 --refs 2 --capacity 9 --seed 5 -o p2.json") == 0);
    CHECK(slurp("p1.json") == slurp("p2.json"));
    CHECK(slurp("p1.json").find("luxplan/1") != std::string::npos);
    std::ofstream(workdir() / "g.json") << R"({"frames": [{"id": 0, "position": [0, 0, 0]}, {"id": 1, "position": [1, 0, 0]},
        {"id": 2, "position": [2, 0, 0], "azimuth": 0.5}], "source_refs": [0]})";
    CHECK(run("plan g.json --capacity 3 -o p3.json") == 0);
    CHECK(run("plan g.json --capacity 1") == 2);
    std::ofstream(workdir() / "broken.json") << R"({"frames": [)";
    CHECK(run("plan broken.json") == 2);
}

TEST_CASE("fit telemetry totals are the weighted loss sums") {
    REQUIRE(run("gen-scene --seed 2 --lights 2 --width 128 -o s.json") == 0);
    REQUIRE(run("fit s.json -o m.lxg --stage2 --iters1 10 --iters-joint 10 --iters-frozen 10 --smooth-every 3 --size 24 "
                "--train 4 --held-out 1 --telemetry tel.csv --seed 1") == 0);
    std::istringstream csv(slurp("tel.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "iteration,l_olat,l_comp,l_smooth,total");
    int rows = 0, smooth_rows = 0;
    while (std::getline(csv, line)) {
        std::vector<double> v;
        std::stringstream ls(line);
        std::string item;
        while (std::getline(ls, item, ',')) v.push_back(std::stod(item));
        REQUIRE(v.size() == 5);
        CHECK(v[4] == doctest::Approx(v[1] + 1.0 * v[2] + 0.01 * v[3]).epsilon(1e-7));
        smooth_rows += v[3] > 0.0;
        ++rows;
    }
    CHECK(rows == 30);
    CHECK(smooth_rows > 0);
    CHECK(run("eval --model m.lxg --scene s.json --size 24 --train 4 --held-out 1 --seed 1 --csv e.csv") == 0);
    CHECK(slurp("e.csv").find("composite") != std::string::npos);
    CHECK(run("remix m.lxg -o m.png --camera '{\"width\": 32, \"height\": 24}'") == 0);
    CHECK(run("remix m.lxg -o m.png --camera '{\"width\": 32,'") == 2);
}

TEST_CASE("sample-views writes a trajectory") {
    REQUIRE(run("gen-scene --seed 5 --lights 3 --width 128 -o s.json") == 0);
    CHECK(run("sample-views s.json --count 3 --pano-width 128 --seed 2 -o t1.json") == 0);
    CHECK(run("sample-views s.json --count 3 --pano-width 128 --seed 2 -o t2.json") == 0);
    CHECK(slurp("t1.json") == slurp("t2.json"));
    CHECK(slurp("t1.json").find("luxtraj/1") != std::string::npos);
}

TEST_CASE("usage and runtime errors") {
    CHECK(run("") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("gen-scene --lights 9") == 2);
    CHECK(run("gen-scene --seed nope") == 2);
    CHECK(run("decompose-check missing.json") == 2);
    CHECK(run("serve --port 70000") == 2);
    CHECK(run("--help") == 0);
    std::ofstream(workdir() / "junk.lxg") << "not a model";
    CHECK(run("remix junk.lxg -o x.png") != 0);
    CHECK(run("gen-scene -o /nonexistent/dir/x.json") == 1);
}

TEST_CASE("serve reads LUXMIX_PORT") {
    CHECK(run("serve --port 0") == 2);
    CHECK(::setenv("LUXMIX_PORT", "notaport", 1) == 0);
    CHECK(run("serve") == 2);
    ::unsetenv("LUXMIX_PORT");
}
