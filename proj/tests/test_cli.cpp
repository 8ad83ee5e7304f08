#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "facm/cli.hpp"
#include "facm/config.hpp"

using namespace facm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "facm_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "facm_lab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

const std::vector<std::string> kTiny = {"--set", "hidden_width=16", "--set", "depth=2",  "--set", "time_embed_dim=8",
                                        "--set", "batch_size=32",   "--set", "dataset_size=500"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
}

}  // namespace

TEST_CASE("parse_text defaults, overrides and errors") {
    CHECK(config::parse_text("") == train::TrainConfig{});
    CHECK(config::parse_text("# only a comment\n\n") == train::TrainConfig{});

    const fs::path dir = scratch_dir("parse");
    write_file(dir / "a.cfg", "w = 2.5\nalpha_kind = one_minus_t_pow\nalpha_p = 0.5\nsteps = 12 # trailing\n");
    const train::TrainConfig c = config::parse_config(dir / "a.cfg", {"w=1.0"});
    CHECK(c.guidance.w == 1.0);
    CHECK(c.weighting.alpha.kind == obj::WeightKind::OneMinusTPow);
    CHECK(c.weighting.alpha.p == 0.5);
    CHECK(c.steps == 12);
    CHECK(config::parse_config("", {"adam_betas=0.8, 0.99", "eval_nfe=1,2"}).adam_betas ==
          std::array<double, 2>{0.8, 0.99});

    write_file(dir / "bad.cfg", "steps = 3\nstepz = 4\n");
    CHECK_THROWS_WITH_AS(config::parse_config(dir / "bad.cfg", {}), doctest::Contains("bad.cfg:2"), config::ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config(dir / "bad.cfg", {}), doctest::Contains("stepz"), config::ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_text("lr = fast\n"), doctest::Contains("lr"), config::ConfigError);
    CHECK_THROWS_AS(config::parse_text("lr 0.1\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse_config("", {"nokey"}), config::ConfigError);
    CHECK_THROWS_WITH_AS(config::parse_config(dir / "missing.cfg", {}), doctest::Contains("missing.cfg"),
                         config::ConfigError);
}

TEST_CASE("resolved snapshot round-trips") {
    train::TrainConfig c = config::parse_text(
        "paradigm = distill\nlr = 3e-4\nw = 1.1\nscheme = auxiliary_time\nobjective = meanflow\nclamp = false\n"
        "eval_nfe = 1, 3\nteacher = runs/t/checkpoint.bin\nlabel = 2\np_mean = -0.1\n");
    c.norm_c = 0.1 + 0.2;
    CHECK(config::parse_text(config::to_text(c)) == c);
    CHECK(config::parse_text(config::to_text(train::TrainConfig{})) == train::TrainConfig{});
    for (const auto& key : config::known_keys()) CHECK(config::to_text(c).find(key + " = ") != std::string::npos);
}

TEST_CASE("usage and config errors exit with 2") {
    const fs::path dir = scratch_dir("errors");
    CHECK(run({}) == cli::kExitUsage);
    CHECK(run({"train"}) == cli::kExitUsage);
    CHECK(run({"pretrain", "--bogus"}) == cli::kExitUsage);
    CHECK(run({"pretrain", "--config", (dir / "nope.cfg").string(), "--out", dir.string()}) == cli::kExitUsage);
    write_file(dir / "typo.cfg", "hidden_widht = 8\n");
    CHECK(run({"pretrain", "--config", (dir / "typo.cfg").string(), "--out", dir.string()}) == cli::kExitUsage);
    CHECK(run({"eval", "--out", dir.string()}) == cli::kExitUsage);
    CHECK(run({"sample", "--set", "checkpoint=" + (dir / "none.bin").string(), "--out", dir.string()}) ==
          cli::kExitFailure);
    CHECK(run({"--help"}) == cli::kExitOk);
}

TEST_CASE("pretrain, distill and eval end to end") {
    const fs::path dir = scratch_dir("e2e");
    REQUIRE(run(with({"pretrain", "--out", (dir / "teacher").string(), "--set", "steps=40", "--seed", "5"}, kTiny)) ==
            cli::kExitOk);
    for (const char* f : {"config.resolved", "seed.txt", "loss.csv", "checkpoint.bin"})
        CHECK(fs::exists(dir / "teacher" / f));
    CHECK(slurp(dir / "teacher" / "seed.txt") == "5\n");
    CHECK(config::parse_config(dir / "teacher" / "config.resolved", {}).seed == 5);
    const std::string trace = slurp(dir / "teacher" / "loss.csv");
    CHECK(trace.rfind("step,fm_loss,cm_loss,total,grad_norm,clamp_fraction\n", 0) == 0);
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 41);

    const std::string teacher = "teacher=" + (dir / "teacher" / "checkpoint.bin").string();
    REQUIRE(run(with({"distill", "--out", (dir / "student").string(), "--set", "steps=20", "--set", teacher}, kTiny)) ==
            cli::kExitOk);
    const std::string student = "checkpoint=" + (dir / "student" / "checkpoint.bin").string();
    REQUIRE(run({"eval", "--out", (dir / "eval").string(), "--set", student, "--set", "eval_samples=50", "--set",
                 "eval_nfe=1,2", "--set", "reference_steps=5"}) == cli::kExitOk);
    const std::string report = slurp(dir / "eval" / "report.csv");
    CHECK(report.rfind("nfe,energy_distance,sliced_w2,n_samples,seed\n1,", 0) == 0);
    CHECK(std::count(report.begin(), report.end(), '\n') == 3);
    CHECK(fs::exists(dir / "eval" / "reference.csv"));
    const std::string samples = slurp(dir / "eval" / "samples.csv");
    CHECK(std::count(samples.begin(), samples.end(), '\n') == 101);

    REQUIRE(run({"sample", "--out", (dir / "sample").string(), "--set", student, "--set", "eval_samples=10", "--set",
                 "eval_nfe=2"}) == cli::kExitOk);
    CHECK(slurp(dir / "sample" / "samples.csv").rfind("x,y,label,nfe,seed\n", 0) == 0);

    // a teacher with a different width is refused
    CHECK(run(with({"distill", "--out", (dir / "bad").string(), "--set", "steps=2", "--set", teacher, "--set",
                    "hidden_width=24"},
                   {"--set", "depth=2", "--set", "time_embed_dim=8"})) == cli::kExitFailure);
}

TEST_CASE("FACM_LAB_OUT sets the default output root") {
    const fs::path dir = scratch_dir("env");
    setenv("FACM_LAB_OUT", dir.string().c_str(), 1);
    const int code = run({"equivalence"});
    unsetenv("FACM_LAB_OUT");
    CHECK(code == cli::kExitOk);
    CHECK(fs::exists(dir / "equivalence" / "equivalence.txt"));
    CHECK(fs::exists(dir / "equivalence" / "config.resolved"));
}

TEST_CASE("single-threaded training traces are bit-identical") {
    const fs::path dir = scratch_dir("repro");
    for (const char* name : {"a", "b"})
        REQUIRE(run(with({"scratch", "--threads", "1", "--out", (dir / name).string(), "--set", "steps=25"}, kTiny)) ==
                cli::kExitOk);
    const std::string a = slurp(dir / "a" / "loss.csv");
    CHECK(a.size() > 100);
    CHECK(a == slurp(dir / "b" / "loss.csv"));
    CHECK(slurp(dir / "a" / "checkpoint.bin") == slurp(dir / "b" / "checkpoint.bin"));
}
