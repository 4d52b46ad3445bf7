#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "mosaic/msgt.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
};

// Runs the CLI with stderr folded into stdout.
RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(MOSAIC_CLI_PATH) + " " + args + " 2>&1";
    RunResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf;
    while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) { return mosaic::io::read_file(p); }

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("mosaic_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::set<std::string> flags_in(const std::string& help) {
    std::set<std::string> out;
    const std::regex re("(^|[\\s,])(--[a-z][a-z-]*)");
    for (auto it = std::sregex_iterator(help.begin(), help.end(), re); it != std::sregex_iterator(); ++it)
        out.insert((*it)[2]);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::istringstream in(slurp(p));
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(cell);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

TEST(Cli, HelpEnumeratesEveryFlag) {
    const std::set<std::string> common{"--help", "--help-all", "--config"};
    const std::set<std::string> train_flags{
        "--data", "--out", "--steps", "--lr", "--lr-min", "--warmup", "--ensemble", "--batch", "--rollout", "--clip",
        "--train-fraction", "--weight-decay", "--momentum", "--ns-steps", "--orthogonalizer", "--alpha",
        "--val-windows", "--val-members", "--log-every", "--seed"};
    auto with = [](std::set<std::string> base, std::initializer_list<const char*> extra) {
        for (auto e : extra) base.insert(e);
        return base;
    };
    std::map<std::string, std::set<std::string>> expected{
        {"mesh info", {"--help", "--help-all", "--nside", "--block"}},
        {"synth", with(common, {"--out", "--grid", "--channels", "--steps", "--band-limit", "--ar", "--rotation",
                                "--slope", "--day-period", "--year-period", "--seed"})},
        {"train", with(train_flags, {"--help", "--help-all", "--config", "--model", "--stages"})},
        {"finetune", with(train_flags, {"--help", "--help-all", "--config", "--init"})},
        {"forecast", with(common, {"--ckpt", "--data", "--out", "--members", "--steps", "--origin", "--seed"})},
        {"eval", with(common, {"--forecast", "--truth", "--report"})},
        {"spectra", with(common, {"--field", "--channel", "--nmax", "--out", "--reference", "--ratio-out",
                                  "--amplitude"})},
        {"alias-demo", with(common, {"--native", "--coarse", "--signals", "--band", "--slope", "--nonlinearity",
                                     "--source", "--out", "--seed"})},
        {"bench", with(common, {"--lengths", "--block", "--local", "--top-n", "--head-dim", "--heads", "--repeats",
                                "--no-dense", "--out", "--seed"})},
    };
    for (const auto& [cmd, flags] : expected) {
        const auto r = run_cli(cmd + " --help");
        EXPECT_EQ(r.code, 0) << cmd;
        EXPECT_EQ(flags_in(r.out), flags) << cmd << "\n" << r.out;
    }
    const auto top = run_cli("--help");
    EXPECT_EQ(top.code, 0);
    for (const char* sub : {"mesh", "synth", "train", "finetune", "forecast", "eval", "spectra", "alias-demo", "bench"})
        EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    EXPECT_EQ(run_cli("--help-all").code, 0);
}

TEST(Cli, MeshInfo) {
    const auto r = run_cli("mesh info --nside 64 --block 256");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("npix 49152"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("resolution 0.92 deg"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("blocks 192 of 256"), std::string::npos) << r.out;
}

TEST(Cli, SynthSingleStepWritesOneStateAndStats) {
    const auto dir = scratch("synth1");
    const auto r = run_cli("synth --out " + (dir / "d").string() + " --grid 8x16 --steps 1 --band-limit 3");
    ASSERT_EQ(r.code, 0) << r.out;
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir / "d")) names.insert(e.path().filename().string());
    EXPECT_EQ(names, (std::set<std::string>{"state_00000.msgt", "stats.msgt", "statics.msgt", "synth.cfg",
                                            "run.manifest"}));
    const auto stats = mosaic::io::load_msgt<double>(dir / "d" / "stats.msgt");
    EXPECT_EQ(stats.shape(), (mosaic::Shape{2, 3}));
    fs::remove_all(dir);
}

TEST(Cli, SynthIsByteIdenticalForASeed) {
    const auto dir = scratch("synth_det");
    const std::string args = " --grid 8x16 --steps 5 --band-limit 3 --seed 4";
    ASSERT_EQ(run_cli("synth --out " + (dir / "a").string() + args).code, 0);
    ASSERT_EQ(run_cli("synth --out " + (dir / "b").string() + args).code, 0);
    ASSERT_EQ(run_cli("synth --out " + (dir / "c").string() + " --grid 8x16 --steps 5 --band-limit 3 --seed 5").code,
              0);
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        const auto name = e.path().filename();
        if (name == "run.manifest") continue;
        EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / name)) << name;
        ++compared;
    }
    EXPECT_EQ(compared, 8u);
    EXPECT_NE(slurp(dir / "a" / "state_00004.msgt"), slurp(dir / "c" / "state_00004.msgt"));
    fs::remove_all(dir);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
    const auto dir = scratch("config");
    mosaic::io::write_file(dir / "s.cfg", "steps = 3\ngrid = \"8x16\"\nband-limit = 3\n");
    ASSERT_EQ(run_cli("synth --config " + (dir / "s.cfg").string() + " --out " + (dir / "a").string()).code, 0);
    EXPECT_TRUE(fs::exists(dir / "a" / "state_00002.msgt"));
    EXPECT_FALSE(fs::exists(dir / "a" / "state_00003.msgt"));
    ASSERT_EQ(run_cli("synth --config " + (dir / "s.cfg").string() + " --steps 2 --out " + (dir / "b").string()).code,
              0);
    EXPECT_FALSE(fs::exists(dir / "b" / "state_00002.msgt"));
    const auto manifest = slurp(dir / "b" / "run.manifest");
    EXPECT_NE(manifest.find("steps=2"), std::string::npos) << manifest;
    EXPECT_NE(manifest.find("version = 0.1.0"), std::string::npos);
    EXPECT_NE(manifest.find("wall_time_s"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
    const auto dir = scratch("exit");
    mosaic::io::write_file(dir / "bad.cfg", "steps = many\n");
    mosaic::io::write_file(dir / "unknown.cfg", "stepz = 3\n");
    EXPECT_EQ(run_cli("synth --config " + (dir / "bad.cfg").string() + " --out " + (dir / "x").string()).code, 2);
    EXPECT_EQ(run_cli("synth --config " + (dir / "unknown.cfg").string() + " --out " + (dir / "x").string()).code, 2);
    EXPECT_EQ(run_cli("synth --grid 8by16 --out " + (dir / "x").string()).code, 2);
    EXPECT_EQ(run_cli("mesh info --nside 12").code, 2);
    EXPECT_EQ(run_cli("synth").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
    EXPECT_EQ(run_cli("spectra --field " + (dir / "missing.msgt").string() + " --out " + (dir / "s.dat").string()).code,
              4);
    EXPECT_EQ(run_cli("synth --config " + (dir / "none.cfg").string() + " --out " + (dir / "x").string()).code, 4);
    mosaic::io::write_file(dir / "blocker", "");
    EXPECT_EQ(run_cli("synth --grid 8x16 --steps 2 --band-limit 3 --out " + (dir / "blocker" / "d").string()).code, 4);
    fs::remove_all(dir);
}

TEST(Cli, SpectraWritesPowerAndRatio) {
    const auto dir = scratch("spectra");
    ASSERT_EQ(run_cli("synth --out " + (dir / "d").string() + " --grid 16x32 --steps 2 --band-limit 5").code, 0);
    const auto f = (dir / "d" / "state_00001.msgt").string();
    const auto r = run_cli("spectra --field " + f + " --channel 1 --nmax 8 --out " + (dir / "p.dat").string() +
                           " --reference " + f + " --ratio-out " + (dir / "r.dat").string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::istringstream in(slurp(dir / "r.dat"));
    std::string line;
    std::getline(in, line);
    std::size_t n = 0;
    std::string ratio;
    std::size_t rows = 0;
    while (in >> n >> ratio) {
        ++rows;
        // self ratio is exactly one where there is power, missing above the band
        if (n >= 1 && n <= 5) {
            EXPECT_EQ(ratio, "1") << n;
        }
        if (n > 5) {
            EXPECT_EQ(ratio, "nan") << n;
        }
    }
    EXPECT_EQ(rows, 9u);
    fs::remove_all(dir);
}

// synth -> train 500 steps -> forecast 24 x 10 -> eval, plus a repeat
// forecast to check determinism.
TEST(Cli, EndToEndPipeline) {
    const auto dir = scratch("e2e");
    const auto d = (dir / "data").string(), ck = (dir / "ckpt").string();
    auto r = run_cli("synth --out " + d + " --grid 16x32 --steps 200 --band-limit 6 --seed 1");
    ASSERT_EQ(r.code, 0) << r.out;
    r = run_cli("train --data " + d + " --out " + ck + " --model toy --steps 500 --seed 3 --log-every 0 --val-windows 8");
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* f : {"model.cfg", "manifest.txt", "norm.msgt", "train_log.csv", "run.manifest"})
        EXPECT_TRUE(fs::exists(fs::path(ck) / f)) << f;
    EXPECT_EQ(read_csv(fs::path(ck) / "train_log.csv").size(), 501u);

    const std::string fc_args = " --ckpt " + ck + " --data " + d + " --members 24 --steps 10 --seed 7";
    r = run_cli("forecast --out " + (dir / "fc").string() + fc_args);
    ASSERT_EQ(r.code, 0) << r.out;
    std::size_t members = 0;
    for (const auto& e : fs::directory_iterator(dir / "fc"))
        if (e.path().extension() == ".msgt") ++members;
    EXPECT_EQ(members, 240u);
    ASSERT_EQ(run_cli("forecast --out " + (dir / "fc2").string() + fc_args).code, 0);
    for (const char* f : {"member_000_step_001.msgt", "member_023_step_010.msgt"})
        EXPECT_EQ(slurp(dir / "fc" / f), slurp(dir / "fc2" / f)) << f;

    const auto report = dir / "report.csv";
    r = run_cli("eval --forecast " + (dir / "fc").string() + " --truth " + d + " --report " + report.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto rows = read_csv(report);
    ASSERT_EQ(rows.size(), 1u + 10 * 3);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"lead", "channel", "rmse", "nrmse", "crps", "spread", "ssr", "drift"}));
    double spread = 0, mse = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        ASSERT_EQ(rows[i].size(), 8u);
        for (std::size_t j = 2; j < 8; ++j) EXPECT_TRUE(std::isfinite(std::stod(rows[i][j]))) << i << "," << j;
        const double rmse = std::stod(rows[i][2]), sp = std::stod(rows[i][5]);
        spread += sp * sp;
        mse += rmse * rmse;
    }
    const double ssr = std::sqrt(spread / mse);
    EXPECT_GT(ssr, 0.0);
    EXPECT_LT(ssr, 3.0);
    fs::remove_all(dir);
}
