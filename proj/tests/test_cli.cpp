#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "affdepth/cli.hpp"
#include "published_grids.hpp"
#include "test_util.hpp"

using namespace affdepth;
using affdepth::testing::ScratchDir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "affdepth");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

const fs::path fixture = fs::path(AFFDEPTH_TEST_DATA) / "fixture";

std::string manifest() { return (fixture / "manifest.json").string(); }

std::vector<std::string> csv_lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run_cli({"--help"}).code, cli::exit_ok);
    EXPECT_EQ(run_cli({}).code, cli::exit_usage);
    EXPECT_EQ(run_cli({"frobnicate"}).code, cli::exit_usage);
    EXPECT_EQ(run_cli({"evaluate", "--manifest", manifest()}).code, cli::exit_usage);
    const auto missing = run_cli({"evaluate", "-m", "/nonexistent/manifest.json", "-p", fixture.string()});
    EXPECT_EQ(missing.code, cli::exit_usage);
    EXPECT_NE(missing.err.find("manifest"), std::string::npos);
    EXPECT_EQ(run_cli({"rank", "--ties", "dense", manifest()}).code, cli::exit_usage);
}

TEST(Cli, EvaluateMatchesOracleAggregates) {
    ScratchDir dir("cli-eval");
    const auto oracle = io::read_json(fixture / "oracle.json");
    for (const std::string method : {"method_a", "method_b"}) {
        const auto r = run_cli({"evaluate", "-m", manifest(), "-p", (fixture / method).string(), "--method", method,
                                "-o", dir.path().string()});
        ASSERT_EQ(r.code, cli::exit_ok) << r.err;
        const auto rep = io::read_report(dir / (method + "_fixture.json"));
        const auto back = io::read_report(dir / (method + "_fixture.csv"));
        const auto want = oracle[method]["aggregate"];
        EXPECT_NEAR(rep.aggregate().delta1, want["delta1"].get<double>(), 1e-9);
        EXPECT_NEAR(rep.aggregate().absrel, want["absrel"].get<double>(), 1e-9);
        EXPECT_EQ(rep.aggregate().images, want["images"].get<std::size_t>());
        EXPECT_EQ(back.per_image.size(), rep.per_image.size());
    }
}

TEST(Cli, EvaluateIsIndependentOfJobs) {
    ScratchDir one("cli-j1"), eight("cli-j8");
    ASSERT_EQ(run_cli({"evaluate", "-m", manifest(), "-p", (fixture / "method_b").string(), "-j", "1", "-o",
                       one.path().string()})
                  .code,
              0);
    ASSERT_EQ(run_cli({"evaluate", "-m", manifest(), "-p", (fixture / "method_b").string(), "-j", "8", "-o",
                       eight.path().string()})
                  .code,
              0);
    for (const char* f : {"method_b_fixture.csv", "method_b_fixture.json"})
        EXPECT_EQ(io::read_text(one / f), io::read_text(eight / f)) << f;
}

TEST(Cli, MissingPredictionsAreADataError) {
    ScratchDir dir("cli-missing");
    fs::create_directories(dir / "preds");
    for (const auto& e : fs::directory_iterator(fixture / "method_a"))
        if (e.path().filename() != "img2.pfm" && e.path().filename() != "img6.pfm")
            fs::copy_file(e.path(), dir / "preds" / e.path().filename());
    const auto r = run_cli({"evaluate", "-m", manifest(), "-p", (dir / "preds").string(), "-o", dir.path().string()});
    EXPECT_EQ(r.code, cli::exit_data);
    EXPECT_NE(r.err.find("img2"), std::string::npos);
    EXPECT_NE(r.err.find("img6"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "preds_fixture.csv"));
}

TEST(Cli, MalformedManifestNamesTheField) {
    ScratchDir dir("cli-schema");
    io::write_text(dir / "m.json", R"({"format_version": 1, "dataset": "x", "space": "depth",
        "entries": [{"id": "a", "gt": "a.pfm", "format": "exr"}]})");
    const auto r = run_cli({"evaluate", "-m", (dir / "m.json").string(), "-p", dir.path().string()});
    EXPECT_EQ(r.code, cli::exit_data);
    EXPECT_NE(r.err.find("/entries/0/format"), std::string::npos) << r.err;
}

TEST(Cli, OutputDirectoryDefaultsToEnvironment) {
    ScratchDir dir("cli-env");
    ::setenv(cli::out_dir_env, (dir / "from_env").string().c_str(), 1);
    const auto r = run_cli({"evaluate", "-m", manifest(), "-p", (fixture / "method_a").string()});
    ::unsetenv(cli::out_dir_env);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "from_env" / "method_a_fixture.json"));
}

TEST(Cli, RankReproducesPublishedAverageRanks) {
    ScratchDir dir("cli-rank");
    const auto grid = affdepth::testing::shared_protocol_grid();
    std::vector<std::string> args{"rank"};
    for (const auto& r : affdepth::testing::grid_reports(grid)) {
        const auto path = dir / (cli::report_stem(r.method, r.dataset) + ".json");
        io::write_report(r, path);
        args.push_back(path.string());
    }
    args.push_back("--csv");
    args.push_back((dir / "ranks.csv").string());
    const auto r = run_cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto lines = csv_lines(io::read_text(dir / "ranks.csv"));
    ASSERT_EQ(lines.size(), grid.rows.size() + 1);
    for (std::size_t m = 0; m < grid.rows.size(); ++m) {
        const auto& line = lines[m + 1];
        const double avg = std::stod(line.substr(line.rfind(',') + 1));
        EXPECT_NEAR(avg, grid.rows[m].printed_rank, 0.05) << line;
        // Printed table shows one decimal.
        EXPECT_NE(r.out.find(fmt::format("{:.1f}", grid.rows[m].printed_rank)), std::string::npos);
    }
}

TEST(Cli, OracleWritesReportsAndFractions) {
    ScratchDir dir("cli-oracle");
    for (const std::string m : {"method_a", "method_b"})
        ASSERT_EQ(run_cli({"evaluate", "-m", manifest(), "-p", (fixture / m).string(), "-o", dir.path().string()}).code,
                  0);
    const auto r = run_cli({"oracle", "--a", (dir / "method_a_fixture.json").string(), "--b",
                            (dir / "method_b_fixture.csv").string(), "-o", dir.path().string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto a = io::read_report(dir / "method_a_fixture.json").aggregate();
    const auto b = io::read_report(dir / "method_b_fixture.json").aggregate();
    const auto summary = io::read_json(dir / "oracle_fractions.json");
    ASSERT_EQ(summary["selections"].size(), 2u);
    for (const auto& s : summary["selections"]) {
        EXPECT_NEAR(s["fraction_a"].get<double>() + s["fraction_b"].get<double>(), 1.0, 1e-12);
        const std::string crit = s["criterion"];
        const auto o = io::read_report(dir / ("oracle_" + crit + ".json")).aggregate();
        if (crit == "delta1") EXPECT_GE(o.delta1, std::max(a.delta1, b.delta1));
        else EXPECT_LE(o.absrel, std::min(a.absrel, b.absrel));
    }
    const auto only = run_cli({"oracle", "--a", (dir / "method_a_fixture.json").string(), "--b",
                               (dir / "method_b_fixture.json").string(), "--criterion", "absrel", "-o",
                               (dir / "only").string()});
    ASSERT_EQ(only.code, 0);
    EXPECT_EQ(io::read_json(dir / "only" / "oracle_fractions.json")["selections"].size(), 1u);
}

TEST(Cli, CombineWritesPredictionsAndReport) {
    ScratchDir dir("cli-combine");
    const auto r = run_cli({"combine", "-m", manifest(), "--a", (fixture / "method_a").string(), "--b",
                            (fixture / "method_b").string(), "-o", dir.path().string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = io::load_manifest(manifest());
    for (const auto& e : m.entries) {
        const auto pred = io::read_prediction_pfm(dir / "predictions" / (e.id + ".pfm"), m.space);
        const auto gt = io::load_ground_truth(m, e);
        EXPECT_EQ(pred.height(), gt.height());
        EXPECT_EQ(pred.width(), gt.width());
    }
    EXPECT_EQ(io::read_report(dir / "pixel_average_fixture.json").per_image.size(), m.entries.size());
}

TEST(Cli, CategoriesWritesStatsAndPlot) {
    ScratchDir dir("cli-cat");
    ASSERT_EQ(run_cli({"evaluate", "-m", manifest(), "-p", (fixture / "method_a").string(), "-o",
                       dir.path().string()})
                  .code,
              0);
    const auto r = run_cli({"categories", "-r", (dir / "method_a_fixture.json").string(), "--metric", "delta1", "-o",
                            dir.path().string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto stats = io::read_json(dir / "categories_delta1.json");
    std::size_t n = 0;
    for (const auto& s : stats) n += s["count"].get<std::size_t>();
    EXPECT_EQ(n, 8u);
    const auto svg = io::read_text(dir / "categories_delta1.svg");
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    EXPECT_NE(svg.find("indoor"), std::string::npos);
}

TEST(Cli, UnknownReportExtensionIsADataError) {
    ScratchDir dir("cli-ext");
    io::write_text(dir / "r.xml", "<report/>");
    EXPECT_EQ(run_cli({"categories", "-r", (dir / "r.xml").string(), "-o", dir.path().string()}).code,
              cli::exit_data);
}

TEST(Cli, PoolAttnMatchesLibrary) {
    ScratchDir dir("cli-pool");
    const auto config = toy_config();
    SceneOptions scene;
    scene.height = config.image_height;
    scene.width = config.image_width;
    const auto sample = make_synthetic_set(1, 5, scene, "p").front();
    const auto stages = synth_preimage(sample.image, config.preimage_seed, config.stages, config.preimage);
    io::write_container(io::preimage_container(stages), dir / "in.pdrc");
    const auto r = run_cli({"pool-attn", "-i", (dir / "in.pdrc").string(), "--output", (dir / "out.pdrc").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto out = io::read_container(dir / "out.pdrc");
    std::size_t k = 0;
    for (const auto& st : stages) {
        for (const auto& m : st.self_attn) {
            ASSERT_LT(k, out.records.size());
            EXPECT_EQ(out.records[k].role, "pooled_self_attn");
            EXPECT_EQ(io::record_tensor<double>(out.records[k]), pool_self_attention(m));
            ++k;
        }
        for (const auto& m : st.cross_attn) {
            ASSERT_LT(k, out.records.size());
            EXPECT_EQ(out.records[k].role, "folded_cross_attn");
            EXPECT_EQ(io::record_tensor<double>(out.records[k]), fold_cross_attention(m));
            ++k;
        }
    }
    EXPECT_EQ(k, out.records.size());
}

TEST(Cli, PoolAttnRejectsUnnormalisedRows) {
    ScratchDir dir("cli-pool-bad");
    std::vector<double> v(8 * 8 * 64, 1.0 / 64.0);
    v[5] += 0.5;
    const Tensor t({1, 8, 8, 64}, std::move(v));
    io::RasterContainer c;
    c.records.push_back(io::make_record("s/self", "self_attn", t, 0, 1));
    io::write_container(c, dir / "bad.pdrc");
    const auto r = run_cli({"pool-attn", "-i", (dir / "bad.pdrc").string(), "--output", (dir / "o.pdrc").string()});
    EXPECT_EQ(r.code, cli::exit_data);
    EXPECT_NE(r.err.find("sums to"), std::string::npos) << r.err;
}

TEST(Cli, TrainToyWritesHistoryAndParameters) {
    ScratchDir dir("cli-train");
    const auto r = run_cli({"train-toy", "--steps", "3", "--samples", "4", "--seed", "2", "-o", dir.path().string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto lines = csv_lines(io::read_text(dir / "loss_history.csv"));
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], "step,total,ssi,dice,focal");
    const auto config = io::config_from_json(io::read_json(dir / "config.json"), toy_config());
    const auto expected = init_params<double>(config, 0);
    const auto params = io::params_from_container<double>(io::read_container(dir / "params.pdrc"), &expected);
    EXPECT_EQ(params.names, expected.names);
    // Same run again gives the same history.
    ScratchDir again("cli-train2");
    ASSERT_EQ(run_cli({"train-toy", "--steps", "3", "--samples", "4", "--seed", "2", "-o", again.path().string()}).code,
              0);
    EXPECT_EQ(io::read_text(dir / "loss_history.csv"), io::read_text(again / "loss_history.csv"));
}

TEST(Cli, GradcheckPassesWithoutRefiner) {
    const auto r = run_cli({"gradcheck", "--seed", "7", "--skip-refiner"});
    EXPECT_EQ(r.code, cli::exit_ok) << r.out;
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, BenchReportsEachResolution) {
    ScratchDir dir("cli-bench");
    const auto r = run_cli({"bench", "--resolutions", "16,32", "--runs", "2", "--warmup", "0", "--csv",
                            (dir / "b.csv").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto lines = csv_lines(io::read_text(dir / "b.csv"));
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[1].rfind("16x16,2,", 0), 0u);
    EXPECT_EQ(lines[2].rfind("32x32,2,", 0), 0u);
    EXPECT_EQ(run_cli({"bench", "--resolutions", "18"}).code, cli::exit_data);
}
