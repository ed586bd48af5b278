#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "affdepth/checks.hpp"
#include "affdepth/combine.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/evaluate.hpp"
#include "affdepth/io/container.hpp"
#include "affdepth/io/manifest.hpp"
#include "affdepth/io/pfm.hpp"
#include "affdepth/io/report.hpp"
#include "affdepth/io/svg.hpp"
#include "affdepth/metrics.hpp"
#include "affdepth/preimage.hpp"
#include "affdepth/refiner.hpp"
#include "affdepth/synthetic.hpp"

namespace affdepth::cli {

namespace fs = std::filesystem;

/// Exit codes.
inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 1;
inline constexpr int exit_data = 2;
inline constexpr int exit_check_failed = 3;

/// Environment variable naming the default output directory.
inline constexpr const char* out_dir_env = "AFFDEPTH_OUT_DIR";

inline std::string default_out_dir() {
    const char* v = std::getenv(out_dir_env);
    return v && *v ? std::string(v) : std::string(".");
}

/// File-name stem for a method on a dataset: characters outside
/// [A-Za-z0-9._-] become '_'.
inline std::string report_stem(const std::string& method, const std::string& dataset) {
    std::string s = method + "_" + dataset;
    for (auto& c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')) c = '_';
    return s;
}

namespace detail {

struct Options {
    std::string out = default_out_dir();
    std::size_t jobs = 1;
    bool run_metadata = false;

    // evaluate / combine
    std::string manifest, predictions, pred_a, pred_b, method, prediction_space;
    // oracle
    std::string report_a, report_b, criterion = "both";
    // rank
    std::vector<std::string> reports;
    std::string ties = "competition", rank_out;
    // categories
    std::string report, metric = "absrel", title;
    // pool-attn
    std::string input, output;
    // train-toy
    std::string config;
    std::size_t steps = 200, samples = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::string injection, head;
    // gradcheck
    bool skip_refiner = false;
    // bench
    std::vector<std::size_t> resolutions{16, 32, 64};
    std::size_t runs = 20, warmup = 2;
    std::string bench_out;
};

inline fs::path ensure_dir(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw FileError(fmt::format("cannot create output directory {}: {}", dir, ec.message()));
    return p;
}

inline std::string percent(double fraction) { return fmt::format("{:.1f}", 100.0 * fraction); }

inline std::optional<io::ordered_json> run_info(const Options& o, const std::string& command,
                                                std::chrono::steady_clock::time_point start) {
    if (!o.run_metadata) return std::nullopt;
    io::ordered_json j;
    j["command"] = command;
    j["jobs"] = o.jobs;
    j["elapsed_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    j["started_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                            .count();
    return j;
}

inline void write_report_pair(const MetricReport& r, const fs::path& dir, const std::string& stem,
                              const std::optional<io::ordered_json>& run, std::ostream& out) {
    io::write_report(r, dir / (stem + ".csv"), io::ReportFormat::csv);
    io::write_report(r, dir / (stem + ".json"), io::ReportFormat::json, run);
    const Aggregate a = r.aggregate();
    fmt::print(out, "{} on {}: delta1 {} %  AbsRel {:.4f}  ({} images, {} degenerate)\n", r.method, r.dataset,
               percent(a.delta1), a.absrel, r.per_image.size(), r.per_image.size() - a.images);
    fmt::print(out, "wrote {} and {}\n", (dir / (stem + ".csv")).string(), (dir / (stem + ".json")).string());
}

inline EvaluateOptions evaluate_options(const Options& o) {
    EvaluateOptions e;
    e.jobs = o.jobs;
    if (!o.prediction_space.empty()) e.prediction_space = parse_depth_space(o.prediction_space);
    return e;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const auto m = io::load_manifest(o.manifest);
    const std::string method = o.method.empty() ? fs::path(o.predictions).filename().string() : o.method;
    const auto report = evaluate_dataset(m, o.predictions, method, evaluate_options(o));
    write_report_pair(report, ensure_dir(o.out), report_stem(method, m.dataset), run_info(o, "evaluate", start), out);
    return exit_ok;
}

inline int cmd_combine(const Options& o, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const auto m = io::load_manifest(o.manifest);
    const auto options = evaluate_options(o);
    const auto maps = combine_predictions(m, o.pred_a, o.pred_b, options);
    const auto dir = ensure_dir(o.out);
    const auto pred_dir = ensure_dir((dir / "predictions").string());
    for (std::size_t i = 0; i < maps.size(); ++i)
        io::write_prediction_pfm(maps[i], prediction_path(pred_dir, m.entries[i].id));
    fmt::print(out, "wrote {} averaged predictions to {}\n", maps.size(), pred_dir.string());
    // The combined maps are stored in the manifest's space.
    EvaluateOptions eval = options;
    eval.prediction_space.reset();
    const std::string method = o.method.empty() ? "pixel_average" : o.method;
    const auto report = evaluate_dataset(m, pred_dir, method, eval);
    write_report_pair(report, dir, report_stem(method, m.dataset), run_info(o, "combine", start), out);
    return exit_ok;
}

inline int cmd_oracle(const Options& o, std::ostream& out) {
    const auto a = io::read_report(o.report_a);
    const auto b = io::read_report(o.report_b);
    std::vector<Metric> criteria;
    if (o.criterion == "both") criteria = {Metric::delta1, Metric::absrel};
    else criteria = {parse_metric(o.criterion)};
    const auto dir = ensure_dir(o.out);
    io::ordered_json summary;
    summary["a"] = a.method;
    summary["b"] = b.method;
    summary["dataset"] = a.dataset;
    summary["selections"] = io::ordered_json::array();
    for (const Metric c : criteria) {
        const auto r = image_oracle(a, b, c);
        const std::string stem = fmt::format("oracle_{}", to_string(c));
        io::write_report(r.report, dir / (stem + ".csv"), io::ReportFormat::csv);
        io::write_report(r.report, dir / (stem + ".json"), io::ReportFormat::json);
        const Aggregate agg = r.report.aggregate();
        io::ordered_json s;
        s["criterion"] = std::string(to_string(c));
        s["fraction_a"] = r.fraction_a;
        s["fraction_b"] = r.fraction_b;
        s["ties"] = r.ties;
        s["aggregate"] = {{"delta1", agg.delta1}, {"absrel", agg.absrel}};
        summary["selections"].push_back(std::move(s));
        fmt::print(out, "oracle by {}: delta1 {} %  AbsRel {:.4f}  selected {} {} % / {} {} %  ({} ties)\n",
                   to_string(c), percent(agg.delta1), agg.absrel, a.method, percent(r.fraction_a), b.method,
                   percent(r.fraction_b), r.ties);
    }
    io::write_text(dir / "oracle_fractions.json", summary.dump(2) + "\n");
    fmt::print(out, "wrote {}\n", (dir / "oracle_fractions.json").string());
    return exit_ok;
}

inline int cmd_rank(const Options& o, std::ostream& out) {
    std::vector<MetricReport> reports;
    for (const auto& p : o.reports) reports.push_back(io::read_report(p));
    const TieRule rule = o.ties == "average" ? TieRule::average : TieRule::competition;
    const auto r = average_rank(reports, rule);
    std::size_t width = 6;
    for (const auto& m : r.methods) width = std::max(width, m.size());
    std::string header = fmt::format("{:<{}}", "method", width);
    for (const auto& c : r.columns) header += fmt::format("  {:>12}", fmt::format("{}/{}", c.dataset, to_string(c.metric)));
    header += "  avg_rank\n";
    std::string csv = "method";
    for (const auto& c : r.columns) csv += fmt::format(",{}/{}", c.dataset, to_string(c.metric));
    csv += ",average_rank\n";
    std::string table = header;
    for (std::size_t m = 0; m < r.methods.size(); ++m) {
        table += fmt::format("{:<{}}", r.methods[m], width);
        csv += io::detail::csv_field(r.methods[m]);
        for (auto v : r.ranks[m]) {
            table += fmt::format("  {:>12}", v);
            csv += fmt::format(",{}", v);
        }
        table += fmt::format("  {:>8.1f}\n", r.average_rank[m]);
        csv += fmt::format(",{}\n", r.average_rank[m]);
    }
    out << table;
    if (!o.rank_out.empty()) {
        io::write_text(o.rank_out, csv);
        fmt::print(out, "wrote {}\n", o.rank_out);
    }
    return exit_ok;
}

inline int cmd_categories(const Options& o, std::ostream& out) {
    const auto report = io::read_report(o.report);
    const Metric metric = parse_metric(o.metric);
    const auto stats = category_stats(report, metric);
    const auto dir = ensure_dir(o.out);
    const std::string stem = fmt::format("categories_{}", to_string(metric));
    io::ordered_json j = io::ordered_json::array();
    fmt::print(out, "{:<16} {:>5} {:>10} {:>10} {:>10} {:>10} {:>8}\n", "category", "n", "median", "q1", "q3", "iqr",
               "outliers");
    for (const auto& s : stats) {
        j.push_back({{"category", s.category},
                     {"count", s.count},
                     {"median", s.median},
                     {"q1", s.q1},
                     {"q3", s.q3},
                     {"iqr", s.iqr},
                     {"whisker_low", s.whisker_low},
                     {"whisker_high", s.whisker_high},
                     {"outliers", s.outlier_ids}});
        fmt::print(out, "{:<16} {:>5} {:>10.4f} {:>10.4f} {:>10.4f} {:>10.4f} {:>8}\n", s.category, s.count, s.median,
                   s.q1, s.q3, s.iqr, s.outlier_ids.size());
    }
    io::write_text(dir / (stem + ".json"), j.dump(2) + "\n");
    io::BoxplotOptions bo;
    bo.title = o.title.empty() ? fmt::format("{} on {}", report.method, report.dataset) : o.title;
    bo.axis_label = metric == Metric::absrel ? "AbsRel" : "delta1";
    io::render_boxplot_svg(stats, dir / (stem + ".svg"), bo);
    fmt::print(out, "wrote {} and {}\n", (dir / (stem + ".json")).string(), (dir / (stem + ".svg")).string());
    return exit_ok;
}

inline int cmd_pool_attn(const Options& o, std::ostream& out) {
    const auto in = io::read_container(o.input);
    io::RasterContainer result;
    std::size_t pooled = 0, folded = 0;
    for (const auto& r : in.records) {
        if (r.role != "self_attn" && r.role != "cross_attn") continue;
        if (r.shape.size() != 4 || r.shape[0] != r.heads)
            throw ShapeError(fmt::format("record '{}': attention maps are heads x h x w x keys, got {}", r.name,
                                         shape_string(r.shape)));
        auto t = io::record_tensor<double>(r);
        if (r.role == "self_attn") {
            const SelfAttnMap m{r.heads, r.shape[1], r.shape[2], std::move(t)};
            m.validate();
            result.records.push_back(
                io::make_record(r.name + "/pooled", "pooled_self_attn", pool_self_attention(m), r.group, r.heads));
            ++pooled;
        } else {
            const CrossAttnMap m{r.heads, r.shape[1], r.shape[2], std::move(t)};
            m.validate();
            result.records.push_back(
                io::make_record(r.name + "/folded", "folded_cross_attn", fold_cross_attention(m), r.group, r.heads));
            ++folded;
        }
    }
    if (result.records.empty()) throw DataError(fmt::format("{} holds no attention maps", o.input));
    io::write_container(result, o.output);
    fmt::print(out, "pooled {} self-attention and folded {} cross-attention maps into {}\n", pooled, folded, o.output);
    return exit_ok;
}

inline int cmd_train_toy(const Options& o, std::ostream& out) {
    RefinerConfig config = toy_config();
    if (!o.config.empty()) config = io::config_from_json(io::read_json(o.config), config);
    if (!o.injection.empty()) config.injection_mode = parse_injection_mode(o.injection);
    if (!o.head.empty()) config.head_mode = parse_head_mode(o.head);
    config.validate();
    SceneOptions scene;
    scene.height = config.image_height;
    scene.width = config.image_width;
    scene.classes = config.seg_classes;
    const auto data = prepare_set(config, make_synthetic_set(o.samples, 100, scene, "train"));
    const auto val = prepare_set(config, make_synthetic_set(16, 200, scene, "val"));
    const auto result = train_toy(config, data, o.steps, o.lr, o.seed);
    const auto dir = ensure_dir(o.out);
    std::string csv = "step,total,ssi,dice,focal\n";
    for (std::size_t i = 0; i < result.history.size(); ++i) {
        const auto& h = result.history[i];
        csv += fmt::format("{},{},{},{},{}\n", i, h.total, h.ssi, h.dice, h.focal);
    }
    io::write_text(dir / "loss_history.csv", csv);
    io::write_container(io::params_container(result.params), dir / "params.pdrc");
    io::write_text(dir / "config.json", io::config_json(config).dump(2) + "\n");
    const double first = result.history.front().total, last = result.history.back().total;
    fmt::print(out, "{} steps, lr {}, seed {}: total loss {:.6g} -> {:.6g} ({:.1f} % decrease)\n", o.steps, o.lr,
               o.seed, first, last, 100.0 * (1.0 - last / first));
    fmt::print(out, "validation delta1 {} %\n", percent(validation_delta1(config, result.params, val)));
    fmt::print(out, "wrote loss_history.csv, params.pdrc and config.json to {}\n", dir.string());
    return exit_ok;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
    GradSuiteOptions so;
    so.refiner = !o.skip_refiner;
    const auto checks = gradient_suite(o.seed, so);
    bool ok = true;
    for (const auto& c : checks) {
        fmt::print(out, "{:<40} max rel error {:.3e}  (tolerance {:.0e})  {}\n", c.name, c.max_rel_error, c.tolerance,
                   c.passed() ? "ok" : "FAIL");
        ok = ok && c.passed();
    }
    fmt::print(out, "{} of {} components within tolerance\n",
               std::count_if(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); }), checks.size());
    return ok ? exit_ok : exit_check_failed;
}

inline int cmd_bench(const Options& o, std::ostream& out) {
    if (o.runs < 1) throw Error("bench: --runs must be >= 1");
    std::string csv = "resolution,runs,median_ms,iqr_ms,mean_ms,stddev_ms\n";
    fmt::print(out, "{:>10} {:>6} {:>11} {:>9} {:>9} {:>10}\n", "resolution", "runs", "median_ms", "iqr_ms", "mean_ms",
               "stddev_ms");
    for (const std::size_t r : o.resolutions) {
        RefinerConfig config = toy_config();
        if (!o.injection.empty()) config.injection_mode = parse_injection_mode(o.injection);
        config.image_height = config.image_width = r;
        config.validate();
        SceneOptions scene;
        scene.height = scene.width = r;
        scene.classes = config.seg_classes;
        const auto sample = prepare_sample(config, make_synthetic_set(1, o.seed, scene, "bench").front());
        const auto params = init_params<double>(config, o.seed);
        std::vector<double> ms;
        double sink = 0.0;
        for (std::size_t k = 0; k < o.warmup + o.runs; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto res = refine(config, sample.inputs, params);
            const auto t1 = std::chrono::steady_clock::now();
            sink += res.depth[0];
            if (k >= o.warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        const auto s = box_stats(ms);
        double mean = 0.0, var = 0.0;
        for (auto v : ms) mean += v;
        mean /= static_cast<double>(ms.size());
        for (auto v : ms) var += (v - mean) * (v - mean);
        const double sd = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
        const std::string res_name = fmt::format("{}x{}", r, r);
        fmt::print(out, "{:>10} {:>6} {:>11.3f} {:>9.3f} {:>9.3f} {:>10.3f}\n", res_name, ms.size(), s.median, s.iqr,
                   mean, sd);
        csv += fmt::format("{},{},{},{},{},{}\n", res_name, ms.size(), s.median, s.iqr, mean, sd);
        if (!std::isfinite(sink)) throw NumericError("bench: refiner produced a non-finite output");
    }
    if (!o.bench_out.empty()) {
        io::write_text(o.bench_out, csv);
        fmt::print(out, "wrote {}\n", o.bench_out);
    }
    return exit_ok;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on usage
/// errors, 2 on data errors (with causes on `err`) and 3 when gradcheck
/// finds a component out of tolerance.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    detail::Options o;
    CLI::App app{"Evaluation, combination and toy-refiner tools for affine-invariant depth maps", "affdepth"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    auto add_out = [&](CLI::App* sub) {
        sub->add_option("-o,--out", o.out, fmt::format("Output directory (default ${} or .)", out_dir_env));
    };
    auto add_jobs = [&](CLI::App* sub) {
        sub->add_option("-j,--jobs", o.jobs, "Worker threads; never changes results")->check(CLI::Range(1, 1024));
    };
    const auto space_check = CLI::IsMember({"depth", "disparity"});

    auto* evaluate = app.add_subcommand("evaluate", "Score a prediction directory against a manifest");
    evaluate->add_option("-m,--manifest", o.manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("-p,--predictions", o.predictions, "Directory of <id>.pfm predictions")
        ->required()
        ->check(CLI::ExistingDirectory);
    evaluate->add_option("--method", o.method, "Method name (default: prediction directory name)");
    evaluate->add_option("--prediction-space", o.prediction_space,
                         "Space the predictions are stored in; converted to the manifest's space")
        ->check(space_check);
    evaluate->add_flag("--run-metadata", o.run_metadata, "Add a run header (timing) to the JSON report");
    add_out(evaluate);
    add_jobs(evaluate);

    auto* combine = app.add_subcommand("combine", "Pixel-wise average of two prediction directories");
    combine->add_option("-m,--manifest", o.manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
    combine->add_option("--a", o.pred_a, "First prediction directory")->required()->check(CLI::ExistingDirectory);
    combine->add_option("--b", o.pred_b, "Second prediction directory")->required()->check(CLI::ExistingDirectory);
    combine->add_option("--method", o.method, "Name of the combined method (default pixel_average)");
    combine->add_option("--prediction-space", o.prediction_space, "Space both inputs are stored in")
        ->check(space_check);
    combine->add_flag("--run-metadata", o.run_metadata, "Add a run header (timing) to the JSON report");
    add_out(combine);
    add_jobs(combine);

    auto* oracle = app.add_subcommand("oracle", "Per-image best of two reports, with selection fractions");
    oracle->add_option("--a", o.report_a, "First report (.csv or .json)")->required()->check(CLI::ExistingFile);
    oracle->add_option("--b", o.report_b, "Second report (.csv or .json)")->required()->check(CLI::ExistingFile);
    oracle->add_option("--criterion", o.criterion, "Selection criterion")
        ->check(CLI::IsMember({"delta1", "absrel", "both"}));
    add_out(oracle);

    auto* rank = app.add_subcommand("rank", "Average rank over (dataset, metric) columns");
    rank->add_option("reports", o.reports, "Report files, one per (method, dataset)")
        ->required()
        ->check(CLI::ExistingFile);
    rank->add_option("--ties", o.ties, "Tie rule")->check(CLI::IsMember({"competition", "average"}));
    rank->add_option("--csv", o.rank_out, "Also write the rank table as CSV");

    auto* categories = app.add_subcommand("categories", "Per-category box statistics and an SVG boxplot");
    categories->add_option("-r,--report", o.report, "Report with categories (.json)")
        ->required()
        ->check(CLI::ExistingFile);
    categories->add_option("--metric", o.metric, "Metric to summarise")->check(CLI::IsMember({"absrel", "delta1"}));
    categories->add_option("--title", o.title, "Plot title");
    add_out(categories);

    auto* pool = app.add_subcommand("pool-attn", "Pool self-attention and fold cross-attention maps of a container");
    pool->add_option("-i,--input", o.input, "Raster container with attention maps")
        ->required()
        ->check(CLI::ExistingFile);
    pool->add_option("--output", o.output, "Container to write")->required();

    auto* train = app.add_subcommand("train-toy", "Train the toy refiner on the bundled synthetic scenes");
    train->add_option("--config", o.config, "Refiner configuration (JSON); defaults to the toy setup")
        ->check(CLI::ExistingFile);
    train->add_option("--steps", o.steps, "Gradient steps")->check(CLI::PositiveNumber);
    train->add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber);
    train->add_option("--seed", o.seed, "Parameter initialisation seed");
    train->add_option("--samples", o.samples, "Training scenes")->check(CLI::PositiveNumber);
    train->add_option("--injection", o.injection, "Preimage injection")->check(CLI::IsMember({"stagewise", "block"}));
    train->add_option("--head", o.head, "Depth loss target")->check(CLI::IsMember({"pixel", "latent_surrogate"}));
    add_out(train);

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable component");
    grad->add_option("--seed", o.seed, "Seed of the random test cases");
    grad->add_flag("--skip-refiner", o.skip_refiner, "Leave out the (slow) full refiner checks");

    auto* bench = app.add_subcommand("bench", "Wall time of one refiner forward pass per resolution");
    bench->add_option("--resolutions", o.resolutions, "Square image sizes, comma separated")
        ->delimiter(',')
        ->check(CLI::PositiveNumber);
    bench->add_option("--runs", o.runs, "Timed runs per resolution")->check(CLI::PositiveNumber);
    bench->add_option("--warmup", o.warmup, "Untimed runs before timing");
    bench->add_option("--seed", o.seed, "Scene and parameter seed");
    bench->add_option("--injection", o.injection, "Preimage injection")->check(CLI::IsMember({"stagewise", "block"}));
    bench->add_option("--csv", o.bench_out, "Also write the table as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*evaluate) return detail::cmd_evaluate(o, out);
        if (*combine) return detail::cmd_combine(o, out);
        if (*oracle) return detail::cmd_oracle(o, out);
        if (*rank) return detail::cmd_rank(o, out);
        if (*categories) return detail::cmd_categories(o, out);
        if (*pool) return detail::cmd_pool_attn(o, out);
        if (*train) return detail::cmd_train_toy(o, out);
        if (*grad) return detail::cmd_gradcheck(o, out);
        if (*bench) return detail::cmd_bench(o, out);
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return exit_data;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_data;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return exit_data;
    }
    err << "error: no subcommand\n";
    return exit_usage;
}

}  // namespace affdepth::cli
