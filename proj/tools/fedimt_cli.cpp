// fedimt: run federated imbalance experiments from a config file.
//
//   fedimt run --config exp.cfg [--csv out.csv] [--json out.json]
//   fedimt sweep --config exp.cfg [--repeats N]
//   fedimt estimate-only --config exp.cfg [--from-round 10]
//   fedimt gen-data --config exp.cfg --out-dir DIR

#include <cstdio>
#include <exception>
#include <filesystem>
#include <future>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedimt/fedimt.hpp"

namespace fs = std::filesystem;
using namespace fedimt;

namespace {

fs::path with_seed_suffix(const fs::path& p, std::uint64_t seed) {
    fs::path out = p;
    out.replace_filename(p.stem().string() + ".seed" + std::to_string(seed) + p.extension().string());
    return out;
}

std::string opt9(const std::optional<double>& v) { return v ? format_sig9(*v) : std::string(); }

std::optional<double> window_mean(const ExperimentReport& rep, std::size_t from, bool global) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : rep.records) {
        const auto& v = global ? r.t_global : r.t_round;
        if (r.round >= from && v) {
            acc += *v;
            ++n;
        }
    }
    return n ? std::optional<double>(acc / static_cast<double>(n)) : std::nullopt;
}

void print_summary(const ExperimentReport& rep) {
    const auto& s = rep.summary;
    std::cout << "seed " << rep.seed << ": acc=" << format_sig9(s.final_accuracy)
              << " acc_minority=" << opt9(s.final_minority_accuracy) << " mean_T_j=" << opt9(s.mean_t_round)
              << " mean_T_G=" << opt9(s.mean_t_global) << " drops=" << s.drop_count << '\n';
}

int cmd_run(const ExperimentConfig& cfg, const std::optional<std::string>& csv, const std::optional<std::string>& json) {
    const ExperimentReport rep = run_configured(cfg, cfg.seed);
    write_metrics(rep, csv ? fs::path(*csv) : cfg.output_csv, json ? fs::path(*json) : cfg.output_json);
    print_summary(rep);
    return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, std::size_t repeats) {
    std::vector<std::future<ExperimentReport>> jobs;
    for (std::size_t i = 0; i < repeats; ++i) {
        const std::uint64_t seed = cfg.seed + i;
        jobs.push_back(std::async(std::launch::async, [&cfg, seed] { return run_configured(cfg, seed); }));
    }
    std::ostringstream agg;
    agg << "seed,final_acc,final_acc_minority,mean_T_j,mean_T_G,drops\n";
    double acc = 0.0;
    for (auto& job : jobs) {
        const ExperimentReport rep = job.get();
        write_metrics(rep, with_seed_suffix(cfg.output_csv, rep.seed), with_seed_suffix(cfg.output_json, rep.seed));
        print_summary(rep);
        const auto& s = rep.summary;
        agg << rep.seed << ',' << format_sig9(s.final_accuracy) << ',' << opt9(s.final_minority_accuracy) << ','
            << opt9(s.mean_t_round) << ',' << opt9(s.mean_t_global) << ',' << s.drop_count << '\n';
        acc += s.final_accuracy;
    }
    fs::path summary = cfg.output_csv;
    summary.replace_filename(cfg.output_csv.stem().string() + ".summary" + cfg.output_csv.extension().string());
    write_text_file(summary, agg.str());
    std::cout << "mean final acc over " << repeats << " seeds: " << format_sig9(acc / static_cast<double>(repeats))
              << "\nsummary: " << summary.string() << '\n';
    return 0;
}

int cmd_estimate(ExperimentConfig cfg, std::size_t from_round) {
    cfg.fl.algorithm = Algorithm::fedimt;
    const ExperimentReport rep = run_configured(cfg, cfg.seed);
    write_metrics(rep, cfg.output_csv, cfg.output_json);
    std::cout << "rounds " << from_round << ".." << cfg.fl.rounds << ": mean T_j=" << opt9(window_mean(rep, from_round, false))
              << " mean T_G=" << opt9(window_mean(rep, from_round, true)) << " drops=" << rep.summary.drop_count << '\n';
    return 0;
}

int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir) {
    const auto* syn = std::get_if<SyntheticSource>(&cfg.source);
    if (!syn) throw ConfigError("gen-data needs data.source = synthetic");
    auto [train, test] = load_datasets(cfg, cfg.seed);
    // shared affine map so train and test stay comparable
    double lo = train.features.data().front(), hi = lo;
    for (const auto* ds : {&train, &test}) {
        for (double v : ds->features.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    for (auto* ds : {&train, &test}) {
        for (auto& v : ds->features.data()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    }
    fs::create_directories(out_dir);
    write_idx(train, out_dir / "train-images.idx3-ubyte", out_dir / "train-labels.idx1-ubyte");
    write_idx(test, out_dir / "test-images.idx3-ubyte", out_dir / "test-labels.idx1-ubyte");
    std::cout << "wrote " << train.size() << " train / " << test.size() << " test samples to " << out_dir.string()
              << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Imbalance-aware federated learning experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> csv, json;
    std::size_t repeats = 0;
    std::size_t from_round = 10;
    std::string out_dir;

    auto* run = app.add_subcommand("run", "Run one experiment");
    run->add_option("--config", config_path, "Experiment config file")->required();
    run->add_option("--csv", csv, "Override output CSV path");
    run->add_option("--json", json, "Override output JSON path");

    auto* sweep = app.add_subcommand("sweep", "Repeat an experiment over consecutive seeds");
    sweep->add_option("--config", config_path, "Experiment config file")->required();
    sweep->add_option("--repeats", repeats, "Number of seeds (default: config repeats)");

    auto* est = app.add_subcommand("estimate-only", "Composition-estimation accuracy run (T_j / T_G)");
    est->add_option("--config", config_path, "Experiment config file")->required();
    est->add_option("--from-round", from_round, "First round of the reported averaging window");

    auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic dataset as IDX files");
    gen->add_option("--config", config_path, "Experiment config file")->required();
    gen->add_option("--out-dir", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        const ExperimentConfig cfg = parse_config(config_path);
        if (*run) return cmd_run(cfg, csv, json);
        if (*sweep) return cmd_sweep(cfg, repeats ? repeats : cfg.repeats);
        if (*est) return cmd_estimate(cfg, from_round);
        if (*gen) return cmd_gen_data(cfg, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
