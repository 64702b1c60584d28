#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedimt/fl.hpp"

namespace fedimt {

class OutputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string format_sig9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::size_t report_num_classes(const ExperimentReport& rep) {
    return rep.records.empty() ? 0 : rep.records.front().global_ratio.size();
}

/// Header: round,dropped,T_j,T_G,acc,acc_minority,loss,rhat_0..rhat_{Q-1}.
/// Missing values are empty fields.
inline std::string metrics_csv(const ExperimentReport& rep) {
    const std::size_t q = report_num_classes(rep);
    std::ostringstream out;
    out << "round,dropped,T_j,T_G,acc,acc_minority,loss";
    for (std::size_t c = 0; c < q; ++c) out << ",rhat_" << c;
    out << '\n';
    auto opt = [](const std::optional<double>& v) { return v ? format_sig9(*v) : std::string(); };
    for (const auto& r : rep.records) {
        out << r.round << ',' << (r.dropped ? 1 : 0) << ',' << opt(r.t_round) << ',' << opt(r.t_global) << ','
            << format_sig9(r.accuracy) << ',' << opt(r.minority_accuracy) << ',' << opt(r.train_loss);
        for (std::size_t c = 0; c < q; ++c) {
            out << ',';
            if (c < r.observer_ratio.size()) out << format_sig9(r.observer_ratio[c]);
        }
        out << '\n';
    }
    return out.str();
}

namespace detail {
inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
inline std::optional<double> opt_from(const nlohmann::ordered_json& j) {
    return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
}  // namespace detail

inline nlohmann::ordered_json report_to_json(const ExperimentReport& rep) {
    using nlohmann::ordered_json;
    using detail::opt_json;
    ordered_json j;
    j["seed"] = rep.seed;
    ordered_json cfg = ordered_json::object();
    for (const auto& [k, v] : rep.config_echo) cfg[k] = v;
    j["config"] = cfg;
    j["summary"] = {
        {"final_accuracy", rep.summary.final_accuracy},
        {"final_minority_accuracy", opt_json(rep.summary.final_minority_accuracy)},
        {"mean_t_round", opt_json(rep.summary.mean_t_round)},
        {"mean_t_global", opt_json(rep.summary.mean_t_global)},
        {"drop_count", rep.summary.drop_count},
    };
    ordered_json rounds = ordered_json::array();
    for (const auto& r : rep.records) {
        rounds.push_back({
            {"round", r.round},
            {"selected", r.selected},
            {"skipped", r.skipped},
            {"estimated_counts", r.estimated_counts},
            {"round_ratio", r.round_ratio},
            {"true_round_ratio", r.true_round_ratio},
            {"observer_ratio", r.observer_ratio},
            {"global_ratio", r.global_ratio},
            {"class_weights", r.class_weights},
            {"t_round", opt_json(r.t_round)},
            {"t_global", opt_json(r.t_global)},
            {"similarity", opt_json(r.similarity)},
            {"dropped", r.dropped},
            {"estimator_fallback", r.estimator_fallback},
            {"accuracy", r.accuracy},
            {"minority_accuracy", opt_json(r.minority_accuracy)},
            {"train_loss", opt_json(r.train_loss)},
        });
    }
    j["rounds"] = rounds;
    return j;
}

inline ExperimentReport report_from_json(const nlohmann::ordered_json& j) {
    using detail::opt_from;
    ExperimentReport rep;
    rep.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("config").items()) rep.config_echo.emplace_back(k, v.get<std::string>());
    const auto& s = j.at("summary");
    rep.summary.final_accuracy = s.at("final_accuracy").get<double>();
    rep.summary.final_minority_accuracy = opt_from(s.at("final_minority_accuracy"));
    rep.summary.mean_t_round = opt_from(s.at("mean_t_round"));
    rep.summary.mean_t_global = opt_from(s.at("mean_t_global"));
    rep.summary.drop_count = s.at("drop_count").get<std::size_t>();
    for (const auto& r : j.at("rounds")) {
        RoundRecord rec;
        rec.round = r.at("round").get<std::size_t>();
        rec.selected = r.at("selected").get<std::vector<std::size_t>>();
        rec.skipped = r.at("skipped").get<std::vector<std::size_t>>();
        rec.estimated_counts = r.at("estimated_counts").get<std::vector<double>>();
        rec.round_ratio = r.at("round_ratio").get<std::vector<double>>();
        rec.true_round_ratio = r.at("true_round_ratio").get<std::vector<double>>();
        rec.observer_ratio = r.at("observer_ratio").get<std::vector<double>>();
        rec.global_ratio = r.at("global_ratio").get<std::vector<double>>();
        rec.class_weights = r.at("class_weights").get<std::vector<double>>();
        rec.t_round = opt_from(r.at("t_round"));
        rec.t_global = opt_from(r.at("t_global"));
        rec.similarity = opt_from(r.at("similarity"));
        rec.dropped = r.at("dropped").get<bool>();
        rec.estimator_fallback = r.at("estimator_fallback").get<bool>();
        rec.accuracy = r.at("accuracy").get<double>();
        rec.minority_accuracy = opt_from(r.at("minority_accuracy"));
        rec.train_loss = opt_from(r.at("train_loss"));
        rep.records.push_back(std::move(rec));
    }
    return rep;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw OutputError(path.string() + ": cannot open for writing");
    out << text;
    if (!out) throw OutputError(path.string() + ": write failed");
}

inline void write_metrics(const ExperimentReport& rep, const std::filesystem::path& csv_path,
                          const std::filesystem::path& json_path) {
    write_text_file(csv_path, metrics_csv(rep));
    write_text_file(json_path, report_to_json(rep).dump(2) + "\n");
}

inline ExperimentReport read_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw OutputError(json_path.string() + ": cannot open");
    return report_from_json(nlohmann::ordered_json::parse(in));
}

}  // namespace fedimt
