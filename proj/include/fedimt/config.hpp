#pragma once

// Experiment configuration: a flat `key = value` file. '#' starts a comment,
// lists are comma separated, strings may be double-quoted. Every key must be
// known; every key may appear at most once.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <utility>
#include <variant>
#include <vector>

#include "fedimt/data.hpp"
#include "fedimt/fl.hpp"
#include "fedimt/idx.hpp"

namespace fedimt {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SyntheticSource {
    std::size_t classes = 10;
    std::size_t dim = 20;
    std::vector<std::size_t> train_counts;
    std::vector<std::size_t> test_counts;  // defaults to train_counts / 5
    double separation = 3.0;
    double scale = 1.0;
    double run_length = 1.0;
};

struct IdxSource {
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    std::size_t num_classes = 0;  // 0: infer from labels
};

struct ExperimentConfig {
    FlConfig fl;
    std::variant<SyntheticSource, IdxSource> source;
    std::optional<std::pair<std::filesystem::path, std::filesystem::path>> aux_files;
    std::uint64_t seed = 1;
    std::size_t repeats = 1;
    std::filesystem::path output_csv = "metrics.csv";
    std::filesystem::path output_json = "report.json";
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

struct ConfigLine {
    std::string key;
    std::string value;
    std::size_t line = 0;
};

class ValueReader {
public:
    ValueReader(const ConfigLine& l, const std::string& source) : l_(l), source_(source) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError(source_ + ":" + std::to_string(l_.line) + ": key '" + l_.key + "': " + what);
    }

    std::string str() const {
        std::string v = l_.value;
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
        if (v.empty()) fail("empty value");
        return v;
    }

    double real() const { return parse_real(str()); }

    std::size_t count() const { return parse_count(str()); }

    std::uint64_t u64() const {
        const std::string s = str();
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) fail("expected a non-negative integer, got '" + s + "'");
        return v;
    }

    bool boolean() const {
        const std::string s = str();
        if (s == "true") return true;
        if (s == "false") return false;
        fail("expected true or false, got '" + s + "'");
    }

    std::vector<std::size_t> counts() const {
        std::vector<std::size_t> out;
        std::stringstream ss(str());
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(parse_count(trim(item)));
        if (out.empty()) fail("expected a comma-separated list");
        return out;
    }

    template <typename E>
    E choice(std::initializer_list<std::pair<const char*, E>> options) const {
        const std::string s = str();
        std::string allowed;
        for (const auto& [name, val] : options) {
            if (s == name) return val;
            allowed += allowed.empty() ? name : std::string("|") + name;
        }
        fail("expected one of " + allowed + ", got '" + s + "'");
    }

private:
    double parse_real(const std::string& s) const {
        double v = 0.0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
            fail("expected a number, got '" + s + "'");
        }
        return v;
    }
    std::size_t parse_count(const std::string& s) const {
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) fail("expected a non-negative integer, got '" + s + "'");
        return v;
    }

    const ConfigLine& l_;
    const std::string& source_;
};

inline std::vector<ConfigLine> tokenize_config(std::istream& in, const std::string& source) {
    std::vector<ConfigLine> out;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        bool quoted = false;
        std::size_t cut = raw.size();
        for (std::size_t i = 0; i < raw.size(); ++i) {
            if (raw[i] == '"') quoted = !quoted;
            if (raw[i] == '#' && !quoted) {
                cut = i;
                break;
            }
        }
        const std::string line = trim(std::string_view(raw).substr(0, cut));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        ConfigLine cl{trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)), lineno};
        if (cl.key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": missing key");
        out.push_back(std::move(cl));
    }
    return out;
}

}  // namespace detail

/// Parses config text. Relative data paths resolve against `base_dir`.
inline ExperimentConfig parse_config_text(std::istream& in, const std::string& source_name,
                                          const std::filesystem::path& base_dir) {
    using detail::ValueReader;
    const auto lines = detail::tokenize_config(in, source_name);

    ExperimentConfig cfg;
    FlConfig& fl = cfg.fl;
    std::optional<std::string> data_source;
    SyntheticSource syn;
    IdxSource idx;
    std::optional<std::filesystem::path> aux_images, aux_labels;
    bool lr_given = false;
    std::vector<std::string> synthetic_keys, idx_keys;

    auto path = [&](const ValueReader& v) {
        std::filesystem::path p = v.str();
        return p.is_relative() ? base_dir / p : p;
    };

    using Handler = std::function<void(const ValueReader&)>;
    const std::map<std::string, Handler> handlers = {
        {"data.source", [&](const ValueReader& v) { data_source = v.choice<std::string>({{"synthetic", "synthetic"}, {"idx", "idx"}}); }},
        {"data.train_images", [&](const ValueReader& v) { idx.train_images = path(v); }},
        {"data.train_labels", [&](const ValueReader& v) { idx.train_labels = path(v); }},
        {"data.test_images", [&](const ValueReader& v) { idx.test_images = path(v); }},
        {"data.test_labels", [&](const ValueReader& v) { idx.test_labels = path(v); }},
        {"data.num_classes", [&](const ValueReader& v) { idx.num_classes = v.count(); }},
        {"data.aux_images", [&](const ValueReader& v) { aux_images = path(v); }},
        {"data.aux_labels", [&](const ValueReader& v) { aux_labels = path(v); }},
        {"synthetic.classes", [&](const ValueReader& v) { syn.classes = v.count(); }},
        {"synthetic.dim", [&](const ValueReader& v) { syn.dim = v.count(); }},
        {"synthetic.train_counts", [&](const ValueReader& v) { syn.train_counts = v.counts(); }},
        {"synthetic.test_counts", [&](const ValueReader& v) { syn.test_counts = v.counts(); }},
        {"synthetic.separation", [&](const ValueReader& v) { syn.separation = v.real(); }},
        {"synthetic.scale", [&](const ValueReader& v) { syn.scale = v.real(); }},
        {"synthetic.run_length", [&](const ValueReader& v) { syn.run_length = v.real(); }},
        {"clients", [&](const ValueReader& v) { fl.num_clients = v.count(); }},
        {"shards_per_client", [&](const ValueReader& v) { fl.shards_per_client = v.count(); }},
        {"selection_rate", [&](const ValueReader& v) { fl.selection_rate = v.real(); }},
        {"local_epochs", [&](const ValueReader& v) { fl.local_epochs = v.count(); }},
        {"batch_size", [&](const ValueReader& v) { fl.batch_size = v.count(); }},
        {"lr", [&](const ValueReader& v) { fl.lr = v.real(); lr_given = true; }},
        {"momentum", [&](const ValueReader& v) { fl.momentum = v.real(); }},
        {"rounds", [&](const ValueReader& v) { fl.rounds = v.count(); }},
        {"strategy", [&](const ValueReader& v) {
             fl.strategy = v.choice<Strategy>({{"fedavg", Strategy::fedavg}, {"fedprox", Strategy::fedprox}, {"fednova", Strategy::fednova}});
         }},
        {"prox_mu", [&](const ValueReader& v) { fl.prox_mu = v.real(); }},
        {"algorithm", [&](const ValueReader& v) {
             fl.algorithm = v.choice<Algorithm>({{"baseline", Algorithm::baseline}, {"fedimt", Algorithm::fedimt}});
         }},
        {"loss", [&](const ValueReader& v) {
             fl.baseline_loss = v.choice<LossKind>({{"ce", LossKind::plain_ce}, {"focal", LossKind::focal}});
         }},
        {"focal_gamma", [&](const ValueReader& v) { fl.focal_gamma = v.real(); }},
        {"n_latest", [&](const ValueReader& v) { fl.n_latest = v.count(); }},
        {"arrivals_per_round", [&](const ValueReader& v) { fl.arrivals_per_round = v.count(); }},
        {"drop_threshold", [&](const ValueReader& v) { fl.drop_threshold = v.real(); }},
        {"beta", [&](const ValueReader& v) { fl.beta = v.real(); }},
        {"hidden_layers", [&](const ValueReader& v) { fl.hidden_layers = v.counts(); }},
        {"aux_per_class", [&](const ValueReader& v) { fl.aux_per_class = v.count(); }},
        {"dynamic_gain", [&](const ValueReader& v) { fl.dynamic_gain = v.boolean(); }},
        {"estimator.denom_epsilon", [&](const ValueReader& v) { fl.estimator.denom_epsilon = v.real(); }},
        {"estimator.confidence_floor", [&](const ValueReader& v) { fl.estimator.confidence_floor = v.real(); }},
        {"estimator.scale_cal", [&](const ValueReader& v) { fl.estimator.scale_cal = v.real(); }},
        {"observer.history_weight", [&](const ValueReader& v) { fl.observer.history = v.real(); }},
        {"observer.observation_weight", [&](const ValueReader& v) { fl.observer.observation = v.real(); }},
        {"seed", [&](const ValueReader& v) { cfg.seed = v.u64(); }},
        {"repeats", [&](const ValueReader& v) { cfg.repeats = v.count(); }},
        {"output.csv", [&](const ValueReader& v) { cfg.output_csv = v.str(); }},
        {"output.json", [&](const ValueReader& v) { cfg.output_json = v.str(); }},
    };

    std::map<std::string, std::size_t> seen;
    for (const auto& line : lines) {
        const ValueReader reader(line, source_name);
        const auto it = handlers.find(line.key);
        if (it == handlers.end()) reader.fail("unknown key");
        if (auto [pos, fresh] = seen.emplace(line.key, line.line); !fresh) {
            reader.fail("duplicate key (first set on line " + std::to_string(pos->second) + ")");
        }
        if (line.key.rfind("synthetic.", 0) == 0) synthetic_keys.push_back(line.key);
        if (line.key.rfind("data.", 0) == 0 && line.key != "data.source" && line.key.rfind("data.aux_", 0) != 0) {
            idx_keys.push_back(line.key);
        }
        try {
            it->second(reader);
        } catch (const std::invalid_argument& e) {
            reader.fail(e.what());
        }
    }

    auto fail = [&](const std::string& what) { throw ConfigError(source_name + ": " + what); };
    if (!data_source) fail("missing data source (set data.source = synthetic | idx)");
    if (*data_source == "synthetic") {
        if (!idx_keys.empty()) fail("key '" + idx_keys.front() + "' is not valid with data.source = synthetic");
        if (syn.train_counts.empty()) syn.train_counts.assign(syn.classes, 1000);
        if (syn.train_counts.size() != syn.classes) fail("synthetic.train_counts must have synthetic.classes entries");
        if (syn.test_counts.empty()) {
            for (auto c : syn.train_counts) syn.test_counts.push_back(std::max<std::size_t>(1, c / 5));
        }
        if (syn.test_counts.size() != syn.classes) fail("synthetic.test_counts must have synthetic.classes entries");
        if (syn.classes < 2) fail("synthetic.classes must be >= 2");
        if (syn.dim == 0) fail("synthetic.dim must be >= 1");
        if (!(syn.run_length >= 1.0)) fail("synthetic.run_length must be >= 1");
        if (!(syn.scale >= 0.0)) fail("synthetic.scale must be >= 0");
        cfg.source = syn;
    } else {
        if (!synthetic_keys.empty()) fail("key '" + synthetic_keys.front() + "' is not valid with data.source = idx");
        for (const auto* p : {&idx.train_images, &idx.train_labels, &idx.test_images, &idx.test_labels}) {
            if (p->empty()) fail("data.source = idx needs data.train_images, data.train_labels, data.test_images, data.test_labels");
            if (!std::filesystem::exists(*p)) fail("file not found: " + p->string());
        }
        cfg.source = idx;
    }
    if (aux_images.has_value() != aux_labels.has_value()) fail("data.aux_images and data.aux_labels go together");
    if (aux_images) {
        for (const auto& p : {*aux_images, *aux_labels}) {
            if (!std::filesystem::exists(p)) fail("file not found: " + p.string());
        }
        cfg.aux_files = std::make_pair(*aux_images, *aux_labels);
    }
    if (fl.n_latest && !lr_given) fl.lr = 0.002;
    if (cfg.repeats == 0) fail("repeats must be >= 1");
    try {
        validate(fl);
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    return parse_config_text(in, path.string(), path.parent_path());
}

/// Effective settings, defaults included, as ordered key/value pairs.
inline std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg) {
    using detail::format_number;
    std::vector<std::pair<std::string, std::string>> e;
    auto list = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    if (const auto* syn = std::get_if<SyntheticSource>(&cfg.source)) {
        e.emplace_back("data.source", "synthetic");
        e.emplace_back("synthetic.classes", std::to_string(syn->classes));
        e.emplace_back("synthetic.dim", std::to_string(syn->dim));
        e.emplace_back("synthetic.train_counts", list(syn->train_counts));
        e.emplace_back("synthetic.test_counts", list(syn->test_counts));
        e.emplace_back("synthetic.separation", format_number(syn->separation));
        e.emplace_back("synthetic.scale", format_number(syn->scale));
        e.emplace_back("synthetic.run_length", format_number(syn->run_length));
    } else {
        const auto& idx = std::get<IdxSource>(cfg.source);
        e.emplace_back("data.source", "idx");
        e.emplace_back("data.train_images", idx.train_images.string());
        e.emplace_back("data.train_labels", idx.train_labels.string());
        e.emplace_back("data.test_images", idx.test_images.string());
        e.emplace_back("data.test_labels", idx.test_labels.string());
        e.emplace_back("data.num_classes", std::to_string(idx.num_classes));
    }
    if (cfg.aux_files) {
        e.emplace_back("data.aux_images", cfg.aux_files->first.string());
        e.emplace_back("data.aux_labels", cfg.aux_files->second.string());
    }
    const FlConfig& fl = cfg.fl;
    e.emplace_back("clients", std::to_string(fl.num_clients));
    e.emplace_back("shards_per_client", std::to_string(fl.shards_per_client));
    e.emplace_back("selection_rate", format_number(fl.selection_rate));
    e.emplace_back("local_epochs", std::to_string(fl.local_epochs));
    e.emplace_back("batch_size", std::to_string(fl.batch_size));
    e.emplace_back("lr", format_number(fl.lr));
    e.emplace_back("momentum", format_number(fl.momentum));
    e.emplace_back("rounds", std::to_string(fl.rounds));
    e.emplace_back("strategy", to_string(fl.strategy));
    e.emplace_back("prox_mu", format_number(fl.prox_mu));
    e.emplace_back("algorithm", to_string(fl.algorithm));
    e.emplace_back("loss", fl.baseline_loss == LossKind::focal ? "focal" : "ce");
    e.emplace_back("focal_gamma", format_number(fl.focal_gamma));
    if (fl.n_latest) e.emplace_back("n_latest", std::to_string(*fl.n_latest));
    if (fl.arrivals_per_round) e.emplace_back("arrivals_per_round", std::to_string(*fl.arrivals_per_round));
    e.emplace_back("drop_threshold", format_number(fl.drop_threshold));
    e.emplace_back("beta", format_number(fl.beta));
    e.emplace_back("hidden_layers", list(fl.hidden_layers));
    e.emplace_back("aux_per_class", std::to_string(fl.aux_per_class));
    e.emplace_back("dynamic_gain", fl.dynamic_gain ? "true" : "false");
    e.emplace_back("estimator.denom_epsilon", format_number(fl.estimator.denom_epsilon));
    e.emplace_back("estimator.confidence_floor", format_number(fl.estimator.confidence_floor));
    e.emplace_back("estimator.scale_cal", format_number(fl.estimator.scale_cal));
    if (fl.observer.history) e.emplace_back("observer.history_weight", format_number(*fl.observer.history));
    if (fl.observer.observation) e.emplace_back("observer.observation_weight", format_number(*fl.observer.observation));
    e.emplace_back("seed", std::to_string(cfg.seed));
    e.emplace_back("repeats", std::to_string(cfg.repeats));
    return e;
}

inline SyntheticSpec synthetic_spec(const SyntheticSource& src, const std::vector<std::size_t>& counts,
                                    std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_classes = src.classes;
    spec.feature_dim = src.dim;
    spec.means = random_cluster_means(src.classes, src.dim, src.separation, seed);
    spec.scales.assign(src.classes, src.scale);
    spec.counts = counts;
    spec.run_length = src.run_length;
    return spec;
}

/// Train/test split for a config and seed. Synthetic splits share class
/// centers and differ in draws.
inline std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (const auto* syn = std::get_if<SyntheticSource>(&cfg.source)) {
        Dataset train = gen_synthetic(synthetic_spec(*syn, syn->train_counts, seed), derive_seed(seed, {stream::train_data}));
        Dataset test = gen_synthetic(synthetic_spec(*syn, syn->test_counts, seed), derive_seed(seed, {stream::test_data}));
        return {std::move(train), std::move(test)};
    }
    const auto& idx = std::get<IdxSource>(cfg.source);
    Dataset train = load_idx(idx.train_images, idx.train_labels, idx.num_classes);
    Dataset test = load_idx(idx.test_images, idx.test_labels, idx.num_classes == 0 ? train.num_classes : idx.num_classes);
    return {std::move(train), std::move(test)};
}

inline FederatedData prepare_federation(const ExperimentConfig& cfg, std::uint64_t seed) {
    auto [train, test] = load_datasets(cfg, seed);
    std::optional<AuxiliarySet> aux;
    if (cfg.aux_files) {
        aux = auxiliary_from_dataset(load_idx(cfg.aux_files->first, cfg.aux_files->second, train.num_classes));
    }
    return federate(std::move(train), std::move(test), cfg.fl, seed, std::move(aux));
}

inline ExperimentReport run_configured(const ExperimentConfig& cfg, std::uint64_t seed) {
    ExperimentReport rep = run_experiment(cfg.fl, prepare_federation(cfg, seed), seed);
    ExperimentConfig echo_cfg = cfg;
    echo_cfg.seed = seed;
    rep.config_echo = config_echo(echo_cfg);
    return rep;
}

}  // namespace fedimt
