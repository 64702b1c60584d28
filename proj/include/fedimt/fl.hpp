#pragma once

// In-process federated rounds: client selection, local SGD (plain or
// proximal), aggregation (weighted mean or normalized averaging), and the
// imbalance-aware round that estimates the round's class composition, tracks
// it, and re-weights the loss broadcast for the next round.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/data.hpp"
#include "fedimt/estimator.hpp"
#include "fedimt/metrics.hpp"
#include "fedimt/nn.hpp"
#include "fedimt/observer.hpp"
#include "fedimt/rng.hpp"

namespace fedimt {

enum class Strategy { fedavg, fedprox, fednova };
enum class Algorithm { baseline, fedimt };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedprox: return "fedprox";
        case Strategy::fednova: return "fednova";
    }
    return "?";
}

inline std::string to_string(Algorithm a) { return a == Algorithm::fedimt ? "fedimt" : "baseline"; }

struct FlConfig {
    std::size_t num_clients = 50;
    std::size_t shards_per_client = 3;
    double selection_rate = 0.3;
    std::size_t local_epochs = 5;
    std::size_t batch_size = 32;
    double lr = 0.001;
    double momentum = 0.9;
    std::size_t rounds = 50;
    Strategy strategy = Strategy::fedavg;
    double prox_mu = 0.0;
    Algorithm algorithm = Algorithm::baseline;
    LossKind baseline_loss = LossKind::plain_ce;  // plain_ce or focal
    double focal_gamma = 2.0;
    std::optional<std::size_t> n_latest;
    std::optional<std::size_t> arrivals_per_round;
    double drop_threshold = 0.5;
    double beta = 0.999;
    std::vector<std::size_t> hidden_layers{32, 16};
    std::size_t aux_per_class = 128;  // 4 batches of 32
    EstimatorParams estimator;
    ObserverCoefficients observer;
    bool dynamic_gain = false;
};

inline std::size_t selection_size(std::size_t num_clients, double rate) {
    return static_cast<std::size_t>(std::llround(rate * static_cast<double>(num_clients)));
}

inline void validate(const FlConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("FlConfig: " + m); };
    if (c.num_clients == 0) fail("num_clients must be >= 1");
    if (c.shards_per_client == 0) fail("shards_per_client must be >= 1");
    if (!(c.selection_rate > 0.0 && c.selection_rate <= 1.0)) fail("selection_rate must be in (0,1]");
    if (selection_size(c.num_clients, c.selection_rate) < 1) fail("selection_rate * num_clients rounds to 0");
    if (c.local_epochs == 0) fail("local_epochs must be >= 1");
    if (c.batch_size == 0) fail("batch_size must be >= 1");
    if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) fail("lr must be >= 0");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum must be in [0,1)");
    if (!(c.prox_mu >= 0.0)) fail("prox_mu must be >= 0");
    if (c.baseline_loss == LossKind::class_balanced) fail("baseline loss must be ce or focal");
    if (!(c.focal_gamma >= 0.0)) fail("focal_gamma must be >= 0");
    if (c.n_latest && *c.n_latest == 0) fail("n_latest must be >= 1");
    if (!(c.drop_threshold >= 0.0 && c.drop_threshold <= 1.0)) fail("drop_threshold must be in [0,1]");
    if (!(c.beta >= 0.0 && c.beta < 1.0)) fail("beta must be in [0,1)");
    if (c.aux_per_class == 0) fail("aux_per_class must be >= 1");
    for (auto h : c.hidden_layers) {
        if (h == 0) fail("hidden layer width must be >= 1");
    }
    if (!(c.estimator.denom_epsilon > 0.0)) fail("estimator denom_epsilon must be > 0");
    if (!(c.estimator.scale_cal > 0.0)) fail("estimator scale_cal must be > 0");
}

/// Uniform draw without replacement of round(rate * num_clients) ids, sorted.
inline std::vector<std::size_t> select_clients(std::size_t num_clients, double rate, std::size_t round,
                                               std::uint64_t seed) {
    const std::size_t n = std::clamp<std::size_t>(selection_size(num_clients, rate), 1, num_clients);
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {stream::select, round}));
    for (std::size_t i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(n);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// What a client sends back. Nothing here identifies individual samples.
struct ClientUpdate {
    std::size_t client_id = 0;
    MlpModel model;
    std::size_t sample_count = 0;
    std::size_t local_steps = 0;
};

struct LocalResult {
    ClientUpdate update;
    double mean_loss = 0.0;  // simulation diagnostic, not part of the upload
};

inline std::size_t local_step_count(std::size_t samples, std::size_t batch_size, std::size_t epochs) {
    return epochs * ((samples + batch_size - 1) / batch_size);
}

/// E epochs of shuffled mini-batch SGD from the broadcast model. The final
/// partial batch of each epoch is kept. Returns nullopt for an empty slice.
inline std::optional<LocalResult> local_update(std::size_t client_id, const TrainingSlice& slice,
                                               const MlpModel& global, const FlConfig& config, const LossSpec& loss,
                                               std::uint64_t shuffle_seed) {
    if (slice.empty()) return std::nullopt;
    LocalResult out;
    out.update.client_id = client_id;
    out.update.model = global;
    out.update.sample_count = slice.size();
    MlpModel& model = out.update.model;
    OptState opt = make_opt_state(model, config.lr, config.momentum);
    const bool proximal = config.strategy == Strategy::fedprox;

    Rng rng(shuffle_seed);
    std::vector<std::size_t> order = slice.rows;
    std::vector<std::size_t> labels;
    double loss_sum = 0.0;
    for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const std::span<const std::size_t> rows(order.data() + start, end - start);
            const Matrix batch = gather_rows(slice.source->features, rows);
            labels.clear();
            for (auto r : rows) labels.push_back(slice.source->labels[r]);
            double batch_loss = 0.0;
            Gradients g = loss_gradients(model, batch, labels, loss, &batch_loss);
            if (proximal) {
                for (std::size_t l = 0; l < g.weights.size(); ++l) {
                    auto& gw = g.weights[l].data();
                    const auto& w = model.weights[l].data();
                    const auto& w0 = global.weights[l].data();
                    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += config.prox_mu * (w[i] - w0[i]);
                    auto& gb = g.biases[l];
                    for (std::size_t i = 0; i < gb.size(); ++i) {
                        gb[i] += config.prox_mu * (model.biases[l][i] - global.biases[l][i]);
                    }
                }
            }
            sgd_step(model, g, opt);
            loss_sum += batch_loss;
            ++out.update.local_steps;
        }
    }
    out.mean_loss = loss_sum / static_cast<double>(out.update.local_steps);
    return out;
}

/// Aggregation weights n_k / sum(n), in update order.
inline std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates) {
    double total = 0.0;
    for (const auto& u : updates) total += static_cast<double>(u.sample_count);
    std::vector<double> p;
    for (const auto& u : updates) p.push_back(static_cast<double>(u.sample_count) / total);
    return p;
}

namespace detail {
template <typename Fn>
void for_each_param(MlpModel& m, Fn&& fn) {
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        fn(l, true, std::span<double>(m.weights[l].data()));
        fn(l, false, std::span<double>(m.biases[l]));
    }
}
inline std::span<const double> param_view(const MlpModel& m, std::size_t l, bool is_weight) {
    return is_weight ? std::span<const double>(m.weights[l].data()) : std::span<const double>(m.biases[l]);
}
}  // namespace detail

/// fedavg / fedprox: sum_k p_k w_k. fednova: w + tau_eff * sum_k p_k (w_k - w) / steps_k
/// with tau_eff = sum_k p_k steps_k.
inline MlpModel aggregate(std::span<const ClientUpdate> updates, const MlpModel& global, Strategy strategy) {
    if (updates.empty()) throw std::invalid_argument("aggregate: no client updates");
    for (const auto& u : updates) {
        if (u.sample_count == 0) throw std::invalid_argument("aggregate: client update with zero samples");
        if (u.model.layer_sizes != global.layer_sizes) throw std::invalid_argument("aggregate: model shape mismatch");
    }
    const std::vector<double> p = aggregation_weights(updates);
    MlpModel out = global;
    if (strategy == Strategy::fednova) {
        double tau_eff = 0.0;
        for (std::size_t k = 0; k < updates.size(); ++k) {
            if (updates[k].local_steps == 0) throw std::invalid_argument("aggregate: fednova needs local_steps >= 1");
            tau_eff += p[k] * static_cast<double>(updates[k].local_steps);
        }
        detail::for_each_param(out, [&](std::size_t l, bool is_w, std::span<double> dst) {
            const auto base = detail::param_view(global, l, is_w);
            std::vector<double> dir(dst.size(), 0.0);
            for (std::size_t k = 0; k < updates.size(); ++k) {
                const auto wk = detail::param_view(updates[k].model, l, is_w);
                const double c = p[k] / static_cast<double>(updates[k].local_steps);
                for (std::size_t i = 0; i < dst.size(); ++i) dir[i] += c * (wk[i] - base[i]);
            }
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = base[i] + tau_eff * dir[i];
        });
        return out;
    }
    detail::for_each_param(out, [&](std::size_t l, bool is_w, std::span<double> dst) {
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t k = 0; k < updates.size(); ++k) {
            const auto wk = detail::param_view(updates[k].model, l, is_w);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += p[k] * wk[i];
        }
    });
    return out;
}

/// Everything a federation needs before round 1: the global training set (for
/// ground truth only), the held-out test split, the partitioned clients and
/// the server's auxiliary probe set.
struct FederatedData {
    Dataset train;
    Dataset test;
    std::vector<ClientDataset> clients;
    AuxiliarySet aux;
};

inline FederatedData federate(Dataset train, Dataset test, const FlConfig& config, std::uint64_t seed,
                              std::optional<AuxiliarySet> external_aux = std::nullopt) {
    validate(train);
    validate(test);
    if (train.num_classes != test.num_classes || train.feature_dim() != test.feature_dim()) {
        throw std::invalid_argument("federate: train/test shape mismatch");
    }
    FederatedData fd;
    fd.clients = shard_partition(train, config.num_clients, config.shards_per_client, seed);
    fd.aux = external_aux ? std::move(*external_aux) : sample_auxiliary(train, config.aux_per_class, seed);
    if (fd.aux.num_classes() != train.num_classes) throw std::invalid_argument("federate: auxiliary class count mismatch");
    fd.train = std::move(train);
    fd.test = std::move(test);
    return fd;
}

struct RoundRecord {
    std::size_t round = 0;
    std::vector<std::size_t> selected;
    std::vector<std::size_t> skipped;          // selected clients with no data in scope
    std::vector<double> estimated_counts;      // N-hat, empty when not estimated
    std::vector<double> round_ratio;           // R^j from the estimate
    std::vector<double> true_round_ratio;      // oracle composition of this round's training data
    std::vector<double> observer_ratio;        // R-hat after this round
    std::vector<double> global_ratio;          // oracle composition of all clients' in-scope data
    std::vector<double> class_weights;         // loss weights clients trained with this round
    std::optional<double> t_round;             // cos(R^j, true round ratio)
    std::optional<double> t_global;            // cos(R-hat, global ratio)
    std::optional<double> similarity;          // cos(R^j, previous R-hat), the drop test input
    bool dropped = false;
    bool estimator_fallback = false;
    double accuracy = 0.0;
    std::optional<double> minority_accuracy;
    std::optional<double> train_loss;

    friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

/// Experiment state owned by the round driver.
class Federation {
public:
    Federation(FlConfig config, FederatedData data, std::uint64_t seed)
        : config_(std::move(config)), data_(std::move(data)), seed_(seed) {
        validate(config_);
        if (data_.clients.size() != config_.num_clients) throw std::invalid_argument("Federation: client count mismatch");
        std::vector<std::size_t> sizes{data_.train.feature_dim()};
        sizes.insert(sizes.end(), config_.hidden_layers.begin(), config_.hidden_layers.end());
        sizes.push_back(data_.train.num_classes);
        global_ = mlp_init(std::span<const std::size_t>(sizes), seed_);
        const auto counts = data_.train.class_counts();
        minority_ = minority_classes(counts);
        if (config_.algorithm == Algorithm::fedimt) {
            observer_ = observer_init(num_classes(), config_.selection_rate, config_.drop_threshold, config_.observer);
            round_loss_ = uniform_balanced_loss();
        } else {
            round_loss_ = config_.baseline_loss == LossKind::focal ? LossSpec::focal(config_.focal_gamma) : LossSpec::plain();
        }
    }

    const FlConfig& config() const { return config_; }
    const FederatedData& data() const { return data_; }
    const MlpModel& global_model() const { return global_; }
    const RatioObserverState& observer() const { return observer_; }
    const LossSpec& round_loss() const { return round_loss_; }
    std::size_t rounds_completed() const { return round_; }
    std::size_t num_classes() const { return data_.train.num_classes; }
    const std::vector<std::size_t>& minority() const { return minority_; }

    /// Training data client k works on in round j (1-based).
    TrainingSlice slice_for(std::size_t client, std::size_t round) const {
        const auto& c = data_.clients.at(client);
        if (!config_.n_latest) return full_slice(c);
        const std::size_t rate = config_.arrivals_per_round.value_or(
            default_arrivals_per_round(c.total_count(), *config_.n_latest, config_.rounds));
        return window_latest(c, *config_.n_latest, round == 0 ? 0 : round - 1, rate);
    }

    std::vector<double> global_ratio(std::size_t round) const {
        std::vector<TrainingSlice> slices;
        for (std::size_t k = 0; k < data_.clients.size(); ++k) slices.push_back(slice_for(k, round));
        return counts_to_ratio(oracle_counts(slices, num_classes())).ratio;
    }

    RoundRecord initial_record() const {
        RoundRecord rec;
        rec.round = 0;
        rec.global_ratio = global_ratio(1);
        if (config_.algorithm == Algorithm::fedimt) {
            rec.observer_ratio = observer_.estimate;
            rec.t_global = cosine_similarity(rec.observer_ratio, rec.global_ratio);
        }
        record_eval(rec);
        return rec;
    }

    /// Test hook: replace the next round's estimated ratio (e.g. with an
    /// adversarial one) before the drop check.
    void inject_next_ratio(std::vector<double> ratio) { injected_ratio_ = std::move(ratio); }

    RoundRecord run_round() {
        const std::size_t j = ++round_;
        RoundRecord rec;
        rec.round = j;
        rec.selected = select_clients(config_.num_clients, config_.selection_rate, j, seed_);
        rec.class_weights = current_class_weights();

        // client side
        std::vector<ClientUpdate> updates;
        std::vector<TrainingSlice> in_scope;
        double loss_acc = 0.0;
        for (auto k : rec.selected) {
            TrainingSlice slice = slice_for(k, j);
            auto result = local_update(k, slice, global_, config_, round_loss_,
                                       derive_seed(seed_, {stream::local_shuffle, j, k}));
            if (!result) {
                rec.skipped.push_back(k);
                continue;
            }
            loss_acc += result->mean_loss * static_cast<double>(result->update.sample_count);
            updates.push_back(std::move(result->update));
            in_scope.push_back(std::move(slice));
        }
        rec.global_ratio = global_ratio(j);
        if (updates.empty()) {
            record_eval(rec);
            return rec;
        }

        // server side: only weights and sample counts from here on
        double disclosed = 0.0;
        for (const auto& u : updates) disclosed += static_cast<double>(u.sample_count);
        rec.train_loss = loss_acc / disclosed;
        MlpModel candidate = aggregate(updates, global_, config_.strategy);

        if (config_.algorithm == Algorithm::baseline) {
            global_ = std::move(candidate);
            record_eval(rec);
            return rec;
        }

        const double k_sel = static_cast<double>(updates.size());
        const double total = config_.n_latest ? k_sel * static_cast<double>(*config_.n_latest) : disclosed;
        const ProbeHyper hyper{config_.lr, config_.local_epochs, config_.batch_size, config_.estimator.scale_cal};
        const AuxGradients aux = probe_auxiliary(global_, data_.aux, hyper, round_loss_);
        const CountEstimate est =
            estimate_counts(aux, global_.last_layer(), candidate.last_layer(), total, updates.size(), config_.estimator);
        rec.estimated_counts = est.counts;
        RatioResult ratio = counts_to_ratio(est.counts);
        rec.estimator_fallback = est.any_fallback() || ratio.fallback;
        if (injected_ratio_) {
            ratio.ratio = std::move(*injected_ratio_);
            injected_ratio_.reset();
        }
        rec.round_ratio = ratio.ratio;
        rec.true_round_ratio = counts_to_ratio(oracle_counts(in_scope, num_classes())).ratio;
        rec.t_round = cosine_similarity(rec.round_ratio, rec.true_round_ratio);

        const DropDecision drop = mismatch_check(observer_, rec.round_ratio);
        rec.similarity = drop.similarity;
        rec.dropped = drop.dropped;
        if (!drop.dropped) global_ = std::move(candidate);

        std::optional<double> gain;
        if (config_.dynamic_gain) gain = k_sel / static_cast<double>(config_.num_clients);
        observer_ = observer_update(std::move(observer_), rec.round_ratio, gain);
        rec.observer_ratio = observer_.estimate;
        rec.t_global = cosine_similarity(rec.observer_ratio, rec.global_ratio);

        const double n_ref = std::max(total, static_cast<double>(num_classes()));
        round_loss_ = balanced_weights(observer_.estimate, n_ref, config_.beta).loss_spec(config_.beta);
        record_eval(rec);
        return rec;
    }

private:
    LossSpec uniform_balanced_loss() const {
        const std::vector<double> uniform(num_classes(), 1.0 / static_cast<double>(num_classes()));
        return balanced_weights(uniform, static_cast<double>(num_classes()), config_.beta).loss_spec(config_.beta);
    }

    std::vector<double> current_class_weights() const {
        std::vector<double> w(num_classes(), 1.0);
        if (round_loss_.kind == LossKind::class_balanced) {
            for (std::size_t q = 0; q < w.size(); ++q) {
                w[q] = round_loss_.weight_scale * class_balanced_weight(round_loss_.beta, round_loss_.per_class_n[q]);
            }
        }
        return w;
    }

    void record_eval(RoundRecord& rec) const {
        const EvalResult ev = evaluate(global_, data_.test, minority_);
        rec.accuracy = ev.accuracy;
        rec.minority_accuracy = ev.minority_accuracy;
    }

    FlConfig config_;
    FederatedData data_;
    std::uint64_t seed_;
    MlpModel global_;
    RatioObserverState observer_;
    LossSpec round_loss_;
    std::vector<std::size_t> minority_;
    std::size_t round_ = 0;
    std::optional<std::vector<double>> injected_ratio_;
};

struct ExperimentSummary {
    double final_accuracy = 0.0;
    std::optional<double> final_minority_accuracy;
    std::optional<double> mean_t_round;
    std::optional<double> mean_t_global;
    std::size_t drop_count = 0;

    friend bool operator==(const ExperimentSummary&, const ExperimentSummary&) = default;
};

inline ExperimentSummary summarize(std::span<const RoundRecord> records) {
    ExperimentSummary s;
    if (records.empty()) return s;
    s.final_accuracy = records.back().accuracy;
    s.final_minority_accuracy = records.back().minority_accuracy;
    double tj = 0.0, tg = 0.0;
    std::size_t ntj = 0, ntg = 0;
    for (const auto& r : records) {
        if (r.round == 0) continue;
        if (r.t_round) { tj += *r.t_round; ++ntj; }
        if (r.t_global) { tg += *r.t_global; ++ntg; }
        if (r.dropped) ++s.drop_count;
    }
    if (ntj) s.mean_t_round = tj / static_cast<double>(ntj);
    if (ntg) s.mean_t_global = tg / static_cast<double>(ntg);
    return s;
}

struct ExperimentReport {
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> config_echo;
    std::vector<RoundRecord> records;
    ExperimentSummary summary;

    friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

/// Round 0 (initial evaluation) followed by config.rounds rounds.
inline ExperimentReport run_experiment(const FlConfig& config, FederatedData data, std::uint64_t seed) {
    Federation fed(config, std::move(data), seed);
    ExperimentReport rep;
    rep.seed = seed;
    rep.records.push_back(fed.initial_record());
    for (std::size_t j = 0; j < config.rounds; ++j) rep.records.push_back(fed.run_round());
    rep.summary = summarize(rep.records);
    return rep;
}

}  // namespace fedimt
