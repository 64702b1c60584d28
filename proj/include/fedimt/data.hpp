#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/matrix.hpp"
#include "fedimt/rng.hpp"

namespace fedimt {

/// Labeled samples. Rows are stored in any order; `time_order[t]` is the row
/// that arrived t-th.
struct Dataset {
    Matrix features;
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::vector<std::size_t> time_order;

    std::size_t size() const { return labels.size(); }
    std::size_t feature_dim() const { return features.cols(); }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (auto y : labels) ++counts[y];
        return counts;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate(const Dataset& ds) {
    if (ds.features.rows() != ds.labels.size()) throw std::invalid_argument("Dataset: feature/label count mismatch");
    if (ds.num_classes == 0) throw std::invalid_argument("Dataset: zero classes");
    for (auto y : ds.labels) {
        if (y >= ds.num_classes) throw std::invalid_argument("Dataset: label " + std::to_string(y) + " out of range");
    }
    if (ds.time_order.size() != ds.size()) throw std::invalid_argument("Dataset: time_order length mismatch");
    std::vector<char> seen(ds.size(), 0);
    for (auto r : ds.time_order) {
        if (r >= ds.size() || seen[r]) throw std::invalid_argument("Dataset: time_order is not a permutation");
        seen[r] = 1;
    }
    if (!ds.features.all_finite()) throw std::invalid_argument("Dataset: non-finite feature");
}

/// A client's private shard. Only total_count() ever leaves the client.
struct ClientDataset {
    std::size_t client_id = 0;
    Dataset dataset;
    std::vector<std::size_t> source_rows;  // rows of the parent dataset, simulation bookkeeping

    std::size_t total_count() const { return dataset.size(); }
};

/// Rows of a client's dataset that are in training scope for one round.
struct TrainingSlice {
    const Dataset* source = nullptr;
    std::vector<std::size_t> rows;

    std::size_t size() const { return rows.size(); }
    bool empty() const { return rows.empty(); }
};

inline TrainingSlice full_slice(const ClientDataset& client) {
    TrainingSlice s;
    s.source = &client.dataset;
    s.rows.resize(client.dataset.size());
    std::iota(s.rows.begin(), s.rows.end(), std::size_t{0});
    return s;
}

struct AuxiliarySet {
    std::vector<Matrix> class_features;  // class_features[q]: samples labeled q
    std::vector<std::size_t> per_class_count;

    std::size_t num_classes() const { return class_features.size(); }
    std::size_t total() const { return std::accumulate(per_class_count.begin(), per_class_count.end(), std::size_t{0}); }
};

struct SyntheticSpec {
    std::size_t num_classes = 2;
    std::size_t feature_dim = 1;
    std::vector<std::vector<double>> means;  // per class, length feature_dim
    std::vector<double> scales;              // per-class isotropic std-dev
    std::vector<std::size_t> counts;
    double run_length = 1.0;  // mean length of same-class arrival bursts
};

inline void validate(const SyntheticSpec& spec) {
    const auto q = spec.num_classes;
    if (q == 0) throw std::invalid_argument("SyntheticSpec: zero classes");
    if (spec.feature_dim == 0) throw std::invalid_argument("SyntheticSpec: feature_dim must be >= 1");
    if (spec.means.size() != q || spec.scales.size() != q || spec.counts.size() != q) {
        throw std::invalid_argument("SyntheticSpec: per-class vectors must have one entry per class");
    }
    for (const auto& m : spec.means) {
        if (m.size() != spec.feature_dim) throw std::invalid_argument("SyntheticSpec: mean vector has wrong length");
    }
    for (double s : spec.scales) {
        if (!(s >= 0.0)) throw std::invalid_argument("SyntheticSpec: scales must be non-negative");
    }
    if (!(spec.run_length >= 1.0)) throw std::invalid_argument("SyntheticSpec: run_length must be >= 1");
    if (std::accumulate(spec.counts.begin(), spec.counts.end(), std::size_t{0}) == 0) {
        throw std::invalid_argument("SyntheticSpec: zero total samples");
    }
}

/// Class centers at `separation * u_q` with u_q random unit vectors.
inline std::vector<std::vector<double>> random_cluster_means(std::size_t num_classes, std::size_t dim,
                                                             double separation, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {stream::cluster_means}));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim));
    for (auto& m : means) {
        double n2 = 0.0;
        do {
            for (auto& v : m) v = normal(rng);
            n2 = dot(m, m);
        } while (n2 == 0.0);
        const double scale = separation / std::sqrt(n2);
        for (auto& v : m) v *= scale;
    }
    return means;
}

/// Gaussian clusters, rows grouped by class. Arrival order interleaves the
/// classes in geometric-length runs: each run picks a class with probability
/// proportional to its not-yet-arrived count, so run_length = 1 is a uniform
/// shuffle.
inline Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    validate(spec);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Dataset ds;
    ds.num_classes = spec.num_classes;
    const std::size_t total = std::accumulate(spec.counts.begin(), spec.counts.end(), std::size_t{0});
    ds.features = Matrix(total, spec.feature_dim);
    ds.labels.reserve(total);
    std::vector<std::vector<std::size_t>> class_rows(spec.num_classes);
    std::size_t r = 0;
    for (std::size_t q = 0; q < spec.num_classes; ++q) {
        for (std::size_t i = 0; i < spec.counts[q]; ++i, ++r) {
            auto row = ds.features.row(r);
            for (std::size_t d = 0; d < spec.feature_dim; ++d) row[d] = spec.means[q][d] + spec.scales[q] * normal(rng);
            ds.labels.push_back(q);
            class_rows[q].push_back(r);
        }
    }

    std::geometric_distribution<std::size_t> extra(1.0 / spec.run_length);
    std::vector<std::size_t> next(spec.num_classes, 0);
    std::vector<std::size_t> remaining(spec.counts);
    std::size_t left = total;
    ds.time_order.reserve(total);
    while (left > 0) {
        std::uniform_int_distribution<std::size_t> pick(0, left - 1);
        std::size_t u = pick(rng);
        std::size_t q = 0;
        while (u >= remaining[q]) u -= remaining[q++];
        const std::size_t run = std::min(remaining[q], 1 + extra(rng));
        for (std::size_t i = 0; i < run; ++i) ds.time_order.push_back(class_rows[q][next[q]++]);
        remaining[q] -= run;
        left -= run;
    }
    return ds;
}

/// Subset of rows; the child's arrival order follows the parent's.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
    Dataset out;
    out.num_classes = ds.num_classes;
    out.features = gather_rows(ds.features, rows);
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(ds.labels[r]);

    std::vector<std::size_t> arrival(ds.size());
    for (std::size_t t = 0; t < ds.time_order.size(); ++t) arrival[ds.time_order[t]] = t;
    out.time_order.resize(rows.size());
    std::iota(out.time_order.begin(), out.time_order.end(), std::size_t{0});
    std::sort(out.time_order.begin(), out.time_order.end(),
              [&](std::size_t a, std::size_t b) { return arrival[rows[a]] < arrival[rows[b]]; });
    return out;
}

/// Label-sorted shard partition: rows sorted by (label, arrival), cut into
/// num_clients * shards_per_client near-equal contiguous shards, and shards
/// dealt to clients by a seeded shuffle.
inline std::vector<ClientDataset> shard_partition(const Dataset& ds, std::size_t num_clients,
                                                  std::size_t shards_per_client, std::uint64_t seed) {
    if (num_clients == 0 || shards_per_client == 0) {
        throw std::invalid_argument("shard_partition: need at least one client and one shard per client");
    }
    const std::size_t num_shards = num_clients * shards_per_client;
    if (ds.size() < num_shards) {
        throw std::invalid_argument("shard_partition: " + std::to_string(ds.size()) + " samples cannot fill " +
                                    std::to_string(num_shards) + " shards");
    }
    std::vector<std::size_t> arrival(ds.size());
    for (std::size_t t = 0; t < ds.time_order.size(); ++t) arrival[ds.time_order[t]] = t;
    std::vector<std::size_t> sorted(ds.size());
    std::iota(sorted.begin(), sorted.end(), std::size_t{0});
    std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        if (ds.labels[a] != ds.labels[b]) return ds.labels[a] < ds.labels[b];
        return arrival[a] < arrival[b];
    });

    // shard s covers [begin[s], begin[s+1]); the first (n mod S) shards take one extra row
    const std::size_t base = ds.size() / num_shards;
    const std::size_t extra = ds.size() % num_shards;
    std::vector<std::size_t> begin(num_shards + 1, 0);
    for (std::size_t s = 0; s < num_shards; ++s) begin[s + 1] = begin[s] + base + (s < extra ? 1 : 0);

    std::vector<std::size_t> order(num_shards);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {stream::partition}));
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<ClientDataset> clients(num_clients);
    for (std::size_t k = 0; k < num_clients; ++k) {
        std::vector<std::size_t> rows;
        std::vector<std::size_t> mine(order.begin() + static_cast<std::ptrdiff_t>(k * shards_per_client),
                                      order.begin() + static_cast<std::ptrdiff_t>((k + 1) * shards_per_client));
        std::sort(mine.begin(), mine.end());
        for (auto s : mine) {
            for (std::size_t i = begin[s]; i < begin[s + 1]; ++i) rows.push_back(sorted[i]);
        }
        clients[k].client_id = k;
        clients[k].dataset = subset(ds, rows);
        clients[k].source_rows = std::move(rows);
    }
    return clients;
}

/// Default arrival rate so that the window reaches the end of the stream at
/// the final round.
inline std::size_t default_arrivals_per_round(std::size_t total, std::size_t n_latest, std::size_t rounds) {
    if (n_latest >= total || rounds <= 1) return 1;
    return std::max<std::size_t>(1, (total - n_latest + rounds - 2) / (rounds - 1));
}

/// Latest `n_latest` arrivals as of `round` (0-based). The client starts with
/// n_latest samples and receives `arrivals_per_round` more each round.
inline TrainingSlice window_latest(const ClientDataset& client, std::size_t n_latest, std::size_t round,
                                   std::size_t arrivals_per_round) {
    if (n_latest == 0) throw std::invalid_argument("window_latest: n_latest must be >= 1");
    const auto& order = client.dataset.time_order;
    const std::size_t total = order.size();
    const std::size_t arrived = std::min(total, n_latest + round * arrivals_per_round);
    const std::size_t start = arrived > n_latest ? arrived - n_latest : 0;
    TrainingSlice s;
    s.source = &client.dataset;
    s.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                  order.begin() + static_cast<std::ptrdiff_t>(arrived));
    return s;
}

/// Per-class draws with replacement from `ds`.
inline AuxiliarySet sample_auxiliary(const Dataset& ds, std::size_t per_class_count, std::uint64_t seed) {
    if (per_class_count == 0) throw std::invalid_argument("sample_auxiliary: per_class_count must be >= 1");
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t r = 0; r < ds.size(); ++r) by_class[ds.labels[r]].push_back(r);
    Rng rng(derive_seed(seed, {stream::auxiliary}));
    AuxiliarySet aux;
    for (std::size_t q = 0; q < ds.num_classes; ++q) {
        if (by_class[q].empty()) {
            throw std::invalid_argument("sample_auxiliary: class " + std::to_string(q) + " has no source samples");
        }
        std::uniform_int_distribution<std::size_t> pick(0, by_class[q].size() - 1);
        std::vector<std::size_t> rows(per_class_count);
        for (auto& r : rows) r = by_class[q][pick(rng)];
        aux.class_features.push_back(gather_rows(ds.features, rows));
        aux.per_class_count.push_back(per_class_count);
    }
    return aux;
}

/// Auxiliary set from an externally supplied labeled dataset (all rows used).
inline AuxiliarySet auxiliary_from_dataset(const Dataset& ds) {
    AuxiliarySet aux;
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t r = 0; r < ds.size(); ++r) by_class[ds.labels[r]].push_back(r);
    for (std::size_t q = 0; q < ds.num_classes; ++q) {
        if (by_class[q].empty()) {
            throw std::invalid_argument("auxiliary data: class " + std::to_string(q) + " has no samples");
        }
        aux.class_features.push_back(gather_rows(ds.features, by_class[q]));
        aux.per_class_count.push_back(by_class[q].size());
    }
    return aux;
}

}  // namespace fedimt
