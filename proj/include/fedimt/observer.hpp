#pragma once

// Autoregressive tracking of the global class ratio, the drop test that
// guards aggregation, and the effective-number loss weights derived from the
// tracked ratio.

#include <cmath>
#include <cstddef>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/matrix.hpp"
#include "fedimt/nn.hpp"

namespace fedimt {

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
    return dot(a, b) / (na * nb);
}

/// Blend weights of the recursion est <- history * est + observation * R.
/// Defaults follow the gain-halved form (1-gain)/2, gain/2.
struct ObserverCoefficients {
    std::optional<double> history;
    std::optional<double> observation;
};

struct RatioObserverState {
    std::vector<double> estimate;
    std::size_t rounds = 0;
    double gain = 0.3;
    double drop_threshold = 0.5;
    ObserverCoefficients coefficients;
    std::deque<std::vector<double>> history;  // most recent observations, newest last

    static constexpr std::size_t history_capacity = 32;

    std::size_t num_classes() const { return estimate.size(); }
    double history_coef(double gain_now) const { return coefficients.history.value_or((1.0 - gain_now) / 2.0); }
    double observation_coef(double gain_now) const { return coefficients.observation.value_or(gain_now / 2.0); }
};

struct DropDecision {
    bool dropped = false;
    double similarity = 1.0;
};

inline RatioObserverState observer_init(std::size_t num_classes, double gain, double drop_threshold,
                                        ObserverCoefficients coefficients = {}) {
    if (num_classes < 2) throw std::invalid_argument("observer_init: need at least two classes");
    if (!(gain > 0.0 && gain <= 1.0)) throw std::invalid_argument("observer_init: gain must be in (0,1]");
    if (!(drop_threshold >= 0.0 && drop_threshold <= 1.0)) {
        throw std::invalid_argument("observer_init: drop_threshold must be in [0,1]");
    }
    if ((coefficients.history && *coefficients.history < 0.0) ||
        (coefficients.observation && !(*coefficients.observation > 0.0))) {
        throw std::invalid_argument("observer_init: coefficients must be non-negative, observation positive");
    }
    RatioObserverState st;
    st.estimate.assign(num_classes, 1.0 / static_cast<double>(num_classes));
    st.gain = gain;
    st.drop_threshold = drop_threshold;
    st.coefficients = coefficients;
    return st;
}

inline void check_probability_vector(std::span<const double> r, std::size_t expected, const char* who) {
    if (r.size() != expected) {
        throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(expected) + " entries, got " +
                                    std::to_string(r.size()));
    }
    double total = 0.0;
    for (double v : r) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": entries must be >= 0");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument(std::string(who) + ": entries must sum to 1");
}

/// First observation is adopted verbatim; later ones are blended and the
/// result renormalized to sum to 1. `gain_override` supplies this round's
/// actual selection rate when it varies.
inline RatioObserverState observer_update(RatioObserverState state, std::span<const double> observed,
                                          std::optional<double> gain_override = std::nullopt) {
    check_probability_vector(observed, state.num_classes(), "observer_update");
    if (state.rounds == 0) {
        state.estimate.assign(observed.begin(), observed.end());
    } else {
        const double g = gain_override.value_or(state.gain);
        const double h = state.history_coef(g);
        const double o = state.observation_coef(g);
        double total = 0.0;
        for (std::size_t q = 0; q < state.estimate.size(); ++q) {
            state.estimate[q] = h * state.estimate[q] + o * observed[q];
            total += state.estimate[q];
        }
        for (auto& v : state.estimate) v /= total;
    }
    ++state.rounds;
    state.history.emplace_back(observed.begin(), observed.end());
    if (state.history.size() > RatioObserverState::history_capacity) state.history.pop_front();
    return state;
}

/// The first observation is never dropped; the similarity is still reported.
inline DropDecision mismatch_check(const RatioObserverState& state, std::span<const double> observed) {
    DropDecision d;
    d.similarity = cosine_similarity(observed, state.estimate);
    d.dropped = state.rounds >= 1 && d.similarity < state.drop_threshold;
    return d;
}

struct BalancedWeights {
    std::vector<double> weights;       // rescaled so sum_q ratio_q * weights_q = 1
    std::vector<double> per_class_n;   // max(1, round(n_ref * ratio_q))
    double scale = 1.0;                // weights = scale * (1-beta)/(1-beta^n)

    LossSpec loss_spec(double beta) const { return LossSpec::balanced(beta, per_class_n, scale); }
};

inline BalancedWeights balanced_weights(std::span<const double> ratio, double n_ref, double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("balanced_weights: beta must be in [0,1)");
    if (!(n_ref >= static_cast<double>(ratio.size()))) {
        throw std::invalid_argument("balanced_weights: n_ref must be at least the number of classes");
    }
    check_probability_vector(ratio, ratio.size(), "balanced_weights");
    BalancedWeights out;
    std::vector<double> raw;
    for (double r : ratio) {
        const double n = std::max(1.0, std::round(n_ref * r));
        out.per_class_n.push_back(n);
        raw.push_back(class_balanced_weight(beta, n));
    }
    const bool all_equal = std::all_of(raw.begin(), raw.end(), [&](double w) { return w == raw.front(); });
    double mean = 0.0;
    for (std::size_t q = 0; q < raw.size(); ++q) mean += ratio[q] * raw[q];
    // equal raw weights map to exactly 1 so the loss is bit-identical to plain CE
    out.scale = all_equal ? 1.0 / raw.front() : 1.0 / mean;
    for (double w : raw) out.weights.push_back(all_equal ? 1.0 : w * out.scale);
    return out;
}

}  // namespace fedimt
