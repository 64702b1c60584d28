#pragma once

// Round-composition estimation from last-layer weight deltas.
//
// The server feeds each class's auxiliary samples through the previous global
// model and turns the resulting last-layer gradients into "what one SGD pass
// over N_aux samples of class q would move W by". Under plain SGD and
// equal-size clients, the aggregated update of output node p at hidden node m
// is a count-weighted sum of those per-class moves, so each (p, m) entry gives
// one linear equation in the unknown count of class p among the selected
// clients. Per-node solutions are blended with weights that favour nodes where
// class p's own gradient dominates the other classes'.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/data.hpp"
#include "fedimt/matrix.hpp"
#include "fedimt/nn.hpp"

namespace fedimt {

/// per_class[q](m, p): expected move of W(m, p) from one pass over the class-q
/// auxiliary samples.
struct AuxGradients {
    std::vector<Matrix> per_class;
    std::vector<std::size_t> aux_count;

    std::size_t num_classes() const { return per_class.size(); }
};

/// Local-training constants the probe needs to convert a gradient into a
/// weight move.
struct ProbeHyper {
    double lr = 0.001;
    std::size_t local_epochs = 1;
    std::size_t batch_size = 32;
    double scale_cal = 1.0;
};

struct EstimatorParams {
    double denom_epsilon = 1e-12;
    double confidence_floor = 0.0;
    double scale_cal = 1.0;
};

struct CountEstimate {
    std::vector<double> counts;        // N_p, clamped into [0, total]
    Matrix node_estimates;             // (Q x s), NaN where the node was skipped
    Matrix node_confidence;            // (Q x s), 0 where the node was skipped
    std::vector<std::size_t> used_nodes;
    std::vector<bool> fallback;        // class had no usable node; count set to total/Q

    bool any_fallback() const { return std::any_of(fallback.begin(), fallback.end(), [](bool b) { return b; }); }
};

struct RatioResult {
    std::vector<double> ratio;
    bool fallback = false;  // input was all zero; uniform returned
};

/// Probe the previous global model with each class's auxiliary samples. The
/// loss is the one clients trained with this round, so class weights in the
/// clients' updates are mirrored in the probe. The model is not modified.
inline AuxGradients probe_auxiliary(const MlpModel& prev_model, const AuxiliarySet& aux, const ProbeHyper& hyper,
                                    const LossSpec& loss = LossSpec::plain()) {
    const std::size_t q_count = prev_model.num_classes();
    if (aux.num_classes() != q_count) {
        throw std::invalid_argument("probe_auxiliary: auxiliary set has " + std::to_string(aux.num_classes()) +
                                    " classes, model has " + std::to_string(q_count));
    }
    if (hyper.batch_size == 0) throw std::invalid_argument("probe_auxiliary: batch_size must be >= 1");
    AuxGradients out;
    for (std::size_t q = 0; q < q_count; ++q) {
        const Matrix& x = aux.class_features[q];
        if (x.rows() == 0) throw std::invalid_argument("probe_auxiliary: class " + std::to_string(q) + " has no auxiliary samples");
        const Activations acts = forward(prev_model, x);
        const std::vector<std::size_t> labels(x.rows(), q);
        const LossResult lr = compute_loss(acts, labels, loss);
        Matrix g = last_layer_gradient(acts, lr.grad_logits);  // gradient of the mean loss
        // sum over the N_aux samples, each step scaled by -lr/bs, repeated for every local epoch
        const double factor = -hyper.lr / static_cast<double>(hyper.batch_size) *
                              static_cast<double>(hyper.local_epochs) * hyper.scale_cal *
                              static_cast<double>(x.rows());
        for (auto& v : g.data()) v *= factor;
        out.per_class.push_back(std::move(g));
        out.aux_count.push_back(x.rows());
    }
    return out;
}

/// Solve, for each class p and hidden node m,
///   A_p(m,p) * x + A_notp(m,p) * (total - x) = N_aux(p) * K * dW(m,p)
/// where A_notp is the mean of the other classes' probe moves, then blend the
/// per-node solutions with confidence |A_p / A_notp|.
///
/// Nodes whose own-class and other-class moves share a sign are discarded:
/// the equation is then badly conditioned and the node carries no separating
/// signal.
inline CountEstimate estimate_counts(const AuxGradients& aux, const Matrix& w_prev, const Matrix& w_new,
                                     double total_samples, std::size_t num_selected,
                                     const EstimatorParams& params = {}) {
    const std::size_t q_count = aux.num_classes();
    if (q_count < 2) throw std::invalid_argument("estimate_counts: need at least two classes");
    if (!(total_samples > 0.0)) throw std::invalid_argument("estimate_counts: total_samples must be positive");
    if (num_selected == 0) throw std::invalid_argument("estimate_counts: no selected clients");
    if (!(params.denom_epsilon > 0.0)) throw std::invalid_argument("estimate_counts: denom_epsilon must be positive");
    if (!w_prev.same_shape(w_new) || w_prev.cols() != q_count) {
        throw std::invalid_argument("estimate_counts: weight shapes " + shape_string(w_prev) + " / " +
                                    shape_string(w_new) + " do not match " + std::to_string(q_count) + " classes");
    }
    const std::size_t s = w_prev.rows();
    for (const auto& a : aux.per_class) {
        if (a.rows() != s || a.cols() != q_count) throw std::invalid_argument("estimate_counts: probe gradient shape mismatch");
    }

    CountEstimate est;
    est.counts.assign(q_count, 0.0);
    est.node_estimates = Matrix(q_count, s, std::numeric_limits<double>::quiet_NaN());
    est.node_confidence = Matrix(q_count, s, 0.0);
    est.used_nodes.assign(q_count, 0);
    est.fallback.assign(q_count, false);

    const double others = static_cast<double>(q_count - 1);
    const double k = static_cast<double>(num_selected);
    for (std::size_t p = 0; p < q_count; ++p) {
        const double aux_n = static_cast<double>(aux.aux_count[p]);
        double weight_sum = 0.0;
        double weighted = 0.0;
        for (std::size_t m = 0; m < s; ++m) {
            double all = 0.0;
            for (std::size_t q = 0; q < q_count; ++q) all += aux.per_class[q](m, p);
            const double own = aux.per_class[p](m, p);
            const double rest_mean = (all - own) / others;
            const double denom = own - rest_mean;
            if (std::abs(denom) < params.denom_epsilon) continue;
            if (own * rest_mean > 0.0) continue;  // same-sign geometry
            const double confidence = std::abs(own) / std::max(std::abs(rest_mean), params.denom_epsilon);
            if (!(confidence > params.confidence_floor)) continue;
            const double rhs = aux_n * k * (w_new(m, p) - w_prev(m, p));
            const double x = (rhs - rest_mean * total_samples) / denom;
            est.node_estimates(p, m) = x;
            est.node_confidence(p, m) = confidence;
            weight_sum += confidence;
            weighted += confidence * x;
            ++est.used_nodes[p];
        }
        if (est.used_nodes[p] == 0 || !(weight_sum > 0.0) || !std::isfinite(weighted)) {
            est.fallback[p] = true;
            est.counts[p] = total_samples / static_cast<double>(q_count);
        } else {
            est.counts[p] = std::clamp(weighted / weight_sum, 0.0, total_samples);
        }
    }
    return est;
}

/// Confidence-weighted mean of per-node estimates.
inline double combine_node_estimates(std::span<const double> estimates, std::span<const double> confidences) {
    if (estimates.size() != confidences.size() || estimates.empty()) {
        throw std::invalid_argument("combine_node_estimates: size mismatch");
    }
    const double total = std::accumulate(confidences.begin(), confidences.end(), 0.0);
    if (!(total > 0.0)) throw std::invalid_argument("combine_node_estimates: confidences must sum to a positive value");
    double acc = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) acc += confidences[i] / total * estimates[i];
    return acc;
}

inline RatioResult counts_to_ratio(std::span<const double> counts) {
    if (counts.empty()) throw std::invalid_argument("counts_to_ratio: empty count vector");
    double total = 0.0;
    for (double c : counts) {
        if (!(c >= 0.0) || !std::isfinite(c)) throw std::invalid_argument("counts_to_ratio: counts must be finite and >= 0");
        total += c;
    }
    RatioResult out;
    if (total == 0.0) {
        out.ratio.assign(counts.size(), 1.0 / static_cast<double>(counts.size()));
        out.fallback = true;
        return out;
    }
    out.ratio.reserve(counts.size());
    for (double c : counts) out.ratio.push_back(c / total);
    return out;
}

/// Ground-truth class counts over the given slices. Simulation-side only.
inline std::vector<double> oracle_counts(std::span<const TrainingSlice> slices, std::size_t num_classes) {
    std::vector<double> counts(num_classes, 0.0);
    for (const auto& s : slices) {
        for (auto r : s.rows) counts.at(s.source->labels[r]) += 1.0;
    }
    return counts;
}

}  // namespace fedimt
