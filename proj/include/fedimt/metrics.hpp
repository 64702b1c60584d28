#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedimt/data.hpp"
#include "fedimt/nn.hpp"

namespace fedimt {

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::optional<double>> per_class_accuracy;  // empty class -> nullopt
    std::optional<double> minority_accuracy;                // nullopt when there is no minority class
    std::vector<std::vector<std::size_t>> confusion;        // confusion[true][predicted]
};

/// Classes whose training count is below the per-class average.
inline std::vector<std::size_t> minority_classes(std::span<const std::size_t> train_counts) {
    std::vector<std::size_t> out;
    if (train_counts.empty()) return out;
    std::size_t total = 0;
    for (auto c : train_counts) total += c;
    for (std::size_t q = 0; q < train_counts.size(); ++q) {
        // c < total / Q, kept in integers
        if (train_counts[q] * train_counts.size() < total) out.push_back(q);
    }
    return out;
}

inline std::vector<std::size_t> predict(const MlpModel& model, const Matrix& features) {
    const Activations acts = forward(model, features);
    std::vector<std::size_t> out(features.rows());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto z = acts.logits.row(i);
        std::size_t best = 0;
        for (std::size_t j = 1; j < z.size(); ++j) {
            if (z[j] > z[best]) best = j;
        }
        out[i] = best;
    }
    return out;
}

inline EvalResult evaluate_predictions(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                                       std::size_t num_classes, std::span<const std::size_t> minority) {
    if (truth.empty()) throw std::invalid_argument("evaluate: empty test set");
    if (predicted.size() != truth.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
    EvalResult r;
    r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++r.confusion.at(truth[i]).at(predicted[i]);
        if (predicted[i] == truth[i]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    for (std::size_t q = 0; q < num_classes; ++q) {
        std::size_t row = 0;
        for (auto c : r.confusion[q]) row += c;
        r.per_class_accuracy.push_back(row == 0 ? std::nullopt
                                                : std::optional<double>(static_cast<double>(r.confusion[q][q]) /
                                                                        static_cast<double>(row)));
    }
    std::size_t m_total = 0;
    std::size_t m_correct = 0;
    for (auto q : minority) {
        for (auto c : r.confusion.at(q)) m_total += c;
        m_correct += r.confusion[q][q];
    }
    if (m_total > 0) r.minority_accuracy = static_cast<double>(m_correct) / static_cast<double>(m_total);
    return r;
}

inline EvalResult evaluate(const MlpModel& model, const Dataset& test, std::span<const std::size_t> minority) {
    if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
    return evaluate_predictions(predict(model, test.features), test.labels, model.num_classes(), minority);
}

}  // namespace fedimt
