#pragma once

// Dense ReLU classifier with softmax output, manual backprop and SGD with
// momentum. The last weight matrix (last hidden layer -> logits) is the one
// the ratio estimator reads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/matrix.hpp"
#include "fedimt/rng.hpp"

namespace fedimt {

struct MlpModel {
    std::vector<std::size_t> layer_sizes;  // input, hidden..., classes
    std::vector<Matrix> weights;           // weights[l] is (layer_sizes[l] x layer_sizes[l+1])
    std::vector<std::vector<double>> biases;

    std::size_t input_size() const { return layer_sizes.front(); }
    std::size_t num_classes() const { return layer_sizes.back(); }
    /// Width of the representation feeding the output layer (s).
    std::size_t last_hidden_size() const { return layer_sizes[layer_sizes.size() - 2]; }
    const Matrix& last_layer() const { return weights.back(); }

    friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

struct Activations {
    /// layer_inputs[l] is what entered weight layer l; the last one is H(X).
    std::vector<Matrix> layer_inputs;
    Matrix logits;
    Matrix probabilities;

    const Matrix& hidden_outputs() const { return layer_inputs.back(); }
    std::size_t batch_size() const { return logits.rows(); }
};

struct Gradients {
    std::vector<Matrix> weights;
    std::vector<std::vector<double>> biases;

    const Matrix& last_layer_grad() const { return weights.back(); }
};

enum class LossKind { plain_ce, class_balanced, focal };

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::plain_ce: return "ce";
        case LossKind::class_balanced: return "class_balanced";
        case LossKind::focal: return "focal";
    }
    return "?";
}

struct LossSpec {
    LossKind kind = LossKind::plain_ce;
    double beta = 0.999;
    std::vector<double> per_class_n;  // effective counts, class_balanced only
    double weight_scale = 1.0;        // common multiplier applied to every class weight
    double gamma = 2.0;               // focal only

    static LossSpec plain() { return {}; }
    static LossSpec focal(double gamma) {
        LossSpec s;
        s.kind = LossKind::focal;
        s.gamma = gamma;
        return s;
    }
    static LossSpec balanced(double beta, std::vector<double> per_class_n, double weight_scale = 1.0) {
        LossSpec s;
        s.kind = LossKind::class_balanced;
        s.beta = beta;
        s.per_class_n = std::move(per_class_n);
        s.weight_scale = weight_scale;
        return s;
    }

    friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

struct OptState {
    std::vector<Matrix> weight_buffers;
    std::vector<std::vector<double>> bias_buffers;
    double lr = 0.001;
    double momentum = 0.0;
};

struct LossResult {
    double loss = 0.0;
    Matrix grad_logits;
};

/// Effective-number class weight (1 - beta) / (1 - beta^n).
inline double class_balanced_weight(double beta, double n) {
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("class_balanced_weight: beta must be in [0,1)");
    if (!(n >= 1.0)) throw std::invalid_argument("class_balanced_weight: n must be >= 1");
    return (1.0 - beta) / (1.0 - std::pow(beta, n));
}

inline void validate(const LossSpec& spec, std::size_t num_classes) {
    if (spec.kind == LossKind::class_balanced) {
        if (!(spec.beta >= 0.0 && spec.beta < 1.0)) throw std::invalid_argument("LossSpec: beta must be in [0,1)");
        if (spec.per_class_n.size() != num_classes) {
            throw std::invalid_argument("LossSpec: class_balanced needs " + std::to_string(num_classes) +
                                        " per-class counts, got " + std::to_string(spec.per_class_n.size()));
        }
        for (double n : spec.per_class_n) {
            if (!(n >= 1.0)) throw std::invalid_argument("LossSpec: per-class counts must be >= 1");
        }
        if (!(spec.weight_scale > 0.0) || !std::isfinite(spec.weight_scale)) {
            throw std::invalid_argument("LossSpec: weight_scale must be positive");
        }
    }
    if (spec.kind == LossKind::focal && !(spec.gamma >= 0.0)) {
        throw std::invalid_argument("LossSpec: focal gamma must be >= 0");
    }
}

/// Glorot-uniform weights, U(-sqrt(6/(fan_in+fan_out)), +...), zero biases.
inline MlpModel mlp_init(std::span<const std::size_t> layer_sizes, std::uint64_t seed) {
    if (layer_sizes.size() < 2) throw std::invalid_argument("mlp_init: need at least input and output layers");
    for (auto s : layer_sizes) {
        if (s == 0) throw std::invalid_argument("mlp_init: zero-width layer");
    }
    MlpModel model;
    model.layer_sizes.assign(layer_sizes.begin(), layer_sizes.end());
    Rng rng(derive_seed(seed, {stream::model_init}));
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const std::size_t fan_in = layer_sizes[l];
        const std::size_t fan_out = layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Matrix w(fan_in, fan_out);
        for (auto& v : w.data()) v = dist(rng);
        model.weights.push_back(std::move(w));
        model.biases.emplace_back(fan_out, 0.0);
    }
    return model;
}

inline MlpModel mlp_init(std::initializer_list<std::size_t> layer_sizes, std::uint64_t seed) {
    std::vector<std::size_t> sizes(layer_sizes);
    return mlp_init(std::span<const std::size_t>(sizes), seed);
}

namespace detail {

inline Matrix affine(const Matrix& in, const Matrix& w, const std::vector<double>& b) {
    Matrix out(in.rows(), w.cols());
    for (std::size_t i = 0; i < in.rows(); ++i) {
        auto o = out.row(i);
        std::copy(b.begin(), b.end(), o.begin());
        auto x = in.row(i);
        for (std::size_t k = 0; k < in.cols(); ++k) {
            const double xk = x[k];
            if (xk == 0.0) continue;
            auto wk = w.row(k);
            for (std::size_t j = 0; j < w.cols(); ++j) o[j] += xk * wk[j];
        }
    }
    return out;
}

inline void softmax_rows(const Matrix& logits, Matrix& probs) {
    probs = Matrix(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto z = logits.row(i);
        auto p = probs.row(i);
        const double zmax = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            p[j] = std::exp(z[j] - zmax);
            total += p[j];
        }
        for (auto& v : p) v /= total;
    }
}

inline double log_softmax_at(std::span<const double> z, std::size_t j) {
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp(v - zmax);
    return z[j] - zmax - std::log(total);
}

inline void check_model(const MlpModel& model) {
    if (model.weights.size() + 1 != model.layer_sizes.size() || model.biases.size() != model.weights.size()) {
        throw std::invalid_argument("MlpModel: layer count mismatch");
    }
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        if (model.weights[l].rows() != model.layer_sizes[l] || model.weights[l].cols() != model.layer_sizes[l + 1] ||
            model.biases[l].size() != model.layer_sizes[l + 1]) {
            throw std::invalid_argument("MlpModel: layer " + std::to_string(l) + " shape does not chain");
        }
    }
}

}  // namespace detail

inline Activations forward(const MlpModel& model, const Matrix& batch) {
    detail::check_model(model);
    if (batch.cols() != model.input_size()) {
        throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                                    std::to_string(model.input_size()));
    }
    Activations acts;
    acts.layer_inputs.push_back(batch);
    const std::size_t num_layers = model.weights.size();
    for (std::size_t l = 0; l + 1 < num_layers; ++l) {
        Matrix z = detail::affine(acts.layer_inputs.back(), model.weights[l], model.biases[l]);
        for (auto& v : z.data()) v = v > 0.0 ? v : 0.0;
        acts.layer_inputs.push_back(std::move(z));
    }
    acts.logits = detail::affine(acts.layer_inputs.back(), model.weights.back(), model.biases.back());
    detail::softmax_rows(acts.logits, acts.probabilities);
    return acts;
}

/// Mean-reduced loss over the batch and its exact gradient with respect to the logits.
inline LossResult compute_loss(const Activations& acts, std::span<const std::size_t> labels, const LossSpec& spec) {
    const std::size_t b = acts.batch_size();
    const std::size_t q = acts.logits.cols();
    if (labels.size() != b) {
        throw std::invalid_argument("compute_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(b));
    }
    if (b == 0) throw std::invalid_argument("compute_loss: empty batch");
    validate(spec, q);

    std::vector<double> class_weight;
    if (spec.kind == LossKind::class_balanced) {
        class_weight.resize(q);
        for (std::size_t c = 0; c < q; ++c) {
            class_weight[c] = spec.weight_scale * class_balanced_weight(spec.beta, spec.per_class_n[c]);
        }
    }

    LossResult out;
    out.grad_logits = Matrix(b, q);
    const double inv_b = 1.0 / static_cast<double>(b);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t y = labels[i];
        if (y >= q) {
            throw std::invalid_argument("compute_loss: label " + std::to_string(y) + " out of range [0," +
                                        std::to_string(q) + ")");
        }
        auto p = acts.probabilities.row(i);
        auto g = out.grad_logits.row(i);
        const double log_pt = detail::log_softmax_at(acts.logits.row(i), y);
        switch (spec.kind) {
            case LossKind::plain_ce: {
                total += -log_pt;
                for (std::size_t j = 0; j < q; ++j) g[j] = (p[j] - (j == y ? 1.0 : 0.0)) * inv_b;
                break;
            }
            case LossKind::class_balanced: {
                const double w = class_weight[y];
                total += -w * log_pt;
                for (std::size_t j = 0; j < q; ++j) g[j] = w * (p[j] - (j == y ? 1.0 : 0.0)) * inv_b;
                break;
            }
            case LossKind::focal: {
                // L = -(1-pt)^g log pt;  dL/dz_j = [g (1-pt)^(g-1) pt log pt - (1-pt)^g] (delta_jy - p_j)
                const double pt = p[y];
                const double one_minus = 1.0 - pt;
                const double modulator = std::pow(one_minus, spec.gamma);
                total += -modulator * log_pt;
                double slope = -modulator;
                if (spec.gamma > 0.0 && one_minus > 0.0) {
                    slope += spec.gamma * std::pow(one_minus, spec.gamma - 1.0) * pt * log_pt;
                }
                for (std::size_t j = 0; j < q; ++j) g[j] = slope * ((j == y ? 1.0 : 0.0) - p[j]) * inv_b;
                break;
            }
        }
    }
    out.loss = total * inv_b;
    return out;
}

/// dL/dW_last = H^T * grad_logits (grad_logits already carries the 1/batch factor).
inline Matrix last_layer_gradient(const Activations& acts, const Matrix& grad_logits) {
    const Matrix& h = acts.hidden_outputs();
    Matrix g(h.cols(), grad_logits.cols());
    for (std::size_t i = 0; i < h.rows(); ++i) {
        auto hi = h.row(i);
        auto di = grad_logits.row(i);
        for (std::size_t m = 0; m < h.cols(); ++m) {
            if (hi[m] == 0.0) continue;
            auto gm = g.row(m);
            for (std::size_t c = 0; c < di.size(); ++c) gm[c] += hi[m] * di[c];
        }
    }
    return g;
}

inline Gradients backward(const MlpModel& model, const Activations& acts, const Matrix& grad_logits) {
    detail::check_model(model);
    const std::size_t num_layers = model.weights.size();
    if (acts.layer_inputs.size() != num_layers || grad_logits.rows() != acts.batch_size() ||
        grad_logits.cols() != model.num_classes()) {
        throw std::invalid_argument("backward: activations/gradient shape mismatch");
    }
    Gradients grads;
    grads.weights.resize(num_layers);
    grads.biases.resize(num_layers);

    Matrix delta = grad_logits;
    for (std::size_t l = num_layers; l-- > 0;) {
        const Matrix& in = acts.layer_inputs[l];
        const Matrix& w = model.weights[l];
        Matrix gw(w.rows(), w.cols());
        std::vector<double> gb(w.cols(), 0.0);
        for (std::size_t i = 0; i < in.rows(); ++i) {
            auto x = in.row(i);
            auto d = delta.row(i);
            for (std::size_t j = 0; j < d.size(); ++j) gb[j] += d[j];
            for (std::size_t k = 0; k < x.size(); ++k) {
                if (x[k] == 0.0) continue;
                auto gk = gw.row(k);
                for (std::size_t j = 0; j < d.size(); ++j) gk[j] += x[k] * d[j];
            }
        }
        if (l > 0) {
            Matrix prev(in.rows(), in.cols());
            for (std::size_t i = 0; i < in.rows(); ++i) {
                auto d = delta.row(i);
                auto x = in.row(i);
                auto pd = prev.row(i);
                for (std::size_t k = 0; k < x.size(); ++k) {
                    if (x[k] <= 0.0) continue;  // ReLU gate
                    pd[k] = dot(w.row(k), d);
                }
            }
            delta = std::move(prev);
        }
        grads.weights[l] = std::move(gw);
        grads.biases[l] = std::move(gb);
    }
    return grads;
}

inline OptState make_opt_state(const MlpModel& model, double lr, double momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("OptState: momentum must be in [0,1)");
    OptState st;
    st.lr = lr;
    st.momentum = momentum;
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        st.weight_buffers.emplace_back(model.weights[l].rows(), model.weights[l].cols());
        st.bias_buffers.emplace_back(model.biases[l].size(), 0.0);
    }
    return st;
}

namespace detail {
inline void sgd_apply(std::span<double> w, std::span<const double> g, std::span<double> buf, double lr,
                      double momentum) {
    if (momentum == 0.0) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        return;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        buf[i] = momentum * buf[i] + g[i];
        w[i] -= lr * buf[i];
    }
}
}  // namespace detail

/// In-place SGD step: buffer <- mu*buffer + g, w <- w - lr*buffer (w <- w - lr*g when mu = 0).
inline void sgd_step(MlpModel& model, const Gradients& grads, OptState& opt) {
    const std::size_t n = model.weights.size();
    if (grads.weights.size() != n || grads.biases.size() != n || opt.weight_buffers.size() != n ||
        opt.bias_buffers.size() != n) {
        throw std::invalid_argument("sgd_step: layer count mismatch");
    }
    for (std::size_t l = 0; l < n; ++l) {
        if (!grads.weights[l].same_shape(model.weights[l]) || !opt.weight_buffers[l].same_shape(model.weights[l]) ||
            grads.biases[l].size() != model.biases[l].size() || opt.bias_buffers[l].size() != model.biases[l].size()) {
            throw std::invalid_argument("sgd_step: shape mismatch at layer " + std::to_string(l));
        }
        detail::sgd_apply(model.weights[l].data(), grads.weights[l].data(), opt.weight_buffers[l].data(), opt.lr,
                          opt.momentum);
        detail::sgd_apply(model.biases[l], grads.biases[l], opt.bias_buffers[l], opt.lr, opt.momentum);
    }
}

inline Gradients loss_gradients(const MlpModel& model, const Matrix& batch, std::span<const std::size_t> labels,
                                const LossSpec& spec, double* loss_out = nullptr) {
    const Activations acts = forward(model, batch);
    const LossResult lr = compute_loss(acts, labels, spec);
    if (loss_out) *loss_out = lr.loss;
    return backward(model, acts, lr.grad_logits);
}

/// Gradients smaller than this are compared absolutely; FD rounding noise at
/// eps = 1e-5 sits around 1e-11 and would dominate a pure relative measure.
inline constexpr double grad_check_floor = 1e-4;

/// Largest relative disagreement between backward() and central differences
/// over every weight and bias.
inline double grad_check(const MlpModel& model, const Matrix& batch, std::span<const std::size_t> labels,
                         const LossSpec& spec, double eps = 1e-5) {
    if (!(eps > 0.0 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must be in (0, 1e-3]");
    const Gradients analytic = loss_gradients(model, batch, labels, spec);
    MlpModel probe = model;
    auto loss_at = [&](const MlpModel& m) { return compute_loss(forward(m, batch), labels, spec).loss; };
    double worst = 0.0;
    auto compare = [&](double& param, double a) {
        const double saved = param;
        param = saved + eps;
        const double up = loss_at(probe);
        param = saved - eps;
        const double down = loss_at(probe);
        param = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(a), std::abs(numeric), grad_check_floor});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    };
    for (std::size_t l = 0; l < probe.weights.size(); ++l) {
        auto& w = probe.weights[l].data();
        for (std::size_t i = 0; i < w.size(); ++i) compare(w[i], analytic.weights[l].data()[i]);
        auto& b = probe.biases[l];
        for (std::size_t i = 0; i < b.size(); ++i) compare(b[i], analytic.biases[l][i]);
    }
    return worst;
}

}  // namespace fedimt
