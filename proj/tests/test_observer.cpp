#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "fedimt/observer.hpp"
#include "fedimt/rng.hpp"

using namespace fedimt;

namespace {

double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Plain running mean of all observations so far.
struct RunningAverage {
    std::vector<double> mean;
    std::size_t n = 0;
    void add(const std::vector<double>& r) {
        if (mean.empty()) mean.assign(r.size(), 0.0);
        ++n;
        for (std::size_t i = 0; i < r.size(); ++i) mean[i] += (r[i] - mean[i]) / static_cast<double>(n);
    }
};

}  // namespace

TEST(Observer, InitIsUniform) {
    const auto s10 = observer_init(10, 0.3, 0.5);
    for (double v : s10.estimate) EXPECT_DOUBLE_EQ(v, 0.1);
    EXPECT_EQ(s10.rounds, 0u);
    const auto s2 = observer_init(2, 0.3, 0.5);
    EXPECT_EQ(s2.estimate, (std::vector<double>{0.5, 0.5}));
    EXPECT_THROW(observer_init(1, 0.3, 0.5), std::invalid_argument);
    EXPECT_THROW(observer_init(3, 0.0, 0.5), std::invalid_argument);
    EXPECT_THROW(observer_init(3, 0.3, 1.5), std::invalid_argument);
}

TEST(Observer, FirstObservationAdoptedVerbatim) {
    const std::vector<double> r{0.1, 0.7, 0.2};
    const auto s = observer_update(observer_init(3, 0.3, 0.5), r);
    EXPECT_EQ(s.estimate, r);
    EXPECT_EQ(s.rounds, 1u);
    ASSERT_EQ(s.history.size(), 1u);
    EXPECT_EQ(s.history.back(), r);
}

TEST(Observer, BlendAndRenormalize) {
    auto s = observer_update(observer_init(2, 0.3, 0.5), std::vector<double>{0.5, 0.5});
    s = observer_update(s, std::vector<double>{0.62, 0.38});
    // 0.35 * 0.5 + 0.15 * 0.62 = 0.268, 0.35 * 0.5 + 0.15 * 0.38 = 0.232, total 0.5
    EXPECT_NEAR(s.estimate[0], 0.536, 1e-15);
    EXPECT_NEAR(s.estimate[1], 0.464, 1e-15);
}

TEST(Observer, StaysProbabilityVector) {
    auto s = observer_init(4, 0.3, 0.5);
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int j = 0; j < 200; ++j) {
        std::vector<double> r(4);
        for (auto& v : r) v = u(rng);
        const double t = std::accumulate(r.begin(), r.end(), 0.0);
        for (auto& v : r) v /= t;
        s = observer_update(s, r);
        EXPECT_NEAR(std::accumulate(s.estimate.begin(), s.estimate.end(), 0.0), 1.0, 1e-12);
        for (double v : s.estimate) EXPECT_GE(v, 0.0);
    }
    EXPECT_EQ(s.history.size(), RatioObserverState::history_capacity);
}

TEST(Observer, ConstantInputFixedPoint) {
    const std::vector<double> start{0.05, 0.05, 0.9};
    const std::vector<double> target{0.6, 0.3, 0.1};
    for (double gain : {0.3, 0.6, 0.9}) {
        auto s = observer_update(observer_init(3, gain, 0.5), start);
        for (int i = 0; i < 50; ++i) s = observer_update(s, target);
        for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(s.estimate[q], target[q], 1e-6) << "gain " << gain;
    }
}

TEST(Observer, ConstantInputErrorShrinksGeometrically) {
    // after renormalization the gap to a constant input shrinks by exactly (1 - gain) per round
    const std::vector<double> start{0.05, 0.05, 0.9};
    const std::vector<double> target{0.6, 0.3, 0.1};
    for (double gain : {0.05, 0.1, 0.3}) {
        auto s = observer_update(observer_init(3, gain, 0.5), start);
        for (int n = 1; n <= 40; ++n) {
            s = observer_update(s, target);
            for (std::size_t q = 0; q < 3; ++q) {
                EXPECT_NEAR(s.estimate[q] - target[q], std::pow(1.0 - gain, n) * (start[q] - target[q]), 1e-12);
            }
        }
    }
}

TEST(Observer, TracksStepChangeFasterThanRunningAverage) {
    const std::vector<double> before{0.8, 0.15, 0.05};
    const std::vector<double> after{0.2, 0.3, 0.5};
    const std::size_t stable_rounds = 20;
    for (double gain : {0.1, 0.2, 0.3, 0.5, 0.7, 0.9}) {
        auto s = observer_init(3, gain, 0.0);
        RunningAverage avg;
        for (std::size_t j = 0; j < stable_rounds; ++j) {
            s = observer_update(s, before);
            avg.add(before);
        }
        for (std::size_t r = 1; r <= 20; ++r) {
            s = observer_update(s, after);
            avg.add(after);
            EXPECT_LT(l2_distance(s.estimate, after), l2_distance(avg.mean, after)) << "gain " << gain << " r " << r;
        }
    }
}

TEST(Observer, CoefficientOverrides) {
    ObserverCoefficients c;
    c.history = 0.0;
    c.observation = 1.0;
    auto s = observer_update(observer_init(2, 0.3, 0.5, c), std::vector<double>{0.9, 0.1});
    s = observer_update(s, std::vector<double>{0.3, 0.7});
    EXPECT_NEAR(s.estimate[0], 0.3, 1e-15);
    ObserverCoefficients bad;
    bad.observation = 0.0;
    EXPECT_THROW(observer_init(2, 0.3, 0.5, bad), std::invalid_argument);
}

TEST(Observer, GainOverrideChangesBlend) {
    auto s = observer_update(observer_init(2, 0.3, 0.5), std::vector<double>{0.5, 0.5});
    const auto fixed = observer_update(s, std::vector<double>{1.0, 0.0});
    const auto high = observer_update(s, std::vector<double>{1.0, 0.0}, 0.9);
    EXPECT_NEAR(fixed.estimate[0], 0.5 * 0.7 + 0.3, 1e-15);
    EXPECT_NEAR(high.estimate[0], 0.5 * 0.1 + 0.9, 1e-15);
}

TEST(Observer, RejectsNonProbabilityInput) {
    const auto s = observer_init(2, 0.3, 0.5);
    EXPECT_THROW(observer_update(s, std::vector<double>{0.5, 0.6}), std::invalid_argument);
    EXPECT_THROW(observer_update(s, std::vector<double>{1.0}), std::invalid_argument);
    EXPECT_THROW(observer_update(s, std::vector<double>{1.5, -0.5}), std::invalid_argument);
}

TEST(MismatchCheck, NeverDropsFirstObservation) {
    const auto s = observer_init(2, 0.3, 0.9);
    const auto d = mismatch_check(s, std::vector<double>{1.0, 0.0});
    EXPECT_FALSE(d.dropped);
    EXPECT_NEAR(d.similarity, std::sqrt(0.5), 1e-15);
}

TEST(MismatchCheck, DropsOrthogonalObservation) {
    const auto s = observer_update(observer_init(2, 0.3, 0.5), std::vector<double>{1.0, 0.0});
    const auto d = mismatch_check(s, std::vector<double>{0.0, 1.0});
    EXPECT_TRUE(d.dropped);
    EXPECT_EQ(d.similarity, 0.0);
    EXPECT_FALSE(mismatch_check(s, std::vector<double>{0.9, 0.1}).dropped);
}

TEST(MismatchCheck, ZeroThresholdNeverDrops) {
    const auto s = observer_update(observer_init(2, 0.3, 0.0), std::vector<double>{1.0, 0.0});
    EXPECT_FALSE(mismatch_check(s, std::vector<double>{0.0, 1.0}).dropped);
}

TEST(Cosine, Examples) {
    EXPECT_NEAR(cosine_similarity(std::vector<double>{0.3, 0.7}, std::vector<double>{0.3, 0.7}), 1.0, 1e-15);
    EXPECT_EQ(cosine_similarity(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 2.0}), 0.0);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{0.31, 0.19}, std::vector<double>{0.62, 0.38}), 1.0, 1e-15);
    EXPECT_THROW(cosine_similarity(std::vector<double>{0.0, 0.0}, std::vector<double>{1.0, 0.0}), std::invalid_argument);
    EXPECT_THROW(cosine_similarity(std::vector<double>{1.0}, std::vector<double>{1.0, 0.0}), std::invalid_argument);
}

TEST(BalancedWeights, BetaZeroAndUniformGiveOnes) {
    for (double w : balanced_weights(std::vector<double>{0.162, 0.838}, 1000, 0.0).weights) EXPECT_EQ(w, 1.0);
    for (double w : balanced_weights(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 400, 0.999).weights) EXPECT_EQ(w, 1.0);
}

TEST(BalancedWeights, MinorityWeighsMore) {
    const std::vector<double> r{0.162, 0.838};
    const auto bw = balanced_weights(r, 1000, 0.999);
    EXPECT_GT(bw.weights[0], bw.weights[1]);
    EXPECT_EQ(bw.per_class_n, (std::vector<double>{162, 838}));
    // ratio-weighted mean is 1
    EXPECT_NEAR(r[0] * bw.weights[0] + r[1] * bw.weights[1], 1.0, 1e-12);
    // relative weights are the raw effective-number weights
    EXPECT_NEAR(bw.weights[0] / bw.weights[1], class_balanced_weight(0.999, 162) / class_balanced_weight(0.999, 838), 1e-12);
}

TEST(BalancedWeights, AntitoneInClassShare) {
    const std::vector<double> r{0.05, 0.1, 0.15, 0.3, 0.4};
    for (double beta : {0.5, 0.9, 0.999}) {
        const auto bw = balanced_weights(r, 2000, beta);
        for (std::size_t q = 1; q < r.size(); ++q) EXPECT_LE(bw.weights[q], bw.weights[q - 1]) << beta;
    }
}

TEST(BalancedWeights, TinyShareClampsToOneSample) {
    const auto bw = balanced_weights(std::vector<double>{0.0001, 0.9999}, 100, 0.9);
    EXPECT_EQ(bw.per_class_n[0], 1.0);
}

TEST(BalancedWeights, LossSpecCarriesWeights) {
    const auto bw = balanced_weights(std::vector<double>{0.3, 0.7}, 50, 0.99);
    const LossSpec spec = bw.loss_spec(0.99);
    EXPECT_EQ(spec.kind, LossKind::class_balanced);
    for (std::size_t q = 0; q < 2; ++q) {
        EXPECT_NEAR(spec.weight_scale * class_balanced_weight(0.99, spec.per_class_n[q]), bw.weights[q], 1e-15);
    }
}

TEST(BalancedWeights, RejectsBadInputs) {
    EXPECT_THROW(balanced_weights(std::vector<double>{0.5, 0.5}, 1, 0.9), std::invalid_argument);
    EXPECT_THROW(balanced_weights(std::vector<double>{0.5, 0.5}, 10, 1.0), std::invalid_argument);
    EXPECT_THROW(balanced_weights(std::vector<double>{0.5, 0.6}, 10, 0.9), std::invalid_argument);
}
