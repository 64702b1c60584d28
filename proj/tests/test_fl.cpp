#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "fedimt/fl.hpp"

using namespace fedimt;

namespace {

FederatedData small_federation(const FlConfig& cfg, std::vector<std::size_t> counts, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_classes = counts.size();
    spec.feature_dim = 6;
    spec.means = random_cluster_means(spec.num_classes, 6, 2.5, seed);
    spec.scales.assign(spec.num_classes, 1.0);
    spec.counts = counts;
    Dataset train = gen_synthetic(spec, derive_seed(seed, {stream::train_data}));
    for (auto& c : spec.counts) c = std::max<std::size_t>(1, c / 4);
    Dataset test = gen_synthetic(spec, derive_seed(seed, {stream::test_data}));
    return federate(std::move(train), std::move(test), cfg, seed);
}

FlConfig small_config() {
    FlConfig c;
    c.num_clients = 10;
    c.shards_per_client = 2;
    c.selection_rate = 0.4;
    c.local_epochs = 2;
    c.batch_size = 16;
    c.lr = 0.01;
    c.momentum = 0.9;
    c.rounds = 6;
    c.hidden_layers = {12, 8};
    c.aux_per_class = 32;
    return c;
}

double max_abs_diff(const MlpModel& a, const MlpModel& b) {
    double d = 0.0;
    for (std::size_t l = 0; l < a.weights.size(); ++l) {
        for (std::size_t i = 0; i < a.weights[l].data().size(); ++i) {
            d = std::max(d, std::abs(a.weights[l].data()[i] - b.weights[l].data()[i]));
        }
        for (std::size_t i = 0; i < a.biases[l].size(); ++i) d = std::max(d, std::abs(a.biases[l][i] - b.biases[l][i]));
    }
    return d;
}

ClientUpdate shifted(const MlpModel& base, double by, std::size_t n, std::size_t steps, std::size_t id) {
    ClientUpdate u{id, base, n, steps};
    for (auto& w : u.model.weights) {
        for (auto& v : w.data()) v += by;
    }
    for (auto& b : u.model.biases) {
        for (auto& v : b) v += by;
    }
    return u;
}

}  // namespace

TEST(Selection, SizeAndDistinctness) {
    const auto ids = select_clients(50, 0.3, 1, 7);
    EXPECT_EQ(ids.size(), 15u);
    EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 15u);
    for (auto k : ids) EXPECT_LT(k, 50u);
}

TEST(Selection, FullRateSelectsEveryone) {
    const auto ids = select_clients(20, 1.0, 3, 1);
    ASSERT_EQ(ids.size(), 20u);
    for (std::size_t k = 0; k < 20; ++k) EXPECT_EQ(ids[k], k);
}

TEST(Selection, DeterministicPerRoundAndSeed) {
    EXPECT_EQ(select_clients(50, 0.3, 4, 9), select_clients(50, 0.3, 4, 9));
    EXPECT_NE(select_clients(50, 0.3, 4, 9), select_clients(50, 0.3, 5, 9));
    EXPECT_NE(select_clients(50, 0.3, 4, 9), select_clients(50, 0.3, 4, 10));
}

TEST(Selection, RoughlyUniformOverRounds) {
    std::vector<int> hits(20, 0);
    for (std::size_t j = 1; j <= 2000; ++j) {
        for (auto k : select_clients(20, 0.3, j, 3)) ++hits[k];
    }
    // expected 600 each
    for (int h : hits) EXPECT_NEAR(h, 600, 90);
}

TEST(Config, RejectsInvalid) {
    FlConfig c;
    c.selection_rate = 0.0;
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = FlConfig{};
    c.num_clients = 3;
    c.selection_rate = 0.1;  // rounds to zero clients
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = FlConfig{};
    c.baseline_loss = LossKind::class_balanced;
    EXPECT_THROW(validate(c), std::invalid_argument);
    EXPECT_NO_THROW(validate(FlConfig{}));
}

TEST(LocalUpdate, StepCountAndSampleCount) {
    const FlConfig cfg = small_config();
    const FederatedData fd = small_federation(cfg, {100, 60, 40}, 1);
    const MlpModel g = mlp_init({6, 12, 8, 3}, 1);
    const TrainingSlice s = full_slice(fd.clients[0]);
    const auto r = local_update(0, s, g, cfg, LossSpec::plain(), 5);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->update.sample_count, s.size());
    EXPECT_EQ(r->update.local_steps, local_step_count(s.size(), cfg.batch_size, cfg.local_epochs));
    EXPECT_EQ(local_step_count(20, 16, 2), 4u);
    EXPECT_EQ(local_step_count(32, 16, 5), 10u);
    EXPECT_NE(r->update.model, g);
}

TEST(LocalUpdate, EmptySliceIsSkipped) {
    const FlConfig cfg = small_config();
    const FederatedData fd = small_federation(cfg, {100, 60, 40}, 1);
    TrainingSlice empty{&fd.clients[0].dataset, {}};
    EXPECT_FALSE(local_update(0, empty, mlp_init({6, 12, 8, 3}, 1), cfg, LossSpec::plain(), 5));
}

TEST(LocalUpdate, ZeroLearningRateLeavesModel) {
    FlConfig cfg = small_config();
    cfg.lr = 0.0;
    const FederatedData fd = small_federation(cfg, {100, 60, 40}, 1);
    const MlpModel g = mlp_init({6, 12, 8, 3}, 1);
    EXPECT_EQ(local_update(0, full_slice(fd.clients[1]), g, cfg, LossSpec::plain(), 5)->update.model, g);
}

TEST(LocalUpdate, ProxWithZeroMuIsPlainUpdate) {
    FlConfig plain = small_config();
    FlConfig prox = plain;
    prox.strategy = Strategy::fedprox;
    prox.prox_mu = 0.0;
    const FederatedData fd = small_federation(plain, {100, 60, 40}, 2);
    const MlpModel g = mlp_init({6, 12, 8, 3}, 2);
    const auto a = local_update(3, full_slice(fd.clients[3]), g, plain, LossSpec::plain(), 11);
    const auto b = local_update(3, full_slice(fd.clients[3]), g, prox, LossSpec::plain(), 11);
    EXPECT_EQ(a->update.model, b->update.model);
}

TEST(LocalUpdate, ProxTermPullsTowardGlobal) {
    FlConfig plain = small_config();
    FlConfig prox = plain;
    prox.strategy = Strategy::fedprox;
    prox.prox_mu = 5.0;
    const FederatedData fd = small_federation(plain, {100, 60, 40}, 2);
    const MlpModel g = mlp_init({6, 12, 8, 3}, 2);
    const auto a = local_update(3, full_slice(fd.clients[3]), g, plain, LossSpec::plain(), 11);
    const auto b = local_update(3, full_slice(fd.clients[3]), g, prox, LossSpec::plain(), 11);
    EXPECT_LT(max_abs_diff(b->update.model, g), max_abs_diff(a->update.model, g));
}

TEST(Aggregate, WeightsAreSampleProportional) {
    const MlpModel g = mlp_init({3, 4, 2}, 1);
    const std::vector<ClientUpdate> ups{shifted(g, 0, 10, 1, 0), shifted(g, 0, 30, 1, 1), shifted(g, 0, 60, 1, 2)};
    const auto p = aggregation_weights(ups);
    EXPECT_DOUBLE_EQ(p[0], 0.1);
    EXPECT_DOUBLE_EQ(p[1], 0.3);
    EXPECT_DOUBLE_EQ(p[2], 0.6);
    EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
}

TEST(Aggregate, SingleClientIsAdoptedVerbatim) {
    const MlpModel g = mlp_init({3, 4, 2}, 1);
    const std::vector<ClientUpdate> ups{shifted(g, 0.37, 17, 3, 0)};
    for (Strategy s : {Strategy::fedavg, Strategy::fedprox}) EXPECT_EQ(aggregate(ups, g, s), ups[0].model);
    EXPECT_LT(max_abs_diff(aggregate(ups, g, Strategy::fednova), ups[0].model), 1e-15);
}

TEST(Aggregate, WeightedMean) {
    const MlpModel g = mlp_init({3, 4, 2}, 1);
    const std::vector<ClientUpdate> ups{shifted(g, 1.0, 10, 1, 0), shifted(g, -1.0, 30, 1, 1)};
    const MlpModel m = aggregate(ups, g, Strategy::fedavg);
    // 0.25 * (+1) + 0.75 * (-1) = -0.5
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        for (std::size_t i = 0; i < g.weights[l].data().size(); ++i) {
            EXPECT_NEAR(m.weights[l].data()[i], g.weights[l].data()[i] - 0.5, 1e-15);
        }
    }
}

TEST(Aggregate, NovaEqualsAvgUnderEqualSteps) {
    const FlConfig cfg = small_config();
    const FederatedData fd = small_federation(cfg, {120, 80, 40}, 3);
    const MlpModel g = mlp_init({6, 12, 8, 3}, 3);
    std::vector<ClientUpdate> ups;
    for (std::size_t k = 0; k < 4; ++k) {
        auto r = local_update(k, full_slice(fd.clients[k]), g, cfg, LossSpec::plain(), k);
        r->update.local_steps = 7;  // same step count for everyone
        ups.push_back(r->update);
    }
    EXPECT_LT(max_abs_diff(aggregate(ups, g, Strategy::fednova), aggregate(ups, g, Strategy::fedavg)), 1e-12);
}

TEST(Aggregate, NovaNormalizesBySteps) {
    const MlpModel g = mlp_init({2, 2}, 1);
    // client 0 moved +1 in 1 step, client 1 moved +4 in 4 steps; equal samples
    const std::vector<ClientUpdate> ups{shifted(g, 1.0, 10, 1, 0), shifted(g, 4.0, 10, 4, 1)};
    const MlpModel nova = aggregate(ups, g, Strategy::fednova);
    // tau_eff = 2.5, direction = 0.5 * 1 + 0.5 * 1 = 1
    EXPECT_NEAR(nova.weights[0](0, 0) - g.weights[0](0, 0), 2.5, 1e-12);
    const MlpModel avg = aggregate(ups, g, Strategy::fedavg);
    EXPECT_NEAR(avg.weights[0](0, 0) - g.weights[0](0, 0), 2.5, 1e-12);
    const std::vector<ClientUpdate> skew{shifted(g, 1.0, 30, 1, 0), shifted(g, 4.0, 10, 4, 1)};
    // p = (0.75, 0.25): tau_eff = 1.75, direction 1 -> 1.75; fedavg gives 0.75 + 1 = 1.75 as well
    EXPECT_NEAR(aggregate(skew, g, Strategy::fednova).weights[0](0, 0) - g.weights[0](0, 0), 1.75, 1e-12);
    const std::vector<ClientUpdate> uneven{shifted(g, 1.0, 10, 1, 0), shifted(g, 2.0, 10, 4, 1)};
    // tau_eff = 2.5, direction = 0.5 * 1 + 0.5 * 0.5 = 0.75 -> 1.875 (fedavg: 1.5)
    EXPECT_NEAR(aggregate(uneven, g, Strategy::fednova).weights[0](0, 0) - g.weights[0](0, 0), 1.875, 1e-12);
    EXPECT_NEAR(aggregate(uneven, g, Strategy::fedavg).weights[0](0, 0) - g.weights[0](0, 0), 1.5, 1e-12);
}

TEST(Aggregate, Errors) {
    const MlpModel g = mlp_init({3, 4, 2}, 1);
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{}, g, Strategy::fedavg), std::invalid_argument);
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{shifted(g, 0, 0, 1, 0)}, g, Strategy::fedavg), std::invalid_argument);
    const MlpModel other = mlp_init({3, 5, 2}, 1);
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{ClientUpdate{0, other, 5, 1}}, g, Strategy::fedavg),
                 std::invalid_argument);
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{shifted(g, 0, 5, 0, 0)}, g, Strategy::fednova),
                 std::invalid_argument);
}

TEST(Federation, BaselineUsesConfiguredLoss) {
    FlConfig cfg = small_config();
    Federation ce(cfg, small_federation(cfg, {100, 60, 40}, 4), 4);
    EXPECT_EQ(ce.round_loss(), LossSpec::plain());
    cfg.baseline_loss = LossKind::focal;
    cfg.focal_gamma = 1.5;
    Federation fo(cfg, small_federation(cfg, {100, 60, 40}, 4), 4);
    EXPECT_EQ(fo.round_loss(), LossSpec::focal(1.5));
    const RoundRecord r = ce.run_round();
    EXPECT_EQ(r.selected.size(), 4u);
    EXPECT_TRUE(r.round_ratio.empty());
    EXPECT_FALSE(r.t_round);
    EXPECT_EQ(r.class_weights, (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Federation, FirstFedImTRoundTrainsWithUnitWeights) {
    FlConfig cfg = small_config();
    cfg.algorithm = Algorithm::fedimt;
    Federation fed(cfg, small_federation(cfg, {100, 60, 40}, 5), 5);
    const RoundRecord r1 = fed.run_round();
    EXPECT_EQ(r1.class_weights, (std::vector<double>{1.0, 1.0, 1.0}));
    ASSERT_EQ(r1.round_ratio.size(), 3u);
    EXPECT_FALSE(r1.dropped);
    EXPECT_EQ(r1.observer_ratio, r1.round_ratio);
    ASSERT_TRUE(r1.t_round && r1.t_global);
    // later rounds train with rebalanced weights
    const RoundRecord r2 = fed.run_round();
    EXPECT_NE(r2.class_weights, r1.class_weights);
}

TEST(Federation, EstimatesAreProbabilityVectors) {
    FlConfig cfg = small_config();
    cfg.algorithm = Algorithm::fedimt;
    Federation fed(cfg, small_federation(cfg, {100, 60, 40}, 6), 6);
    for (int j = 0; j < 5; ++j) {
        const RoundRecord r = fed.run_round();
        double a = 0, b = 0;
        for (double v : r.round_ratio) a += v;
        for (double v : r.observer_ratio) b += v;
        EXPECT_NEAR(a, 1.0, 1e-12);
        EXPECT_NEAR(b, 1.0, 1e-12);
        for (double c : r.estimated_counts) EXPECT_GE(c, 0.0);
    }
}

TEST(Federation, DroppedRoundKeepsModelAndAdvancesObserver) {
    FlConfig cfg = small_config();
    cfg.algorithm = Algorithm::fedimt;
    Federation fed(cfg, small_federation(cfg, {100, 80, 60, 40}, 7), 7);
    fed.run_round();
    const MlpModel before = fed.global_model();
    const RatioObserverState obs = fed.observer();
    std::vector<double> adversarial(4, 0.0);
    const auto least = std::min_element(obs.estimate.begin(), obs.estimate.end()) - obs.estimate.begin();
    adversarial[static_cast<std::size_t>(least)] = 1.0;
    ASSERT_LT(cosine_similarity(adversarial, obs.estimate), cfg.drop_threshold);
    fed.inject_next_ratio(adversarial);
    const RoundRecord r = fed.run_round();
    EXPECT_TRUE(r.dropped);
    EXPECT_EQ(fed.global_model(), before);
    EXPECT_EQ(fed.observer().rounds, obs.rounds + 1);
    EXPECT_EQ(fed.observer().estimate, observer_update(obs, adversarial).estimate);
}

TEST(Federation, BalancedLossWithBetaZeroMatchesFedAvg) {
    FlConfig base = small_config();
    FlConfig imt = base;
    imt.algorithm = Algorithm::fedimt;
    imt.beta = 0.0;
    imt.drop_threshold = 0.0;
    Federation a(base, small_federation(base, {100, 60, 40}, 8), 8);
    Federation b(imt, small_federation(imt, {100, 60, 40}, 8), 8);
    for (int j = 0; j < 4; ++j) {
        const RoundRecord ra = a.run_round();
        const RoundRecord rb = b.run_round();
        EXPECT_FALSE(rb.dropped);
        EXPECT_EQ(ra.accuracy, rb.accuracy);
        EXPECT_EQ(a.global_model(), b.global_model());
    }
}

TEST(Federation, LatestWindowBoundsTrainingData) {
    FlConfig cfg = small_config();
    cfg.algorithm = Algorithm::fedimt;
    cfg.n_latest = 10;
    Federation fed(cfg, small_federation(cfg, {100, 60, 40}, 9), 9);
    for (std::size_t j = 1; j <= cfg.rounds; ++j) {
        for (std::size_t k = 0; k < cfg.num_clients; ++k) EXPECT_LE(fed.slice_for(k, j).size(), 10u);
    }
    // each class count is clamped to the K * n_latest samples in scope
    const RoundRecord r = fed.run_round();
    for (double c : r.estimated_counts) {
        EXPECT_GE(c, 0.0);
        EXPECT_LE(c, 4.0 * 10.0);
    }
}

TEST(Experiment, ZeroRoundsGivesInitialRecordOnly) {
    FlConfig cfg = small_config();
    cfg.rounds = 0;
    const ExperimentReport rep = run_experiment(cfg, small_federation(cfg, {100, 60, 40}, 10), 10);
    ASSERT_EQ(rep.records.size(), 1u);
    EXPECT_EQ(rep.records[0].round, 0u);
    EXPECT_EQ(rep.summary.drop_count, 0u);
    EXPECT_FALSE(rep.summary.mean_t_round);
}

TEST(Experiment, DeterministicForSeed) {
    FlConfig cfg = small_config();
    cfg.algorithm = Algorithm::fedimt;
    const ExperimentReport a = run_experiment(cfg, small_federation(cfg, {100, 60, 40}, 11), 11);
    const ExperimentReport b = run_experiment(cfg, small_federation(cfg, {100, 60, 40}, 11), 11);
    EXPECT_EQ(a, b);
    ASSERT_EQ(a.records.size(), cfg.rounds + 1);
    const ExperimentReport c = run_experiment(cfg, small_federation(cfg, {100, 60, 40}, 12), 12);
    EXPECT_NE(a.records.back().observer_ratio, c.records.back().observer_ratio);
}

TEST(Experiment, SummaryAggregatesRecords) {
    std::vector<RoundRecord> recs(3);
    recs[0].round = 0;
    recs[0].t_global = 0.1;  // round 0 is excluded
    recs[1].round = 1;
    recs[1].t_round = 0.8;
    recs[1].t_global = 0.9;
    recs[1].dropped = true;
    recs[2].round = 2;
    recs[2].t_round = 0.6;
    recs[2].t_global = 0.7;
    recs[2].accuracy = 0.55;
    recs[2].minority_accuracy = 0.25;
    const ExperimentSummary s = summarize(recs);
    EXPECT_DOUBLE_EQ(*s.mean_t_round, 0.7);
    EXPECT_DOUBLE_EQ(*s.mean_t_global, 0.8);
    EXPECT_EQ(s.drop_count, 1u);
    EXPECT_EQ(s.final_accuracy, 0.55);
    EXPECT_EQ(*s.final_minority_accuracy, 0.25);
}
